//! Closed-loop MPC simulation and the four-way formulation comparison.

use std::time::Instant;

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::collision::{robot_ellipsoid, ConstraintKind};
use crate::dynamics::{rk4_step, InputVec, RobotState, StateVec, NX};
use crate::error::{Error, Result};
use crate::geometry::interiors_overlap;
use crate::ocp::{assemble, shift_warm_start, OcpProblem, ReferenceTrajectory, Scenario, WarmStart};
use crate::oracles::ellipsoid_pair_distance;
use crate::planner::{segment_and_fit_from, theta_star, time_parameterize, PathPolyline};
use crate::sqp::{solve, SqpResult, SqpSettings, SqpStatus};

/// Distance to the goal below which the goal counts as reached.
pub const GOAL_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSettings {
    pub v_max: f64,
    pub a_max: f64,
    /// Path window length in metres; defaults to `1.5 · v_max · T`.
    #[serde(default)]
    pub lookahead: Option<f64>,
}

impl Default for ReferenceSettings {
    fn default() -> Self {
        Self {
            v_max: 0.5,
            a_max: 0.5,
            lookahead: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSettings {
    pub steps: usize,
    pub solver: SqpSettings,
    pub reference: ReferenceSettings,
    /// Per-component bound of a uniform additive state disturbance.
    pub disturbance: Option<[f64; NX]>,
    pub seed: u64,
}

impl Default for SimSettings {
    fn default() -> Self {
        Self {
            steps: 200,
            solver: SqpSettings::default(),
            reference: ReferenceSettings::default(),
            disturbance: None,
            seed: 0,
        }
    }
}

impl SimSettings {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("number of simulation steps must be at least 1"));
        }
        self.solver.validate()?;
        let r = &self.reference;
        if !(r.v_max > 0.0 && r.a_max > 0.0) || r.lookahead.is_some_and(|l| !(l > 0.0)) {
            return Err(Error::invalid("reference v_max, a_max and lookahead must be positive"));
        }
        if let Some(d) = &self.disturbance {
            if d.iter().any(|b| !(*b >= 0.0) || !b.is_finite()) {
                return Err(Error::invalid("disturbance bounds must be finite and non-negative"));
            }
        }
        Ok(())
    }
}

/// One closed-loop step. `state` is the plant state after applying `input`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub time: f64,
    pub input: InputVec,
    pub state: StateVec,
    /// Distance to each obstacle; zero when overlapping.
    pub clearances: Vec<f64>,
    pub overlaps: Vec<bool>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub sqp_iterations: usize,
    pub qp_iterations: usize,
    pub status: SqpStatus,
    pub solve_seconds: f64,
    /// Frozen parameters of the first stage: one `γ̂` or two `η̂` entries per
    /// obstacle; empty for the free formulations.
    pub fixed_params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub mode: ConstraintKind,
    pub initial_state: StateVec,
    pub path: PathPolyline,
    pub steps: Vec<StepLog>,
    pub goal_reached: bool,
}

impl RunLog {
    pub fn min_clearances(&self) -> Vec<f64> {
        let n_m = self.steps.first().map_or(0, |s| s.clearances.len());
        (0..n_m)
            .map(|m| self.steps.iter().map(|s| s.clearances[m]).fold(f64::INFINITY, f64::min))
            .collect()
    }

    pub fn any_overlap(&self) -> bool {
        self.steps.iter().any(|s| s.overlaps.iter().any(|o| *o))
    }
}

/// Global path from start to goal on the scenario grid, or the straight
/// segment when the scenario has no grid.
pub fn global_path(scenario: &Scenario) -> Result<PathPolyline> {
    let start = scenario.start.position();
    let goal = scenario.goal.position();
    match &scenario.grid {
        Some(grid) => theta_star(grid, &start, &goal),
        None => PathPolyline::new(vec![start, goal]),
    }
}

/// Tracks the segmentation progress along the global path.
#[derive(Debug, Clone)]
pub struct ReferenceBuilder {
    path: PathPolyline,
    progress: f64,
    settings: ReferenceSettings,
    dt: f64,
    n: usize,
    lookahead: f64,
}

impl ReferenceBuilder {
    pub fn new(path: PathPolyline, scenario: &Scenario, settings: ReferenceSettings) -> Self {
        let lookahead = settings
            .lookahead
            .unwrap_or(1.5 * settings.v_max * scenario.horizon.duration);
        Self {
            path,
            progress: 0.0,
            settings,
            dt: scenario.horizon.dt(),
            n: scenario.horizon.steps,
            lookahead,
        }
    }

    pub fn progress(&self) -> f64 {
        self.progress
    }

    /// Reference for the horizon starting at `x`.
    pub fn build(&mut self, x: &StateVec) -> Result<ReferenceTrajectory> {
        let pos = Vector2::new(x[0], x[1]);
        let (curve, s0) = segment_and_fit_from(&self.path, &pos, self.lookahead, self.progress)?;
        self.progress = s0;
        if curve.arc_length() < 1e-6 {
            let end = curve.end();
            let rest = RobotState::new(end[0], end[1], x[2], 0.0, 0.0);
            return Ok(ReferenceTrajectory::stationary(&rest, self.n, self.dt));
        }
        time_parameterize(
            &curve,
            self.settings.v_max,
            self.settings.a_max,
            self.dt,
            self.n,
            x[3].max(0.0),
            x[2],
        )
    }
}

/// Clearance and overlap flag per obstacle for the robot at `x`.
pub fn clearances(scenario: &Scenario, x: &StateVec) -> (Vec<f64>, Vec<bool>) {
    let robot = robot_ellipsoid(&scenario.robot, &RobotState::from_vector(x));
    scenario
        .obstacles
        .iter()
        .map(|o| {
            let e = o.to_ellipsoid();
            if interiors_overlap(&robot, &e) {
                (0.0, true)
            } else {
                match ellipsoid_pair_distance(&robot, &e) {
                    Ok(pd) => (pd.distance, false),
                    // Touching within the overlap tolerance.
                    Err(_) => (0.0, false),
                }
            }
        })
        .unzip()
}

/// Assembles the OCP for `kind` and freezes its parameters from the warm
/// start for the fixed variants.
pub fn build_problem(
    scenario: &Scenario,
    kind: ConstraintKind,
    reference: &ReferenceTrajectory,
    x: &StateVec,
    warm: &WarmStart,
) -> Result<OcpProblem> {
    let sc = scenario.with_kind(kind);
    let problem = assemble(&sc, reference, x, Some(warm))?;
    if kind.is_fixed() {
        let mut guess = warm.states.clone();
        guess[0] = *x;
        problem.freeze_parameters(&guess)
    } else {
        Ok(problem)
    }
}

fn first_stage_fixed_params(problem: &OcpProblem) -> Vec<f64> {
    if let Some(g) = problem.fixed_gammas() {
        g[0].clone()
    } else if let Some(e) = problem.fixed_etas() {
        e[0].iter().flat_map(|v| [v[0], v[1]]).collect()
    } else {
        Vec::new()
    }
}

fn clamp_input(scenario: &Scenario, u: InputVec) -> InputVec {
    let l = &scenario.limits;
    InputVec::new(u[0].clamp(l.a_min, l.a_max), u[1].clamp(l.alpha_min, l.alpha_max))
}

/// Plant plus bookkeeping shared by the closed-loop drivers.
struct Plant<'a> {
    scenario: &'a Scenario,
    settings: &'a SimSettings,
    rng: ChaCha8Rng,
    x: StateVec,
    warm: Option<WarmStart>,
    references: ReferenceBuilder,
}

impl<'a> Plant<'a> {
    fn new(scenario: &'a Scenario, settings: &'a SimSettings) -> Result<(Self, PathPolyline)> {
        scenario.validate()?;
        settings.validate()?;
        let path = global_path(scenario)?;
        let references = ReferenceBuilder::new(path.clone(), scenario, settings.reference);
        Ok((
            Self {
                scenario,
                settings,
                rng: ChaCha8Rng::seed_from_u64(settings.seed),
                x: scenario.start.to_vector(),
                warm: None,
                references,
            },
            path,
        ))
    }

    /// Reference and warm start for the current state.
    fn prepare(&mut self) -> Result<(ReferenceTrajectory, WarmStart)> {
        let reference = self.references.build(&self.x)?;
        let warm = match &self.warm {
            Some(prev) => shift_warm_start(prev),
            None => WarmStart::from_reference(&reference),
        };
        Ok((reference, warm))
    }

    /// Applies the first input of `result` (zero input on QP failure),
    /// advances the plant and stores the next warm start.
    fn advance(&mut self, problem: &OcpProblem, result: &SqpResult, fallback: WarmStart) -> InputVec {
        let u = if result.status == SqpStatus::QpFailure {
            log::warn!("solver failure, applying zero input");
            self.warm = Some(fallback);
            InputVec::zeros()
        } else {
            self.warm = Some(problem.warm_start_from(&result.stages));
            clamp_input(self.scenario, problem.input(&result.stages, 0))
        };
        let mut next = rk4_step(&self.x, &u, self.scenario.horizon.dt());
        if let Some(bound) = &self.settings.disturbance {
            for (xi, b) in next.iter_mut().zip(bound) {
                if *b > 0.0 {
                    *xi += self.rng.random_range(-*b..=*b);
                }
            }
        }
        self.x = next;
        u
    }

    fn goal_reached(&self) -> bool {
        let d = Vector2::new(self.x[0], self.x[1]) - self.scenario.goal.position();
        d.norm() <= GOAL_TOLERANCE && self.x[3].abs() <= self.scenario.terminal_eps.0
    }

    fn log(&self, step: usize, u: InputVec, problem: &OcpProblem, result: &SqpResult, seconds: f64) -> StepLog {
        let (clear, overlaps) = clearances(self.scenario, &self.x);
        StepLog {
            step,
            time: (step + 1) as f64 * self.scenario.horizon.dt(),
            input: u,
            state: self.x,
            clearances: clear,
            overlaps,
            objective: result.objective,
            kkt_residual: result.kkt_residual,
            sqp_iterations: result.iterations,
            qp_iterations: result.qp_iterations,
            status: result.status,
            solve_seconds: seconds,
            fixed_params: first_stage_fixed_params(problem),
        }
    }
}

/// Runs the receding-horizon loop in the scenario's constraint mode until the
/// goal is reached or `settings.steps` steps have been taken.
pub fn run_closed_loop(scenario: &Scenario, settings: &SimSettings) -> Result<RunLog> {
    let (mut plant, path) = Plant::new(scenario, settings)?;
    let kind = scenario.mode.kind;
    let mut steps = Vec::new();
    let mut goal_reached = false;
    for step in 0..settings.steps {
        let (reference, warm) = plant.prepare()?;
        let t0 = Instant::now();
        let problem = build_problem(scenario, kind, &reference, &plant.x, &warm)?;
        let result = solve(&problem, &settings.solver)?;
        let seconds = t0.elapsed().as_secs_f64();
        let u = plant.advance(&problem, &result, warm);
        steps.push(plant.log(step, u, &problem, &result, seconds));
        if plant.goal_reached() {
            goal_reached = true;
            break;
        }
    }
    Ok(RunLog {
        mode: kind,
        initial_state: scenario.start.to_vector(),
        path,
        steps,
        goal_reached,
    })
}

/// Order of the formulations in comparison records.
pub const COMPARISON_ORDER: [ConstraintKind; 4] = [
    ConstraintKind::MinkowskiFreeGamma,
    ConstraintKind::MinkowskiFixedGamma,
    ConstraintKind::HyperplaneFreeEta,
    ConstraintKind::HyperplaneFixedEta,
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRecord {
    pub step: usize,
    /// Objectives in [`COMPARISON_ORDER`].
    pub objectives: [f64; 4],
    pub converged: [bool; 4],
    /// `(fixed-γ̂ − free-γ) / free-γ`.
    pub rel_fixed_gamma: f64,
    /// `(fixed-η̂ − free-η) / free-η`.
    pub rel_fixed_eta: f64,
    /// `(fixed-η̂ − free-γ) / free-γ`.
    pub rel_fixed_eta_vs_gamma: f64,
    /// Wall time of the early-terminated solves in [`COMPARISON_ORDER`].
    pub timed_seconds: [f64; 4],
}

impl ComparisonRecord {
    /// Both sides of the relative costs converged.
    pub fn valid(&self) -> bool {
        self.converged.iter().all(|c| *c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompareSettings {
    /// SQP settings for the solves run to convergence.
    pub converged: SqpSettings,
    /// SQP settings of the early-terminated timing solves.
    pub timed: SqpSettings,
    /// Repetitions per timing solve; the minimum is recorded.
    pub timing_repeats: usize,
}

impl Default for CompareSettings {
    fn default() -> Self {
        Self {
            converged: SqpSettings::default(),
            timed: SqpSettings::real_time(2),
            timing_repeats: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRun {
    pub log: RunLog,
    pub records: Vec<ComparisonRecord>,
}

/// Relative additional cost with a floor on the denominator.
pub fn relative_cost(restricted: f64, free: f64) -> f64 {
    (restricted - free) / free.abs().max(1e-6)
}

/// Drives the loop with the free-`γ` formulation and, at every step, solves
/// the same OCP from the same warm start under the other three formulations
/// to convergence. Each of the four formulations is also solved with the
/// early-terminated settings and timed.
pub fn compare_formulations(
    scenario: &Scenario,
    settings: &SimSettings,
    compare: &CompareSettings,
) -> Result<ComparisonRun> {
    compare.converged.validate()?;
    compare.timed.validate()?;
    let (mut plant, path) = Plant::new(scenario, settings)?;
    let mut steps = Vec::new();
    let mut records = Vec::new();
    let mut goal_reached = false;
    for step in 0..settings.steps {
        let (reference, warm) = plant.prepare()?;
        let x = plant.x;
        let t0 = Instant::now();
        let drive = build_problem(scenario, ConstraintKind::MinkowskiFreeGamma, &reference, &x, &warm)?;
        let drive_result = solve(&drive, &compare.converged)?;
        let seconds = t0.elapsed().as_secs_f64();

        let side: Vec<Result<SqpResult>> = std::thread::scope(|s| {
            let handles: Vec<_> = COMPARISON_ORDER[1..]
                .iter()
                .map(|&kind| {
                    let (reference, warm) = (&reference, &warm);
                    s.spawn(move || {
                        let p = build_problem(scenario, kind, reference, &x, warm)?;
                        solve(&p, &compare.converged)
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("side solve thread panicked"))
                .collect()
        });
        let mut results = vec![drive_result.clone()];
        for r in side {
            results.push(r?);
        }

        let mut timed = [0.0; 4];
        for (i, &kind) in COMPARISON_ORDER.iter().enumerate() {
            let mut best = f64::INFINITY;
            for _ in 0..compare.timing_repeats.max(1) {
                let t = Instant::now();
                let p = build_problem(scenario, kind, &reference, &x, &warm)?;
                let r = solve(&p, &compare.timed)?;
                std::hint::black_box(&r);
                best = best.min(t.elapsed().as_secs_f64());
            }
            timed[i] = best;
        }

        let objectives = [0, 1, 2, 3].map(|i| results[i].objective);
        let converged = [0, 1, 2, 3].map(|i| results[i].status == SqpStatus::Converged);
        records.push(ComparisonRecord {
            step,
            objectives,
            converged,
            rel_fixed_gamma: relative_cost(objectives[1], objectives[0]),
            rel_fixed_eta: relative_cost(objectives[3], objectives[2]),
            rel_fixed_eta_vs_gamma: relative_cost(objectives[3], objectives[0]),
            timed_seconds: timed,
        });

        let u = plant.advance(&drive, &drive_result, warm);
        steps.push(plant.log(step, u, &drive, &drive_result, seconds));
        if plant.goal_reached() {
            goal_reached = true;
            break;
        }
    }
    Ok(ComparisonRun {
        log: RunLog {
            mode: ConstraintKind::MinkowskiFreeGamma,
            initial_state: scenario.start.to_vector(),
            path,
            steps,
            goal_reached,
        },
        records,
    })
}

/// Median of the finite values; `NaN` when there are none.
pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Linear-interpolation quantile of the finite values.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}
