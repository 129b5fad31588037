//! Command implementations behind the `ellmpc` binary.
//!
//! Every command reads a scenario file and writes plain CSV and JSON files.
//! Wall-clock measurements go to `timing.json` only, so every other file is
//! byte-identical across runs with the same inputs.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::collision::{robot_gamma_bounds, ConstraintKind};
use crate::error::Error;
use crate::scenario::{load_scenario, LoadedScenario};
use crate::sim::{
    compare_formulations, global_path, median, quantile, run_closed_loop, CompareSettings, ComparisonRun,
    ReferenceBuilder, RunLog, COMPARISON_ORDER,
};
use crate::sqp::SqpSettings;

/// Version of the JSON summary layout.
pub const SCHEMA_VERSION: u32 = 1;

/// Exit status of a command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Success = 0,
    InvalidInput = 1,
    RuntimeFailure = 2,
}

/// Error of a command together with the exit status it maps to.
#[derive(Debug)]
pub struct CommandError {
    pub code: ExitCode,
    pub error: Error,
}

impl CommandError {
    fn invalid(error: Error) -> Self {
        Self {
            code: ExitCode::InvalidInput,
            error,
        }
    }

    fn runtime(error: Error) -> Self {
        Self {
            code: ExitCode::RuntimeFailure,
            error,
        }
    }
}

impl fmt::Display for CommandError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.error)
    }
}

impl std::error::Error for CommandError {}

pub type CommandResult<T> = std::result::Result<T, CommandError>;

fn load(path: &Path) -> CommandResult<LoadedScenario> {
    load_scenario(path).map_err(|e| match e {
        Error::Io(io) => CommandError::invalid(Error::Scenario(format!("{}: {io}", path.display()))),
        other => CommandError::invalid(other),
    })
}

fn runtime<T>(r: crate::Result<T>) -> CommandResult<T> {
    r.map_err(CommandError::runtime)
}

/// Overrides applied on top of the scenario file.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunOptions {
    pub mode: Option<ConstraintKind>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub max_sqp_iters: Option<usize>,
}

impl RunOptions {
    fn apply(&self, loaded: &mut LoadedScenario) -> CommandResult<()> {
        if let Some(mode) = self.mode {
            loaded.scenario = loaded.scenario.with_kind(mode);
        }
        if let Some(steps) = self.steps {
            loaded.sim.steps = steps;
        }
        if let Some(seed) = self.seed {
            loaded.sim.seed = seed;
        }
        if let Some(iters) = self.max_sqp_iters {
            loaded.sim.solver.max_sqp_iters = iters;
        }
        loaded.sim.validate().map_err(CommandError::invalid)
    }
}

/// Derived quantities printed by `check`.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub mode: ConstraintKind,
    pub dt: f64,
    pub horizon_steps: usize,
    /// `(lower, upper)` over-approximation parameter bounds per obstacle.
    pub gamma_bounds: Vec<(f64, f64)>,
    pub path_length: f64,
    pub first_reference_length: f64,
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scenario {}: valid", self.name)?;
        writeln!(f, "mode: {}", self.mode)?;
        writeln!(f, "dt: {} s over {} intervals", self.dt, self.horizon_steps)?;
        for (m, (lo, hi)) in self.gamma_bounds.iter().enumerate() {
            writeln!(f, "obstacle {m}: gamma in [{lo:.6}, {hi:.6}]")?;
        }
        writeln!(f, "global path length: {:.4} m", self.path_length)?;
        write!(f, "first reference length: {:.4} m", self.first_reference_length)
    }
}

fn reference_length(states: &[crate::dynamics::StateVec]) -> f64 {
    states.windows(2).map(|w| (w[1][0] - w[0][0]).hypot(w[1][1] - w[0][1])).sum()
}

/// Validates a scenario and reports derived quantities.
pub fn cmd_check(path: &Path) -> CommandResult<CheckReport> {
    let loaded = load(path)?;
    let sc = &loaded.scenario;
    let path_poly = global_path(sc).map_err(CommandError::invalid)?;
    let mut builder = ReferenceBuilder::new(path_poly.clone(), sc, loaded.sim.reference);
    let reference = builder.build(&sc.start.to_vector()).map_err(CommandError::invalid)?;
    Ok(CheckReport {
        name: loaded.name.clone(),
        mode: sc.mode.kind,
        dt: sc.horizon.dt(),
        horizon_steps: sc.horizon.steps,
        gamma_bounds: sc
            .obstacles
            .iter()
            .map(|o| {
                let b = robot_gamma_bounds(&sc.robot, o);
                (b.lower, b.upper)
            })
            .collect(),
        path_length: path_poly.length(),
        first_reference_length: reference_length(&reference.states),
    })
}

fn fmt_f(x: f64) -> String {
    format!("{x}")
}

fn csv_writer(path: &Path) -> CommandResult<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| CommandError::runtime(e.into()))
}

fn csv_done(mut w: csv::Writer<fs::File>) -> CommandResult<()> {
    w.flush().map_err(|e| CommandError::runtime(e.into()))
}

fn write_row(w: &mut csv::Writer<fs::File>, row: &[String]) -> CommandResult<()> {
    w.write_record(row).map_err(|e| CommandError::runtime(e.into()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CommandResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CommandError::runtime(e.into()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CommandError::runtime(e.into()))
}

fn ensure_dir(dir: &Path) -> CommandResult<()> {
    fs::create_dir_all(dir).map_err(|e| CommandError::runtime(e.into()))
}

fn param_names(kind: ConstraintKind, n_obstacles: usize) -> Vec<String> {
    match kind {
        ConstraintKind::MinkowskiFixedGamma => (0..n_obstacles).map(|m| format!("gamma_hat_{m}")).collect(),
        ConstraintKind::HyperplaneFixedEta => (0..n_obstacles)
            .flat_map(|m| [format!("eta_hat_{m}_x"), format!("eta_hat_{m}_y")])
            .collect(),
        _ => Vec::new(),
    }
}

/// Header of `trajectory.csv`.
pub fn trajectory_header(kind: ConstraintKind, n_obstacles: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "step",
        "time",
        "x",
        "y",
        "theta",
        "v",
        "omega",
        "a",
        "alpha",
        "objective",
        "kkt_residual",
        "sqp_iterations",
        "qp_iterations",
        "status",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend(param_names(kind, n_obstacles));
    h
}

fn write_run_csvs(log: &RunLog, n_obstacles: usize, dir: &Path) -> CommandResult<()> {
    let mut traj = csv_writer(&dir.join("trajectory.csv"))?;
    write_row(&mut traj, &trajectory_header(log.mode, n_obstacles))?;
    for s in &log.steps {
        let mut row = vec![
            s.step.to_string(),
            fmt_f(s.time),
            fmt_f(s.state[0]),
            fmt_f(s.state[1]),
            fmt_f(s.state[2]),
            fmt_f(s.state[3]),
            fmt_f(s.state[4]),
            fmt_f(s.input[0]),
            fmt_f(s.input[1]),
            fmt_f(s.objective),
            fmt_f(s.kkt_residual),
            s.sqp_iterations.to_string(),
            s.qp_iterations.to_string(),
            format!("{:?}", s.status),
        ];
        row.extend(s.fixed_params.iter().map(|p| fmt_f(*p)));
        write_row(&mut traj, &row)?;
    }
    csv_done(traj)?;

    let mut clr = csv_writer(&dir.join("clearances.csv"))?;
    let mut header = vec!["step".to_string(), "time".to_string()];
    header.extend((0..n_obstacles).map(|m| format!("clearance_{m}")));
    header.extend((0..n_obstacles).map(|m| format!("overlap_{m}")));
    write_row(&mut clr, &header)?;
    for s in &log.steps {
        let mut row = vec![s.step.to_string(), fmt_f(s.time)];
        row.extend(s.clearances.iter().map(|c| fmt_f(*c)));
        row.extend(s.overlaps.iter().map(|o| u8::from(*o).to_string()));
        write_row(&mut clr, &row)?;
    }
    csv_done(clr)
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Quantiles {
    pub min: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub max: f64,
}

impl Quantiles {
    pub fn of(values: &[f64]) -> Self {
        Self {
            min: quantile(values, 0.0),
            p50: quantile(values, 0.5),
            p90: quantile(values, 0.9),
            p99: quantile(values, 0.99),
            max: quantile(values, 1.0),
        }
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct CostStats {
    pub mean: f64,
    pub median: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct SimulationSummary {
    pub schema_version: u32,
    pub scenario: String,
    pub mode: ConstraintKind,
    pub steps: usize,
    pub goal_reached: bool,
    pub any_overlap: bool,
    pub final_state: [f64; 5],
    pub min_clearances: Vec<f64>,
    /// Smallest clearance over all obstacles, absent without obstacles.
    pub min_clearance: Option<f64>,
    pub cost: CostStats,
    pub converged_steps: usize,
    pub sqp_iterations: Quantiles,
    /// Frozen parameters per step, present for the fixed formulations.
    pub fixed_params: Option<Vec<Vec<f64>>>,
}

/// Contents of `timing.json` written by `simulate`.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct SimulationTiming {
    pub schema_version: u32,
    /// Solve wall time per step in seconds.
    pub solve_seconds: Quantiles,
}

impl SimulationSummary {
    fn new(name: &str, log: &RunLog) -> Self {
        let objectives: Vec<f64> = log.steps.iter().map(|s| s.objective).collect();
        let mins = log.min_clearances();
        let final_state = log.steps.last().map_or_else(|| *log.initial_state.as_ref(), |s| *s.state.as_ref());
        let iters: Vec<f64> = log.steps.iter().map(|s| s.sqp_iterations as f64).collect();
        Self {
            schema_version: SCHEMA_VERSION,
            scenario: name.to_string(),
            mode: log.mode,
            steps: log.steps.len(),
            goal_reached: log.goal_reached,
            any_overlap: log.any_overlap(),
            final_state,
            min_clearance: mins.iter().copied().reduce(f64::min),
            min_clearances: mins,
            cost: CostStats {
                mean: objectives.iter().sum::<f64>() / objectives.len().max(1) as f64,
                median: median(&objectives),
                max: quantile(&objectives, 1.0),
            },
            converged_steps: log
                .steps
                .iter()
                .filter(|s| s.status == crate::sqp::SqpStatus::Converged)
                .count(),
            sqp_iterations: Quantiles::of(&iters),
            fixed_params: log
                .mode
                .is_fixed()
                .then(|| log.steps.iter().map(|s| s.fixed_params.clone()).collect()),
        }
    }
}

/// Outcome of `simulate`; files are already written when this is returned.
#[derive(Debug, Clone)]
pub struct SimulateOutcome {
    pub summary: SimulationSummary,
    pub timing: SimulationTiming,
    pub log: RunLog,
    pub files: Vec<PathBuf>,
}

impl SimulateOutcome {
    /// Success means the goal was reached without any overlap.
    pub fn exit_code(&self) -> ExitCode {
        if self.summary.goal_reached && !self.summary.any_overlap {
            ExitCode::Success
        } else {
            ExitCode::RuntimeFailure
        }
    }
}

/// Runs the closed loop and writes `trajectory.csv`, `clearances.csv`,
/// `summary.json` and `timing.json` into `out_dir`.
pub fn cmd_simulate(path: &Path, out_dir: &Path, options: &RunOptions) -> CommandResult<SimulateOutcome> {
    let mut loaded = load(path)?;
    options.apply(&mut loaded)?;
    ensure_dir(out_dir)?;
    let log = runtime(run_closed_loop(&loaded.scenario, &loaded.sim))?;
    let n_m = loaded.scenario.obstacles.len();
    write_run_csvs(&log, n_m, out_dir)?;
    let summary = SimulationSummary::new(&loaded.name, &log);
    write_json(&out_dir.join("summary.json"), &summary)?;
    let times: Vec<f64> = log.steps.iter().map(|s| s.solve_seconds).collect();
    let timing = SimulationTiming {
        schema_version: SCHEMA_VERSION,
        solve_seconds: Quantiles::of(&times),
    };
    write_json(&out_dir.join("timing.json"), &timing)?;
    Ok(SimulateOutcome {
        summary,
        timing,
        log,
        files: ["trajectory.csv", "clearances.csv", "summary.json", "timing.json"]
            .iter()
            .map(|f| out_dir.join(f))
            .collect(),
    })
}

/// Thresholds of the exceedance curve: ten per decade from 1e-8 to 1.
pub fn exceedance_thresholds() -> Vec<f64> {
    (0..=80).map(|i| 10f64.powf(-8.0 + i as f64 / 10.0)).collect()
}

/// Fraction of values strictly above `threshold`.
pub fn exceedance(values: &[f64], threshold: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().filter(|v| **v > threshold).count() as f64 / values.len() as f64
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct RelativeCostStats {
    pub median: f64,
    pub p90: f64,
    pub max: f64,
}

impl RelativeCostStats {
    fn of(values: &[f64]) -> Self {
        Self {
            median: median(values),
            p90: quantile(values, 0.9),
            max: quantile(values, 1.0),
        }
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ModeTiming {
    pub mode: ConstraintKind,
    pub seconds: Quantiles,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ComparisonSummary {
    pub schema_version: u32,
    pub scenario: String,
    pub records: usize,
    pub valid_records: usize,
    pub goal_reached: bool,
    /// `(fixed-γ̂ − free-γ) / free-γ` over valid records.
    pub fixed_gamma: RelativeCostStats,
    /// `(fixed-η̂ − free-η) / free-η` over valid records.
    pub fixed_eta: RelativeCostStats,
    /// `(fixed-η̂ − free-γ) / free-γ` over valid records.
    pub fixed_eta_vs_free_gamma: RelativeCostStats,
    /// Smallest `restricted − free-γ` objective difference over valid records.
    pub min_objective_gap: f64,
}

/// Contents of `timing.json` written by `compare`.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ComparisonTiming {
    pub schema_version: u32,
    pub timed_max_sqp_iters: usize,
    pub repeats: usize,
    /// Early-terminated solve times per mode.
    pub modes: Vec<ModeTiming>,
}

/// Outcome of `compare`; files are already written when this is returned.
#[derive(Debug, Clone)]
pub struct CompareOutcome {
    pub summary: ComparisonSummary,
    pub timing: ComparisonTiming,
    pub run: ComparisonRun,
    pub files: Vec<PathBuf>,
}

/// Settings of `compare` beyond the run options.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompareOptions {
    pub run: RunOptions,
    pub timed_sqp_iters: usize,
    pub timing_repeats: usize,
}

impl Default for CompareOptions {
    fn default() -> Self {
        Self {
            run: RunOptions::default(),
            timed_sqp_iters: 2,
            timing_repeats: 3,
        }
    }
}

/// Runs the four-way comparison and writes `comparison.csv`,
/// `exceedance.csv`, `comparison_summary.json` and `timing.json` into
/// `out_dir`.
pub fn cmd_compare(path: &Path, out_dir: &Path, options: &CompareOptions) -> CommandResult<CompareOutcome> {
    let mut loaded = load(path)?;
    options.run.apply(&mut loaded)?;
    if options.timed_sqp_iters == 0 || options.timing_repeats == 0 {
        return Err(CommandError::invalid(Error::InvalidArgument(
            "timed iterations and repeats must be positive".into(),
        )));
    }
    ensure_dir(out_dir)?;
    let settings = CompareSettings {
        converged: loaded.sim.solver,
        timed: SqpSettings {
            max_sqp_iters: options.timed_sqp_iters,
            ..loaded.sim.solver
        },
        timing_repeats: options.timing_repeats,
    };
    let run = runtime(compare_formulations(&loaded.scenario, &loaded.sim, &settings))?;

    let mut w = csv_writer(&out_dir.join("comparison.csv"))?;
    let mut header = vec!["step".to_string()];
    header.extend(COMPARISON_ORDER.iter().map(|k| format!("objective_{}", k.name())));
    header.extend(COMPARISON_ORDER.iter().map(|k| format!("converged_{}", k.name())));
    header.extend(
        ["rel_fixed_gamma", "rel_fixed_eta", "rel_fixed_eta_vs_free_gamma"]
            .iter()
            .map(|s| s.to_string()),
    );
    write_row(&mut w, &header)?;
    for r in &run.records {
        let mut row = vec![r.step.to_string()];
        row.extend(r.objectives.iter().map(|o| fmt_f(*o)));
        row.extend(r.converged.iter().map(|c| u8::from(*c).to_string()));
        row.extend([r.rel_fixed_gamma, r.rel_fixed_eta, r.rel_fixed_eta_vs_gamma].map(fmt_f));
        write_row(&mut w, &row)?;
    }
    csv_done(w)?;

    let valid: Vec<_> = run.records.iter().filter(|r| r.valid()).collect();
    let rel_g: Vec<f64> = valid.iter().map(|r| r.rel_fixed_gamma).collect();
    let rel_e: Vec<f64> = valid.iter().map(|r| r.rel_fixed_eta).collect();
    let rel_eg: Vec<f64> = valid.iter().map(|r| r.rel_fixed_eta_vs_gamma).collect();

    let mut w = csv_writer(&out_dir.join("exceedance.csv"))?;
    write_row(
        &mut w,
        &["threshold", "fixed_gamma", "fixed_eta", "fixed_eta_vs_free_gamma"].map(String::from),
    )?;
    for t in exceedance_thresholds() {
        write_row(
            &mut w,
            &[t, exceedance(&rel_g, t), exceedance(&rel_e, t), exceedance(&rel_eg, t)].map(fmt_f),
        )?;
    }
    csv_done(w)?;

    let summary = ComparisonSummary {
        schema_version: SCHEMA_VERSION,
        scenario: loaded.name.clone(),
        records: run.records.len(),
        valid_records: valid.len(),
        goal_reached: run.log.goal_reached,
        fixed_gamma: RelativeCostStats::of(&rel_g),
        fixed_eta: RelativeCostStats::of(&rel_e),
        fixed_eta_vs_free_gamma: RelativeCostStats::of(&rel_eg),
        min_objective_gap: valid
            .iter()
            .flat_map(|r| (1..4).map(move |i| r.objectives[i] - r.objectives[0]))
            .fold(f64::INFINITY, f64::min),
    };
    write_json(&out_dir.join("comparison_summary.json"), &summary)?;
    let timing = ComparisonTiming {
        schema_version: SCHEMA_VERSION,
        timed_max_sqp_iters: options.timed_sqp_iters,
        repeats: options.timing_repeats,
        modes: COMPARISON_ORDER
            .iter()
            .enumerate()
            .map(|(i, &mode)| ModeTiming {
                mode,
                seconds: Quantiles::of(&run.records.iter().map(|r| r.timed_seconds[i]).collect::<Vec<_>>()),
            })
            .collect(),
    };
    write_json(&out_dir.join("timing.json"), &timing)?;
    Ok(CompareOutcome {
        summary,
        timing,
        run,
        files: ["comparison.csv", "exceedance.csv", "comparison_summary.json", "timing.json"]
            .iter()
            .map(|f| out_dir.join(f))
            .collect(),
    })
}

/// Outcome of `plan`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutcome {
    pub path_length: f64,
    pub waypoints: usize,
    pub files: Vec<PathBuf>,
}

/// Runs the reference planner from the start pose and writes the global path
/// (`path.csv`) and the first horizon reference (`reference.csv`).
pub fn cmd_plan(path: &Path, out_dir: &Path) -> CommandResult<PlanOutcome> {
    let loaded = load(path)?;
    let sc = &loaded.scenario;
    let poly = runtime(global_path(sc))?;
    let mut builder = ReferenceBuilder::new(poly.clone(), sc, loaded.sim.reference);
    let reference = runtime(builder.build(&sc.start.to_vector()))?;
    ensure_dir(out_dir)?;

    let mut w = csv_writer(&out_dir.join("path.csv"))?;
    write_row(&mut w, &["index", "x", "y", "arclength"].map(String::from))?;
    for (i, (p, s)) in poly.waypoints.iter().zip(poly.cumulative()).enumerate() {
        write_row(&mut w, &[i.to_string(), fmt_f(p[0]), fmt_f(p[1]), fmt_f(s)])?;
    }
    csv_done(w)?;

    let mut w = csv_writer(&out_dir.join("reference.csv"))?;
    write_row(
        &mut w,
        &["k", "time", "x", "y", "theta", "v", "omega", "a", "alpha"].map(String::from),
    )?;
    for (k, (x, t)) in reference.states.iter().zip(&reference.timestamps).enumerate() {
        let (a, alpha) = reference.inputs.get(k).map_or((0.0, 0.0), |u| (u[0], u[1]));
        let mut row = vec![k.to_string(), fmt_f(*t)];
        row.extend(x.iter().map(|v| fmt_f(*v)));
        row.extend([fmt_f(a), fmt_f(alpha)]);
        write_row(&mut w, &row)?;
    }
    csv_done(w)?;
    Ok(PlanOutcome {
        path_length: poly.length(),
        waypoints: poly.waypoints.len(),
        files: vec![out_dir.join("path.csv"), out_dir.join("reference.csv")],
    })
}
