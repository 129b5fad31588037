//! Discrete-time optimal control problem as a stagewise NLP.
//!
//! Stage `k` holds `w_k = [x_k; u_k; q_k; s_k]`: the state, the input (absent
//! on the last stage), the collision parameters of the formulation (one `γ`
//! or two `η` entries per obstacle for the free variants, none otherwise) and
//! one non-negative slack per collision row carrying an L1 penalty.

use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::collision::{
    fixed_eta_hat_2d, fixed_gamma_hat, hyperplane_jacobian, minkowski_jacobian, robot_gamma_bounds,
    ConstraintKind, ConstraintMode, ObstacleSet,
};
use crate::dynamics::{rk4_step_with_sensitivities, InputVec, RobotShape, RobotState, StateVec, NU, NX};
use crate::error::{Error, Result};
use crate::geometry::GammaInterval;
use crate::planner::OccupancyGrid;
use crate::sqp::{CurvatureBlock, StageEval, StagewiseNlp};

/// Default L1 weight on collision slacks.
pub const SLACK_PENALTY: f64 = 1e4;
/// Numeric box applied to every `γ` on top of the geometric bounds.
pub const GAMMA_ABS_BOUND: f64 = 20.0;
/// Lower bound on `ηᵀη` for the free separating direction.
pub const ETA_MIN_NORM_SQ: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Limits {
    pub v_min: f64,
    pub v_max: f64,
    pub omega_min: f64,
    pub omega_max: f64,
    pub a_min: f64,
    pub a_max: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            v_min: -0.5,
            v_max: 1.0,
            omega_min: -1.5,
            omega_max: 1.5,
            a_min: -1.0,
            a_max: 1.0,
            alpha_min: -2.0,
            alpha_max: 2.0,
        }
    }
}

impl Limits {
    pub fn validate(&self) -> Result<()> {
        for (name, lo, hi) in [
            ("v", self.v_min, self.v_max),
            ("omega", self.omega_min, self.omega_max),
            ("a", self.a_min, self.a_max),
            ("alpha", self.alpha_min, self.alpha_max),
        ] {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::invalid(format!("limits.{name}: lower bound {lo} must be below upper bound {hi}")));
            }
        }
        Ok(())
    }
}

/// Diagonal tracking weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Weights {
    pub state: [f64; NX],
    pub input: [f64; NU],
    pub terminal: [f64; NX],
}

impl Default for Weights {
    fn default() -> Self {
        let state = [10.0, 10.0, 1.0, 1.0, 1.0];
        Self {
            state,
            input: [1.0, 1.0],
            terminal: state.map(|q| 10.0 * q),
        }
    }
}

impl Weights {
    pub fn validate(&self) -> Result<()> {
        let all = self.state.iter().chain(&self.input).chain(&self.terminal);
        if all.clone().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("weights must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Horizon {
    /// Horizon length in seconds.
    #[serde(rename = "T")]
    pub duration: f64,
    /// Number of shooting intervals.
    #[serde(rename = "N")]
    pub steps: usize,
}

impl Horizon {
    pub fn dt(&self) -> f64 {
        self.duration / self.steps as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return Err(Error::invalid(format!("horizon.T must be positive, got {}", self.duration)));
        }
        if self.steps == 0 {
            return Err(Error::invalid("horizon.N must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub robot: RobotShape,
    pub obstacles: ObstacleSet,
    pub horizon: Horizon,
    pub limits: Limits,
    pub weights: Weights,
    /// `(ε_v, ε_ω)` of the terminal stationarity constraint.
    pub terminal_eps: (f64, f64),
    pub mode: ConstraintMode,
    pub grid: Option<OccupancyGrid>,
    pub start: RobotState,
    pub goal: RobotState,
    pub slack_penalty: f64,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.horizon.validate()?;
        self.limits.validate()?;
        self.weights.validate()?;
        let (ev, ew) = self.terminal_eps;
        if !(ev > 0.0 && ew > 0.0) {
            return Err(Error::invalid(format!("terminal tolerances must be positive, got ({ev}, {ew})")));
        }
        if !(self.slack_penalty > 0.0) || !self.slack_penalty.is_finite() {
            return Err(Error::invalid("slack penalty must be positive"));
        }
        if !self.start.is_finite() || !self.goal.is_finite() {
            return Err(Error::invalid("start and goal must be finite"));
        }
        Ok(())
    }

    pub fn with_kind(&self, kind: ConstraintKind) -> Self {
        let mut s = self.clone();
        s.mode.kind = kind;
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    pub states: Vec<StateVec>,
    pub inputs: Vec<InputVec>,
    pub timestamps: Vec<f64>,
}

impl ReferenceTrajectory {
    pub fn new(states: Vec<StateVec>, inputs: Vec<InputVec>, timestamps: Vec<f64>) -> Result<Self> {
        if states.is_empty() || inputs.len() + 1 != states.len() || timestamps.len() != states.len() {
            return Err(Error::DimensionMismatch(format!(
                "reference has {} states, {} inputs and {} timestamps",
                states.len(),
                inputs.len(),
                timestamps.len()
            )));
        }
        Ok(Self {
            states,
            inputs,
            timestamps,
        })
    }

    /// Resting at `state` (with zero velocities) for `n` intervals.
    pub fn stationary(state: &RobotState, n: usize, dt: f64) -> Self {
        let x = StateVec::new(state.px, state.py, state.theta, 0.0, 0.0);
        Self {
            states: vec![x; n + 1],
            inputs: vec![InputVec::zeros(); n],
            timestamps: (0..=n).map(|k| k as f64 * dt).collect(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.inputs.len()
    }
}

/// Initial iterate for the NLP.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub states: Vec<StateVec>,
    pub inputs: Vec<InputVec>,
    /// Collision parameters per stage in the layout of the formulation that
    /// produced them; empty vectors when none are available.
    pub params: Vec<DVector<f64>>,
}

impl WarmStart {
    /// States from the reference, zero inputs and no collision parameters.
    pub fn from_reference(reference: &ReferenceTrajectory) -> Self {
        Self {
            states: reference.states.clone(),
            inputs: vec![InputVec::zeros(); reference.inputs.len()],
            params: vec![DVector::zeros(0); reference.states.len()],
        }
    }
}

/// Moves every stage one step forward and duplicates the last stage.
pub fn shift_warm_start(previous: &WarmStart) -> WarmStart {
    fn shift<T: Clone>(v: &[T]) -> Vec<T> {
        if v.is_empty() {
            return Vec::new();
        }
        let mut out: Vec<T> = v[1..].to_vec();
        out.push(v[v.len() - 1].clone());
        out
    }
    WarmStart {
        states: shift(&previous.states),
        inputs: shift(&previous.inputs),
        params: shift(&previous.params),
    }
}

/// Offsets of the parts of one stage block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageLayout {
    pub nu: usize,
    pub n_params: usize,
    pub n_slacks: usize,
}

impl StageLayout {
    pub fn input(&self) -> usize {
        NX
    }
    pub fn params(&self) -> usize {
        NX + self.nu
    }
    pub fn slacks(&self) -> usize {
        NX + self.nu + self.n_params
    }
    pub fn dim(&self) -> usize {
        NX + self.nu + self.n_params + self.n_slacks
    }
}

#[derive(Debug, Clone, PartialEq)]
enum FixedParams {
    None,
    Gamma(Vec<Vec<f64>>),
    Eta(Vec<Vec<Vector2<f64>>>),
}

/// Assembled OCP, ready to be solved.
#[derive(Debug, Clone, PartialEq)]
pub struct OcpProblem {
    shape: RobotShape,
    obstacles: ObstacleSet,
    limits: Limits,
    weights: Weights,
    terminal_eps: (f64, f64),
    mode: ConstraintMode,
    slack_penalty: f64,
    dt: f64,
    n: usize,
    reference: ReferenceTrajectory,
    x0: StateVec,
    gamma_boxes: Vec<GammaInterval>,
    fixed: FixedParams,
    guess: Vec<DVector<f64>>,
}

/// Builds the OCP for the current state `x0`. Without a warm start the
/// iterate is taken from the reference with zero inputs. Missing `γ` values
/// start at zero (clamped into their box) and missing `η` values at the
/// closest-point direction of the guess state.
pub fn assemble(
    scenario: &Scenario,
    reference: &ReferenceTrajectory,
    x0: &StateVec,
    warm_start: Option<&WarmStart>,
) -> Result<OcpProblem> {
    scenario.validate()?;
    let n = scenario.horizon.steps;
    if reference.states.len() != n + 1 || reference.inputs.len() != n {
        return Err(Error::invalid(format!(
            "reference covers {} intervals, horizon has {n}",
            reference.inputs.len()
        )));
    }
    if !x0.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("initial state must be finite"));
    }
    let default_ws;
    let ws = match warm_start {
        Some(ws) => {
            if ws.states.len() != n + 1 || ws.inputs.len() != n {
                return Err(Error::invalid(format!(
                    "warm start covers {} states and {} inputs, expected {} and {n}",
                    ws.states.len(),
                    ws.inputs.len(),
                    n + 1
                )));
            }
            ws
        }
        None => {
            default_ws = WarmStart::from_reference(reference);
            &default_ws
        }
    };
    let gamma_boxes: Vec<GammaInterval> = scenario
        .obstacles
        .iter()
        .map(|o| robot_gamma_bounds(&scenario.robot, o).intersect(-GAMMA_ABS_BOUND, GAMMA_ABS_BOUND))
        .collect();
    let mut problem = OcpProblem {
        shape: scenario.robot,
        obstacles: scenario.obstacles.clone(),
        limits: scenario.limits,
        weights: scenario.weights,
        terminal_eps: scenario.terminal_eps,
        mode: scenario.mode,
        slack_penalty: scenario.slack_penalty,
        dt: scenario.horizon.dt(),
        n,
        reference: reference.clone(),
        x0: *x0,
        gamma_boxes,
        fixed: FixedParams::None,
        guess: Vec::new(),
    };
    let mut guess = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let lay = problem.layout(k);
        let mut w = DVector::zeros(lay.dim());
        let x = if k == 0 { *x0 } else { ws.states[k] };
        w.rows_mut(0, NX).copy_from(&x);
        if k < n {
            w.rows_mut(NX, NU).copy_from(&ws.inputs[k]);
        }
        let state = RobotState::from_vector(&x);
        let given = ws.params.get(k).filter(|p| p.len() == lay.n_params);
        match scenario.mode.kind {
            ConstraintKind::MinkowskiFreeGamma => {
                for (m, bx) in problem.gamma_boxes.iter().enumerate() {
                    let g = given.map_or(0.0, |p| p[m]);
                    w[lay.params() + m] = bx.clamp(g);
                }
            }
            ConstraintKind::HyperplaneFreeEta => {
                for (m, obs) in problem.obstacles.iter().enumerate() {
                    let eta = match given {
                        Some(p) => Vector2::new(p[2 * m], p[2 * m + 1]),
                        None => fixed_eta_hat_2d(&state, &problem.shape, obs),
                    };
                    w[lay.params() + 2 * m] = eta[0];
                    w[lay.params() + 2 * m + 1] = eta[1];
                }
            }
            _ => {}
        }
        guess.push(w);
    }
    problem.guess = guess;
    Ok(problem)
}

impl OcpProblem {
    pub fn horizon(&self) -> usize {
        self.n
    }

    pub fn kind(&self) -> ConstraintKind {
        self.mode.kind
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn reference(&self) -> &ReferenceTrajectory {
        &self.reference
    }

    pub fn gamma_boxes(&self) -> &[GammaInterval] {
        &self.gamma_boxes
    }

    pub fn layout(&self, k: usize) -> StageLayout {
        let n_m = self.obstacles.len();
        StageLayout {
            nu: if k < self.n { NU } else { 0 },
            n_params: match self.mode.kind {
                ConstraintKind::MinkowskiFreeGamma => n_m,
                ConstraintKind::HyperplaneFreeEta => 2 * n_m,
                _ => 0,
            },
            n_slacks: n_m,
        }
    }

    /// Fixes `γ̂` or `η̂` from the guess states, one value per obstacle and stage.
    pub fn freeze_parameters(mut self, guess: &[StateVec]) -> Result<Self> {
        if !self.mode.kind.is_fixed() {
            return Err(Error::invalid(format!("mode {} has no parameters to freeze", self.mode.kind)));
        }
        if guess.len() != self.n + 1 {
            return Err(Error::invalid(format!(
                "parameter guess covers {} states, expected {}",
                guess.len(),
                self.n + 1
            )));
        }
        let states: Vec<RobotState> = guess.iter().map(RobotState::from_vector).collect();
        self.fixed = match self.mode.kind {
            ConstraintKind::MinkowskiFixedGamma => FixedParams::Gamma(
                states
                    .iter()
                    .map(|s| {
                        self.obstacles
                            .iter()
                            .zip(&self.gamma_boxes)
                            .map(|(o, bx)| bx.clamp(fixed_gamma_hat(s, &self.shape, o)))
                            .collect()
                    })
                    .collect(),
            ),
            _ => FixedParams::Eta(
                states
                    .iter()
                    .map(|s| self.obstacles.iter().map(|o| fixed_eta_hat_2d(s, &self.shape, o)).collect())
                    .collect(),
            ),
        };
        Ok(self)
    }

    /// Frozen `γ̂` per stage and obstacle.
    pub fn fixed_gammas(&self) -> Option<&[Vec<f64>]> {
        match &self.fixed {
            FixedParams::Gamma(g) => Some(g),
            _ => None,
        }
    }

    /// Frozen `η̂` per stage and obstacle.
    pub fn fixed_etas(&self) -> Option<&[Vec<Vector2<f64>>]> {
        match &self.fixed {
            FixedParams::Eta(e) => Some(e),
            _ => None,
        }
    }

    pub fn guess(&self) -> &[DVector<f64>] {
        &self.guess
    }

    pub fn state(&self, stages: &[DVector<f64>], k: usize) -> StateVec {
        StateVec::from_iterator(stages[k].rows(0, NX).iter().copied())
    }

    pub fn input(&self, stages: &[DVector<f64>], k: usize) -> InputVec {
        InputVec::from_iterator(stages[k].rows(NX, NU).iter().copied())
    }

    pub fn params(&self, stages: &[DVector<f64>], k: usize) -> DVector<f64> {
        let lay = self.layout(k);
        stages[k].rows(lay.params(), lay.n_params).into_owned()
    }

    pub fn max_slack(&self, stages: &[DVector<f64>]) -> f64 {
        (0..=self.n)
            .map(|k| {
                let lay = self.layout(k);
                stages[k].rows(lay.slacks(), lay.n_slacks).iter().fold(0.0, |a: f64, s| a.max(*s))
            })
            .fold(0.0, f64::max)
    }

    /// Tracking cost without the slack penalty.
    pub fn tracking_cost(&self, stages: &[DVector<f64>]) -> f64 {
        (0..=self.n)
            .map(|k| {
                let (c, _) = self.tracking_terms(&stages[k], k);
                c
            })
            .sum()
    }

    pub fn warm_start_from(&self, stages: &[DVector<f64>]) -> WarmStart {
        WarmStart {
            states: (0..=self.n).map(|k| self.state(stages, k)).collect(),
            inputs: (0..self.n).map(|k| self.input(stages, k)).collect(),
            params: (0..=self.n).map(|k| self.params(stages, k)).collect(),
        }
    }

    fn tracking_terms(&self, w: &DVector<f64>, k: usize) -> (f64, DVector<f64>) {
        let lay = self.layout(k);
        let mut grad = DVector::zeros(lay.dim());
        let mut cost = 0.0;
        let q = if k == self.n { &self.weights.terminal } else { &self.weights.state };
        let xr = &self.reference.states[k];
        for i in 0..NX {
            let e = w[i] - xr[i];
            cost += q[i] * e * e;
            grad[i] = 2.0 * q[i] * e;
        }
        if k < self.n {
            let ur = &self.reference.inputs[k];
            for i in 0..NU {
                let e = w[NX + i] - ur[i];
                cost += self.weights.input[i] * e * e;
                grad[NX + i] = 2.0 * self.weights.input[i] * e;
            }
        }
        (cost, grad)
    }

    fn evaluate_stage(&self, w: &DVector<f64>, k: usize) -> StageEval {
        let lay = self.layout(k);
        let dim = lay.dim();
        let (mut cost, mut gradient) = self.tracking_terms(w, k);
        let mut hessian = DMatrix::zeros(dim, dim);
        let q = if k == self.n { &self.weights.terminal } else { &self.weights.state };
        for i in 0..NX {
            hessian[(i, i)] = 2.0 * q[i];
        }
        if k < self.n {
            for i in 0..NU {
                hessian[(NX + i, NX + i)] = 2.0 * self.weights.input[i];
            }
        }
        for j in 0..lay.n_slacks {
            cost += self.slack_penalty * w[lay.slacks() + j];
            gradient[lay.slacks() + j] = self.slack_penalty;
        }

        let x = StateVec::from_iterator(w.rows(0, NX).iter().copied());
        let dynamics = (k < self.n).then(|| {
            let u = InputVec::from_iterator(w.rows(NX, NU).iter().copied());
            let sens = rk4_step_with_sensitivities(&x, &u, self.dt);
            let mut jac = DMatrix::zeros(NX, dim);
            jac.view_mut((0, 0), (NX, NX)).copy_from(&sens.d_state);
            jac.view_mut((0, NX), (NX, NU)).copy_from(&sens.d_input);
            (jac, DVector::from_iterator(NX, sens.next.iter().copied()))
        });

        let mut rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
        let mut curvature = Vec::new();
        let lim = &self.limits;
        if k < self.n {
            let (a, al) = (w[NX], w[NX + 1]);
            rows.push((vec![(NX, 1.0)], a - lim.a_max));
            rows.push((vec![(NX, -1.0)], lim.a_min - a));
            rows.push((vec![(NX + 1, 1.0)], al - lim.alpha_max));
            rows.push((vec![(NX + 1, -1.0)], lim.alpha_min - al));
        }
        if k >= 1 {
            let (v, om) = (x[3], x[4]);
            let (v_lo, v_hi, w_lo, w_hi) = if k == self.n {
                let (ev, ew) = self.terminal_eps;
                (-ev, ev, -ew, ew)
            } else {
                (lim.v_min, lim.v_max, lim.omega_min, lim.omega_max)
            };
            rows.push((vec![(3, 1.0)], v - v_hi));
            rows.push((vec![(3, -1.0)], v_lo - v));
            rows.push((vec![(4, 1.0)], om - w_hi));
            rows.push((vec![(4, -1.0)], w_lo - om));
        }
        match self.mode.kind {
            ConstraintKind::MinkowskiFreeGamma => {
                for (m, bx) in self.gamma_boxes.iter().enumerate() {
                    let i = lay.params() + m;
                    rows.push((vec![(i, 1.0)], w[i] - bx.upper));
                    rows.push((vec![(i, -1.0)], bx.lower - w[i]));
                }
            }
            ConstraintKind::HyperplaneFreeEta => {
                for m in 0..self.obstacles.len() {
                    let i = lay.params() + 2 * m;
                    let eta = Vector2::new(w[i], w[i + 1]);
                    let nn = eta.dot(&eta);
                    for sign in [1.0, -1.0] {
                        curvature.push(CurvatureBlock {
                            row: rows.len(),
                            indices: vec![i, i + 1],
                            hessian: DMatrix::identity(2, 2) * (2.0 * sign),
                        });
                        let value = if sign > 0.0 { nn - 1.0 } else { ETA_MIN_NORM_SQ - nn };
                        rows.push((vec![(i, sign * 2.0 * eta[0]), (i + 1, sign * 2.0 * eta[1])], value));
                    }
                }
            }
            _ => {}
        }
        for j in 0..lay.n_slacks {
            rows.push((vec![(lay.slacks() + j, -1.0)], -w[lay.slacks() + j]));
        }
        let state = RobotState::from_vector(&x);
        let margin = self.mode.safety_margin;
        for (m, obs) in self.obstacles.iter().enumerate() {
            let s_idx = lay.slacks() + m;
            let slack = w[s_idx];
            match self.mode.kind {
                ConstraintKind::MinkowskiFreeGamma | ConstraintKind::MinkowskiFixedGamma => {
                    let (gamma, g_idx) = match &self.fixed {
                        FixedParams::Gamma(g) => (g[k][m], None),
                        _ if self.mode.kind == ConstraintKind::MinkowskiFreeGamma => {
                            (w[lay.params() + m], Some(lay.params() + m))
                        }
                        _ => (0.0, None),
                    };
                    let mj = minkowski_jacobian(&state, &self.shape, obs, gamma);
                    let mut coeffs = vec![(0, -mj.d_position[0]), (1, -mj.d_position[1]), (2, -mj.d_theta), (s_idx, -1.0)];
                    if let Some(gi) = g_idx {
                        coeffs.push((gi, -mj.d_gamma));
                        curvature.push(CurvatureBlock {
                            row: rows.len(),
                            indices: vec![gi],
                            hessian: DMatrix::from_element(1, 1, -mj.d2_gamma),
                        });
                    }
                    rows.push((coeffs, 1.0 + margin - mj.value - slack));
                }
                ConstraintKind::HyperplaneFreeEta | ConstraintKind::HyperplaneFixedEta => {
                    let (eta, e_idx) = match &self.fixed {
                        FixedParams::Eta(e) => (e[k][m], None),
                        _ => {
                            let i = lay.params() + 2 * m;
                            (Vector2::new(w[i], w[i + 1]), Some(i))
                        }
                    };
                    let hj = hyperplane_jacobian(&state, &self.shape, obs, &eta);
                    let mut coeffs = vec![(0, -hj.d_position[0]), (1, -hj.d_position[1]), (2, -hj.d_theta), (s_idx, -1.0)];
                    if let Some(i) = e_idx {
                        coeffs.push((i, -hj.d_eta[0]));
                        coeffs.push((i + 1, -hj.d_eta[1]));
                        curvature.push(CurvatureBlock {
                            row: rows.len(),
                            indices: vec![i, i + 1],
                            hessian: DMatrix::from_fn(2, 2, |a, b| -hj.d2_eta[(a, b)]),
                        });
                    }
                    rows.push((coeffs, margin - hj.separation - slack));
                }
            }
        }
        let mut ineq_jacobian = DMatrix::zeros(rows.len(), dim);
        let mut ineq_value = DVector::zeros(rows.len());
        for (r, (coeffs, val)) in rows.into_iter().enumerate() {
            for (c, v) in coeffs {
                ineq_jacobian[(r, c)] += v;
            }
            ineq_value[r] = val;
        }
        StageEval {
            cost,
            hessian,
            gradient,
            dynamics,
            ineq_jacobian,
            ineq_value,
            regularized: (lay.params()..lay.params() + lay.n_params).collect(),
            curvature,
        }
    }
}

impl StagewiseNlp for OcpProblem {
    fn nx(&self) -> usize {
        NX
    }

    fn initial_state(&self) -> DVector<f64> {
        DVector::from_iterator(NX, self.x0.iter().copied())
    }

    fn initial_guess(&self) -> Vec<DVector<f64>> {
        self.guess.clone()
    }

    fn evaluate(&self, w: &[DVector<f64>]) -> Result<Vec<StageEval>> {
        if w.len() != self.n + 1 {
            return Err(Error::DimensionMismatch(format!("iterate has {} stages, expected {}", w.len(), self.n + 1)));
        }
        if self.mode.kind.is_fixed() && self.fixed == FixedParams::None {
            return Err(Error::invalid("fixed-parameter mode used before freezing its parameters"));
        }
        (0..=self.n)
            .map(|k| {
                if w[k].len() != self.layout(k).dim() {
                    return Err(Error::DimensionMismatch(format!("stage {k} block has the wrong size")));
                }
                Ok(self.evaluate_stage(&w[k], k))
            })
            .collect()
    }
}
