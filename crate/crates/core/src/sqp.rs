//! Gauss-Newton SQP with full steps over a stagewise NLP.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::symmetric_eigen;
use crate::qp::{qp_solve, QpSettings, QpStage, QpStatus, StageQp};

/// Linearisation of one stage of the NLP at the current iterate.
///
/// Inequalities are written `g(w_k) ≤ 0`; the dynamics map `w_k` to the next
/// state through `x_{k+1} = f(w_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StageEval {
    pub cost: f64,
    /// Gauss-Newton Hessian of the stage cost.
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    /// `(∂f/∂w_k, f(w_k))`; `None` on the last stage.
    pub dynamics: Option<(DMatrix<f64>, DVector<f64>)>,
    pub ineq_jacobian: DMatrix<f64>,
    pub ineq_value: DVector<f64>,
    /// Block indices whose Hessian diagonal receives the regularisation.
    pub regularized: Vec<usize>,
    /// Curvature of selected inequality rows, added to the Hessian weighted
    /// by the row multipliers when enabled in the settings.
    pub curvature: Vec<CurvatureBlock>,
}

/// Hessian of inequality row `row` with respect to the variables `indices`.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvatureBlock {
    pub row: usize,
    pub indices: Vec<usize>,
    pub hessian: DMatrix<f64>,
}

/// An NLP whose variables split into stage blocks `w_k = [x_k; q_k]`, with
/// `x_0` pinned to a given state.
pub trait StagewiseNlp {
    fn nx(&self) -> usize;
    fn initial_state(&self) -> DVector<f64>;
    fn initial_guess(&self) -> Vec<DVector<f64>>;
    fn evaluate(&self, w: &[DVector<f64>]) -> Result<Vec<StageEval>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SqpSettings {
    pub max_sqp_iters: usize,
    pub kkt_tol: f64,
    pub gamma_block_reg: f64,
    pub qp_max_iters: usize,
    pub qp_tol: f64,
    /// Add the multiplier-weighted curvature of the collision rows with
    /// respect to `γ`/`η`, clipped to be positive semidefinite, on top of the
    /// regularisation.
    pub constraint_curvature: bool,
}

impl Default for SqpSettings {
    fn default() -> Self {
        Self {
            max_sqp_iters: 100,
            kkt_tol: 1e-7,
            gamma_block_reg: 1e-4,
            qp_max_iters: 100,
            qp_tol: 1e-9,
            constraint_curvature: true,
        }
    }
}

impl SqpSettings {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_sqp_iters > 0
            && self.qp_max_iters > 0
            && self.kkt_tol >= 1e-12
            && self.kkt_tol.is_finite()
            && self.gamma_block_reg > 0.0
            && self.gamma_block_reg.is_finite()
            && self.qp_tol > 0.0
            && self.qp_tol.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid SQP settings: {self:?}")))
        }
    }

    /// Early-termination variant with a fixed number of SQP iterations.
    pub fn real_time(iters: usize) -> Self {
        Self {
            max_sqp_iters: iters,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SqpStatus {
    Converged,
    IterLimit,
    QpFailure,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SqpResult {
    pub stages: Vec<DVector<f64>>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub iterations: usize,
    pub qp_iterations: usize,
    pub status: SqpStatus,
    pub eq_duals: Vec<DVector<f64>>,
    pub ineq_duals: Vec<DVector<f64>>,
    /// Diagnostic text when the status is [`SqpStatus::QpFailure`].
    pub failure: Option<String>,
}

/// Adds `reg` to the diagonal entries listed per block; other entries are
/// left untouched.
pub fn regularize_hessian(
    mut blocks: Vec<DMatrix<f64>>,
    indices: &[Vec<usize>],
    reg: f64,
) -> Vec<DMatrix<f64>> {
    for (h, idx) in blocks.iter_mut().zip(indices) {
        for &i in idx {
            h[(i, i)] += reg;
        }
    }
    blocks
}

/// Adds `Σ λ_row · hessian_row` per variable group, with negative
/// eigenvalues of each group sum clipped to zero.
fn add_constraint_curvature(h: &mut DMatrix<f64>, blocks: &[CurvatureBlock], lam: &DVector<f64>) {
    let mut groups: Vec<(&[usize], DMatrix<f64>)> = Vec::new();
    for b in blocks {
        let weighted = &b.hessian * lam[b.row].max(0.0);
        match groups.iter_mut().find(|(idx, _)| *idx == b.indices.as_slice()) {
            Some((_, acc)) => *acc += weighted,
            None => groups.push((&b.indices, weighted)),
        }
    }
    for (idx, m) in groups {
        let (vals, vecs) = symmetric_eigen(&m);
        let clipped = vals.map(|v| v.max(0.0));
        let psd = &vecs * DMatrix::from_diagonal(&clipped) * vecs.transpose();
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                h[(i, j)] += psd[(a, b)];
            }
        }
    }
}

/// Infinity norm of the KKT conditions at `w` for multipliers `(ν, λ)`:
/// stationarity without the pinned `x_0`, dynamics defects, the pinning
/// defect, inequality violation and complementarity.
pub fn kkt_residual(
    evals: &[StageEval],
    w: &[DVector<f64>],
    x0: &DVector<f64>,
    nu: &[DVector<f64>],
    lam: &[DVector<f64>],
) -> f64 {
    let nx = x0.len();
    let mut r = (w[0].rows(0, nx) - x0).amax();
    for (k, ev) in evals.iter().enumerate() {
        let mut st = ev.gradient.clone();
        if ev.ineq_value.len() > 0 {
            st += ev.ineq_jacobian.transpose() * &lam[k];
        }
        if let Some((j, f)) = &ev.dynamics {
            st += j.transpose() * &nu[k];
            r = r.max((f - w[k + 1].rows(0, nx)).amax());
        }
        if k >= 1 {
            let mut head = st.rows_mut(0, nx);
            head -= &nu[k - 1];
        } else {
            st.rows_mut(0, nx).fill(0.0);
        }
        r = r.max(st.amax());
        for (g, l) in ev.ineq_value.iter().zip(lam[k].iter()) {
            r = r.max(g.max(0.0)).max((g * l).abs()).max((-l).max(0.0));
        }
    }
    r
}

/// Runs SQP iterations from the NLP's initial guess.
///
/// Each iteration linearises the NLP, regularises the flagged Hessian
/// entries, solves the QP for a step and applies it in full. The loop stops
/// when the KKT residual at the current iterate is at most `kkt_tol` or after
/// `max_sqp_iters` steps.
pub fn solve<P: StagewiseNlp + ?Sized>(nlp: &P, settings: &SqpSettings) -> Result<SqpResult> {
    settings.validate()?;
    let nx = nlp.nx();
    let x0 = nlp.initial_state();
    let mut w = nlp.initial_guess();
    if w.is_empty() || x0.len() != nx {
        return Err(Error::DimensionMismatch("initial guess does not match the NLP".into()));
    }
    let n_stages = w.len();
    let mut nu: Vec<DVector<f64>> = vec![DVector::zeros(nx); n_stages - 1];
    let mut lam: Vec<DVector<f64>> = Vec::new();
    let mut qp_iterations = 0;
    let qp_settings = QpSettings {
        max_iters: settings.qp_max_iters,
        tol: settings.qp_tol,
    };

    let mut iter = 0;
    loop {
        let evals = nlp.evaluate(&w)?;
        if evals.len() != n_stages {
            return Err(Error::DimensionMismatch("evaluation returned the wrong stage count".into()));
        }
        if lam.is_empty() {
            lam = evals.iter().map(|e| DVector::zeros(e.ineq_value.len())).collect();
        }
        let objective: f64 = evals.iter().map(|e| e.cost).sum();
        let kkt = kkt_residual(&evals, &w, &x0, &nu, &lam);
        let make = |status, failure| SqpResult {
            stages: w.clone(),
            objective,
            kkt_residual: kkt,
            iterations: iter,
            qp_iterations,
            status,
            eq_duals: nu.clone(),
            ineq_duals: lam.clone(),
            failure,
        };
        log::debug!("SQP iteration {iter}: objective {objective:.9e}, KKT residual {kkt:.3e}");
        if kkt <= settings.kkt_tol {
            return Ok(make(SqpStatus::Converged, None));
        }
        if iter >= settings.max_sqp_iters {
            return Ok(make(SqpStatus::IterLimit, None));
        }

        let indices: Vec<Vec<usize>> = evals.iter().map(|e| e.regularized.clone()).collect();
        let mut hessians = regularize_hessian(
            evals.iter().map(|e| e.hessian.clone()).collect(),
            &indices,
            settings.gamma_block_reg,
        );
        if settings.constraint_curvature {
            for ((h, ev), l) in hessians.iter_mut().zip(&evals).zip(&lam) {
                add_constraint_curvature(h, &ev.curvature, l);
            }
        }
        let stages: Vec<QpStage> = evals
            .iter()
            .zip(hessians)
            .enumerate()
            .map(|(k, (ev, h))| QpStage {
                hessian: h,
                gradient: ev.gradient.clone(),
                dynamics: ev
                    .dynamics
                    .as_ref()
                    .map(|(j, f)| (j.clone(), f - w[k + 1].rows(0, nx))),
                ineq_matrix: ev.ineq_jacobian.clone(),
                ineq_bound: -&ev.ineq_value,
            })
            .collect();
        let qp = StageQp {
            nx,
            initial_state: &x0 - w[0].rows(0, nx),
            stages,
        };
        let sol = match qp_solve(&qp, &qp_settings, None) {
            Ok(sol) => sol,
            Err(Error::QpFailure { reason, iterations, primal_residual, dual_residual, mu }) => {
                let msg = format!(
                    "{reason} after {iterations} QP iterations (primal {primal_residual:.3e}, dual {dual_residual:.3e}, mu {mu:.3e})"
                );
                log::warn!("SQP iteration {iter}: {msg}");
                let mut res = make(SqpStatus::QpFailure, Some(msg));
                res.qp_iterations += iterations;
                return Ok(res);
            }
            Err(e) => return Err(e),
        };
        qp_iterations += sol.iterations;
        if sol.status == QpStatus::IterLimit {
            log::debug!(
                "SQP iteration {iter}: QP hit its iteration limit (primal {:.3e}, dual {:.3e}, mu {:.3e})",
                sol.primal_residual,
                sol.dual_residual,
                sol.mu
            );
        }
        for (wk, dk) in w.iter_mut().zip(&sol.stages) {
            *wk += dk;
        }
        nu = sol.eq_duals;
        lam = sol.ineq_duals;
        iter += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    /// Scalar system `x⁺ = x + u` with cost `Σ (x-1)² + u²` and no inequalities.
    struct Scalar {
        n: usize,
    }

    impl StagewiseNlp for Scalar {
        fn nx(&self) -> usize {
            1
        }
        fn initial_state(&self) -> DVector<f64> {
            DVector::from_element(1, 0.0)
        }
        fn initial_guess(&self) -> Vec<DVector<f64>> {
            (0..=self.n)
                .map(|k| DVector::zeros(if k < self.n { 2 } else { 1 }))
                .collect()
        }
        fn evaluate(&self, w: &[DVector<f64>]) -> Result<Vec<StageEval>> {
            Ok(w
                .iter()
                .enumerate()
                .map(|(k, wk)| {
                    let last = k == self.n;
                    let n = wk.len();
                    let mut grad = DVector::zeros(n);
                    grad[0] = 2.0 * (wk[0] - 1.0);
                    let mut cost = (wk[0] - 1.0).powi(2);
                    if !last {
                        grad[1] = 2.0 * wk[1];
                        cost += wk[1] * wk[1];
                    }
                    StageEval {
                        cost,
                        hessian: DMatrix::identity(n, n) * 2.0,
                        gradient: grad,
                        dynamics: (!last).then(|| {
                            (DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), DVector::from_element(1, wk[0] + wk[1]))
                        }),
                        ineq_jacobian: DMatrix::zeros(0, n),
                        ineq_value: DVector::zeros(0),
                        regularized: Vec::new(),
                        curvature: Vec::new(),
                    }
                })
                .collect())
        }
    }

    #[test]
    fn quadratic_problem_converges_in_one_iteration() {
        let res = solve(&Scalar { n: 3 }, &SqpSettings::default()).unwrap();
        assert_eq!(res.status, SqpStatus::Converged);
        assert_eq!(res.iterations, 1);
        assert!(res.kkt_residual <= 1e-8);
    }

    #[test]
    fn regularization_touches_only_listed_entries() {
        let blocks = vec![DMatrix::zeros(3, 3), DMatrix::identity(2, 2)];
        let out = regularize_hessian(blocks, &[vec![2], vec![]], 1e-4);
        assert_relative_eq!(out[0][(2, 2)], 1e-4);
        assert_eq!(out[0][(0, 0)], 0.0);
        assert_eq!(out[1], DMatrix::identity(2, 2));
    }

    #[test]
    fn settings_validation() {
        assert!(SqpSettings::default().validate().is_ok());
        let bad = SqpSettings {
            kkt_tol: 1e-13,
            ..SqpSettings::default()
        };
        assert!(bad.validate().is_err());
        assert!(SqpSettings::real_time(0).validate().is_err());
    }
}
