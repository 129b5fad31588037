//! Stage-structured convex QP solved by a primal-dual interior-point method.
//!
//! The problem has one variable block `w_k = [x_k; q_k]` per stage:
//!
//! ```text
//! minimise    Σ_k ½ w_kᵀ H_k w_k + g_kᵀ w_k
//! subject to  x_0 = x̄_0
//!             x_{k+1} = J_k w_k + c_k          k = 0..N-1
//!             C_k w_k ≤ d_k                    k = 0..N
//! ```
//!
//! Every inequality row is local to one stage, so the Newton system keeps the
//! stage structure and is solved by a Riccati recursion. The outer loop is
//! Mehrotra's predictor-corrector.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct QpStage {
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    /// `(J_k, c_k)` of `x_{k+1} = J_k w_k + c_k`; `None` on the last stage.
    pub dynamics: Option<(DMatrix<f64>, DVector<f64>)>,
    pub ineq_matrix: DMatrix<f64>,
    pub ineq_bound: DVector<f64>,
}

impl QpStage {
    pub fn dim(&self) -> usize {
        self.gradient.len()
    }

    pub fn rows(&self) -> usize {
        self.ineq_bound.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageQp {
    /// Dimension of the leading state part of every stage block.
    pub nx: usize,
    pub initial_state: DVector<f64>,
    pub stages: Vec<QpStage>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpSettings {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Converged,
    /// Iteration limit hit; the solution holds the best iterate seen.
    IterLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub stages: Vec<DVector<f64>>,
    /// Multipliers of the dynamics rows, one block per transition.
    pub eq_duals: Vec<DVector<f64>>,
    /// Multipliers of the inequality rows, one block per stage.
    pub ineq_duals: Vec<DVector<f64>>,
    pub objective: f64,
    pub iterations: usize,
    pub status: QpStatus,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub mu: f64,
}

/// Optional starting point: primal blocks and inequality multipliers.
#[derive(Debug, Clone, Default)]
pub struct QpWarmStart {
    pub stages: Option<Vec<DVector<f64>>>,
    pub ineq_duals: Option<Vec<DVector<f64>>>,
}

impl StageQp {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::DimensionMismatch("QP has no stages".into()));
        }
        if self.initial_state.len() != self.nx {
            return Err(Error::DimensionMismatch(format!(
                "initial state has length {}, expected {}",
                self.initial_state.len(),
                self.nx
            )));
        }
        let last = self.stages.len() - 1;
        for (k, st) in self.stages.iter().enumerate() {
            let n = st.dim();
            let bad = st.hessian.nrows() != n
                || st.hessian.ncols() != n
                || st.ineq_matrix.ncols() != n
                || st.ineq_matrix.nrows() != st.rows()
                || n < self.nx;
            if bad {
                return Err(Error::DimensionMismatch(format!("stage {k} blocks are inconsistent")));
            }
            match (&st.dynamics, k == last) {
                (Some((j, c)), false) => {
                    if j.nrows() != self.nx || j.ncols() != n || c.len() != self.nx {
                        return Err(Error::DimensionMismatch(format!(
                            "stage {k} dynamics are {}x{}, expected {}x{}",
                            j.nrows(),
                            j.ncols(),
                            self.nx,
                            n
                        )));
                    }
                }
                (None, true) => {}
                _ => {
                    return Err(Error::DimensionMismatch(format!(
                        "stage {k}: only the last stage may omit dynamics"
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn objective(&self, w: &[DVector<f64>]) -> f64 {
        self.stages
            .iter()
            .zip(w)
            .map(|(st, wk)| 0.5 * wk.dot(&(&st.hessian * wk)) + st.gradient.dot(wk))
            .sum()
    }

    /// Flattened problem `min ½zᵀHz + gᵀz  s.t. A z = b, C z ≤ d` over the
    /// concatenated stage blocks, including `x_0` with its pinning rows.
    pub fn to_dense(&self) -> DenseQp {
        let offsets: Vec<usize> = self
            .stages
            .iter()
            .scan(0, |acc, st| {
                let o = *acc;
                *acc += st.dim();
                Some(o)
            })
            .collect();
        let n: usize = self.stages.iter().map(|s| s.dim()).sum();
        let n_eq = self.nx * self.stages.len();
        let n_in: usize = self.stages.iter().map(|s| s.rows()).sum();
        let mut h = DMatrix::zeros(n, n);
        let mut g = DVector::zeros(n);
        let mut a = DMatrix::zeros(n_eq, n);
        let mut b = DVector::zeros(n_eq);
        let mut c = DMatrix::zeros(n_in, n);
        let mut d = DVector::zeros(n_in);
        for i in 0..self.nx {
            a[(i, i)] = 1.0;
            b[i] = self.initial_state[i];
        }
        let mut row = 0;
        for (k, st) in self.stages.iter().enumerate() {
            let o = offsets[k];
            let nk = st.dim();
            h.view_mut((o, o), (nk, nk)).copy_from(&st.hessian);
            g.rows_mut(o, nk).copy_from(&st.gradient);
            c.view_mut((row, o), (st.rows(), nk)).copy_from(&st.ineq_matrix);
            d.rows_mut(row, st.rows()).copy_from(&st.ineq_bound);
            row += st.rows();
            if let Some((j, ck)) = &st.dynamics {
                let r = self.nx * (k + 1);
                let o_next = offsets[k + 1];
                for i in 0..self.nx {
                    a[(r + i, o_next + i)] = 1.0;
                    b[r + i] = ck[i];
                }
                let mut blk = a.view_mut((r, o), (self.nx, nk));
                blk -= j;
            }
        }
        DenseQp { h, g, a, b, c, d, offsets }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseQp {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: DMatrix<f64>,
    pub d: DVector<f64>,
    /// Start of each stage block in the flattened vector.
    pub offsets: Vec<usize>,
}

/// Lower bound on the centring target, relative to the tolerance.
const MU_FLOOR_FACTOR: f64 = 0.1;
/// Merit below which the best iterate is returned after a breakdown.
const STAGNATION_ACCEPT: f64 = 1e-6;

/// Per-stage factorisation data from the backward Riccati sweep.
struct RiccatiFactor {
    gain: Vec<DMatrix<f64>>,
    p_mat: Vec<DMatrix<f64>>,
}

fn chol_solve_spd(m: &DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if let Some(ch) = m.clone().cholesky() {
        return Ok(ch);
    }
    let scale = m.diagonal().amax().max(1.0);
    let mut delta = 1e-14 * scale;
    for _ in 0..8 {
        let shifted = m + DMatrix::identity(m.nrows(), m.ncols()) * delta;
        if let Some(ch) = shifted.cholesky() {
            return Ok(ch);
        }
        delta *= 100.0;
    }
    Err(Error::QpFailure {
        reason: "reduced Hessian is not positive definite".into(),
        iterations: 0,
        primal_residual: f64::NAN,
        dual_residual: f64::NAN,
        mu: f64::NAN,
    })
}

/// Riccati solver for the equality-constrained Newton subproblem
/// `min Σ ½ΔwᵀH̃Δw + ĝᵀΔw  s.t.  Δx_{k+1} = J_k Δw_k + e_k, Δx_0 = 0`.
struct NewtonSystem<'a> {
    qp: &'a StageQp,
    h_tilde: Vec<DMatrix<f64>>,
    chol: Vec<Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>>,
    factor: RiccatiFactor,
}

impl<'a> NewtonSystem<'a> {
    fn factorize(qp: &'a StageQp, sigma: &[DVector<f64>]) -> Result<Self> {
        let nx = qp.nx;
        let n_stages = qp.stages.len();
        let mut h_tilde = Vec::with_capacity(n_stages);
        for (st, sg) in qp.stages.iter().zip(sigma) {
            let mut h = st.hessian.clone();
            if st.rows() > 0 {
                let mut scaled = st.ineq_matrix.clone();
                for (i, mut row) in scaled.row_iter_mut().enumerate() {
                    row *= sg[i];
                }
                h += st.ineq_matrix.transpose() * scaled;
            }
            h_tilde.push(h);
        }
        let mut gain = vec![DMatrix::zeros(0, 0); n_stages];
        let mut p_mat = vec![DMatrix::zeros(nx, nx); n_stages];
        let mut chol = Vec::with_capacity(n_stages);
        chol.resize_with(n_stages, || None);
        for k in (0..n_stages).rev() {
            let st = &qp.stages[k];
            let n = st.dim();
            let nq = n - nx;
            let mut q = h_tilde[k].clone();
            if let Some((j, _)) = &st.dynamics {
                let pj = &p_mat[k + 1] * j;
                q += j.transpose() * pj;
            }
            let qxx = q.view((0, 0), (nx, nx)).into_owned();
            if nq > 0 {
                let qqq = q.view((nx, nx), (nq, nq)).into_owned();
                let qqx = q.view((nx, 0), (nq, nx)).into_owned();
                let ch = chol_solve_spd(&qqq)?;
                let k_gain = -ch.solve(&qqx);
                let p = &qxx + qqx.transpose() * &k_gain;
                p_mat[k] = (&p + p.transpose()) * 0.5;
                gain[k] = k_gain;
                chol[k] = Some(ch);
            } else {
                p_mat[k] = qxx;
            }
        }
        Ok(Self {
            qp,
            h_tilde,
            chol,
            factor: RiccatiFactor { gain, p_mat },
        })
    }

    /// Returns `(Δw, Δν)` for gradient `ĝ` and dynamics offsets `e`.
    fn solve(&self, g_hat: &[DVector<f64>], e: &[DVector<f64>]) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let nx = self.qp.nx;
        let n_stages = self.qp.stages.len();
        // Backward sweep for the linear terms.
        let mut p_vec = vec![DVector::zeros(nx); n_stages];
        let mut k_ff = vec![DVector::zeros(0); n_stages];
        for k in (0..n_stages).rev() {
            let st = &self.qp.stages[k];
            let n = st.dim();
            let nq = n - nx;
            let mut q = g_hat[k].clone();
            if let Some((j, _)) = &st.dynamics {
                let v = &self.factor.p_mat[k + 1] * &e[k] + &p_vec[k + 1];
                q += j.transpose() * v;
            }
            let qx = q.rows(0, nx).into_owned();
            if nq > 0 {
                let qq = q.rows(nx, nq).into_owned();
                let ch = self.chol[k].as_ref().expect("factorised stage");
                let kff = -ch.solve(&qq);
                // Q_xq = Q_qxᵀ; recompute Q_qx from H̃ and P to avoid storing it.
                let mut qfull = self.h_tilde[k].clone();
                if let Some((j, _)) = &st.dynamics {
                    qfull += j.transpose() * (&self.factor.p_mat[k + 1] * j);
                }
                let qqx = qfull.view((nx, 0), (nq, nx));
                p_vec[k] = &qx + qqx.transpose() * &kff;
                k_ff[k] = kff;
            } else {
                p_vec[k] = qx;
            }
        }
        // Forward sweep.
        let mut dw = Vec::with_capacity(n_stages);
        let mut dnu = Vec::with_capacity(n_stages.saturating_sub(1));
        let mut dx = DVector::zeros(nx);
        for k in 0..n_stages {
            let st = &self.qp.stages[k];
            let n = st.dim();
            let nq = n - nx;
            let mut w = DVector::zeros(n);
            w.rows_mut(0, nx).copy_from(&dx);
            if nq > 0 {
                let dq = &self.factor.gain[k] * &dx + &k_ff[k];
                w.rows_mut(nx, nq).copy_from(&dq);
            }
            if let Some((j, _)) = &st.dynamics {
                dx = j * &w + &e[k];
                dnu.push(&self.factor.p_mat[k + 1] * &dx + &p_vec[k + 1]);
            }
            dw.push(w);
        }
        (dw, dnu)
    }
}

struct Residuals {
    dual: Vec<DVector<f64>>,
    eq: Vec<DVector<f64>>,
    ineq: Vec<DVector<f64>>,
    dual_norm: f64,
    primal_norm: f64,
    mu: f64,
    /// Largest single complementarity product.
    comp_max: f64,
}

fn inf_norm(vs: &[DVector<f64>]) -> f64 {
    vs.iter().map(|v| v.amax()).fold(0.0, f64::max)
}

fn residuals(
    qp: &StageQp,
    w: &[DVector<f64>],
    nu: &[DVector<f64>],
    s: &[DVector<f64>],
    lam: &[DVector<f64>],
) -> Residuals {
    let nx = qp.nx;
    let mut dual = Vec::with_capacity(w.len());
    let mut eq = Vec::new();
    let mut ineq = Vec::with_capacity(w.len());
    let mut comp = 0.0;
    let mut comp_max: f64 = 0.0;
    let mut m_total = 0usize;
    for (k, st) in qp.stages.iter().enumerate() {
        let mut rd = &st.hessian * &w[k] + &st.gradient;
        if st.rows() > 0 {
            rd += st.ineq_matrix.transpose() * &lam[k];
        }
        if let Some((j, c)) = &st.dynamics {
            rd += j.transpose() * &nu[k];
            eq.push(j * &w[k] + c - w[k + 1].rows(0, nx));
        }
        if k >= 1 {
            let mut head = rd.rows_mut(0, nx);
            head -= &nu[k - 1];
        } else {
            rd.rows_mut(0, nx).fill(0.0);
        }
        dual.push(rd);
        ineq.push(&st.ineq_matrix * &w[k] + &s[k] - &st.ineq_bound);
        comp += s[k].dot(&lam[k]);
        comp_max = s[k].iter().zip(lam[k].iter()).fold(comp_max, |m, (a, b)| m.max(a * b));
        m_total += st.rows();
    }
    let mu = if m_total > 0 { comp / m_total as f64 } else { 0.0 };
    let dual_norm = inf_norm(&dual);
    let primal_norm = inf_norm(&eq).max(inf_norm(&ineq));
    Residuals {
        dual,
        eq,
        ineq,
        dual_norm,
        primal_norm,
        mu,
        comp_max,
    }
}

fn max_step(v: &[DVector<f64>], dv: &[DVector<f64>]) -> f64 {
    let mut alpha = 1.0_f64;
    for (vk, dk) in v.iter().zip(dv) {
        for (x, dx) in vk.iter().zip(dk.iter()) {
            if *dx < 0.0 {
                alpha = alpha.min(-x / dx);
            }
        }
    }
    alpha
}

struct Direction {
    dw: Vec<DVector<f64>>,
    dnu: Vec<DVector<f64>>,
    ds: Vec<DVector<f64>>,
    dlam: Vec<DVector<f64>>,
}

/// Newton direction of the perturbed KKT system for complementarity
/// residual `rc`.
fn newton_direction(
    qp: &StageQp,
    system: &NewtonSystem<'_>,
    res: &Residuals,
    s: &[DVector<f64>],
    lam: &[DVector<f64>],
    sigma: &[DVector<f64>],
    rc: &[DVector<f64>],
) -> Direction {
    let n_stages = qp.stages.len();
    // t = S⁻¹(Λ r_i - r_c)
    let t: Vec<DVector<f64>> = (0..n_stages)
        .map(|k| (lam[k].component_mul(&res.ineq[k]) - &rc[k]).component_div(&s[k]))
        .collect();
    let g_hat: Vec<DVector<f64>> = (0..n_stages)
        .map(|k| {
            let st = &qp.stages[k];
            if st.rows() > 0 {
                &res.dual[k] + st.ineq_matrix.transpose() * &t[k]
            } else {
                res.dual[k].clone()
            }
        })
        .collect();
    let (dw, dnu) = system.solve(&g_hat, &res.eq);
    let mut ds = Vec::with_capacity(n_stages);
    let mut dlam = Vec::with_capacity(n_stages);
    for k in 0..n_stages {
        let cdw = &qp.stages[k].ineq_matrix * &dw[k];
        dlam.push(sigma[k].component_mul(&cdw) + &t[k]);
        ds.push(-&res.ineq[k] - cdw);
    }
    Direction { dw, dnu, ds, dlam }
}

/// Starting point from one affine Newton step at unit slacks and
/// multipliers, shifted back into the positive orthant so that the initial
/// multipliers match the scale of the gradient.
fn initial_point(
    qp: &StageQp,
    w: &mut [DVector<f64>],
    nu: &mut [DVector<f64>],
    s: &mut [DVector<f64>],
    lam: &mut [DVector<f64>],
) -> Result<()> {
    let nx = qp.nx;
    let res = residuals(qp, w, nu, s, lam);
    let sigma: Vec<DVector<f64>> = lam.iter().zip(s.iter()).map(|(l, sk)| l.component_div(sk)).collect();
    let system = NewtonSystem::factorize(qp, &sigma)?;
    let rc: Vec<DVector<f64>> = s.iter().zip(lam.iter()).map(|(a, b)| a.component_mul(b)).collect();
    let dir = newton_direction(qp, &system, &res, s, lam, &sigma, &rc);
    for k in 0..w.len() {
        w[k] += &dir.dw[k];
        s[k] += &dir.ds[k];
        lam[k] += &dir.dlam[k];
    }
    for (n, d) in nu.iter_mut().zip(&dir.dnu) {
        *n += d;
    }
    w[0].rows_mut(0, nx).copy_from(&qp.initial_state);
    let min_of = |v: &[DVector<f64>]| v.iter().flat_map(|x| x.iter().copied()).fold(f64::INFINITY, f64::min);
    let shift_s = (-1.5 * min_of(s)).max(0.0);
    let shift_l = (-1.5 * min_of(lam)).max(0.0);
    s.iter_mut().for_each(|v| v.add_scalar_mut(shift_s));
    lam.iter_mut().for_each(|v| v.add_scalar_mut(shift_l));
    let comp: f64 = s.iter().zip(lam.iter()).map(|(a, b)| a.dot(b)).sum();
    let sum_s: f64 = s.iter().map(|v| v.sum()).sum();
    let sum_l: f64 = lam.iter().map(|v| v.sum()).sum();
    let extra_s = 0.5 * comp / sum_l.max(f64::MIN_POSITIVE);
    let extra_l = 0.5 * comp / sum_s.max(f64::MIN_POSITIVE);
    // A floor keeps the point interior when the affine step lands exactly
    // on the boundary.
    s.iter_mut().for_each(|v| v.apply(|x| *x = (*x + extra_s).max(1e-8)));
    lam.iter_mut().for_each(|v| v.apply(|x| *x = (*x + extra_l).max(1e-8)));
    Ok(())
}

/// Solve the stage QP. Returns `Err(QpFailure)` on numerical breakdown and a
/// solution flagged [`QpStatus::IterLimit`] when the iteration limit is hit.
pub fn qp_solve(qp: &StageQp, settings: &QpSettings, warm: Option<&QpWarmStart>) -> Result<QpSolution> {
    qp.validate()?;
    let nx = qp.nx;
    let n_stages = qp.stages.len();

    let mut w: Vec<DVector<f64>> = match warm.and_then(|ws| ws.stages.as_ref()) {
        Some(ws) if ws.len() == n_stages && ws.iter().zip(&qp.stages).all(|(a, b)| a.len() == b.dim()) => ws.clone(),
        _ => qp.stages.iter().map(|st| DVector::zeros(st.dim())).collect(),
    };
    w[0].rows_mut(0, nx).copy_from(&qp.initial_state);
    let mut nu: Vec<DVector<f64>> = vec![DVector::zeros(nx); n_stages - 1];
    let mut s: Vec<DVector<f64>> = qp
        .stages
        .iter()
        .zip(&w)
        .map(|(st, wk)| (&st.ineq_bound - &st.ineq_matrix * wk).map(|r| r.max(1.0)))
        .collect();
    let mut lam: Vec<DVector<f64>> = match warm.and_then(|ws| ws.ineq_duals.as_ref()) {
        Some(l) if l.len() == n_stages && l.iter().zip(&qp.stages).all(|(a, b)| a.len() == b.rows()) => {
            l.iter().map(|v| v.map(|x| x.max(1e-2))).collect()
        }
        _ => qp.stages.iter().map(|st| DVector::from_element(st.rows(), 1.0)).collect(),
    };
    let m_total: usize = qp.stages.iter().map(|st| st.rows()).sum();
    let warm_duals = warm.and_then(|ws| ws.ineq_duals.as_ref()).is_some();
    if m_total > 0 && !warm_duals {
        initial_point(qp, &mut w, &mut nu, &mut s, &mut lam)?;
    }

    let mut best: Option<(f64, QpSolution)> = None;
    for iter in 0..=settings.max_iters {
        let res = residuals(qp, &w, &nu, &s, &lam);
        let merit = res.dual_norm.max(res.primal_norm).max(res.comp_max);
        if !merit.is_finite() {
            return Err(Error::QpFailure {
                reason: "non-finite iterate".into(),
                iterations: iter,
                primal_residual: res.primal_norm,
                dual_residual: res.dual_norm,
                mu: res.mu,
            });
        }
        let snapshot = |status| QpSolution {
            stages: w.clone(),
            eq_duals: nu.clone(),
            ineq_duals: lam.clone(),
            objective: qp.objective(&w),
            iterations: iter,
            status,
            primal_residual: res.primal_norm,
            dual_residual: res.dual_norm,
            mu: res.mu,
        };
        if merit <= settings.tol {
            return Ok(snapshot(QpStatus::Converged));
        }
        if best.as_ref().map_or(true, |(b, _)| merit < *b) {
            best = Some((merit, snapshot(QpStatus::IterLimit)));
        }
        if iter == settings.max_iters {
            break;
        }

        let sigma: Vec<DVector<f64>> = lam.iter().zip(&s).map(|(l, sk)| l.component_div(sk)).collect();
        let system = match NewtonSystem::factorize(qp, &sigma) {
            Ok(system) => system,
            Err(Error::QpFailure { reason, .. }) => {
                // Late breakdowns are usually round-off near the solution;
                // hand back the best iterate when it is already accurate.
                if let Some((merit, mut sol)) = best.take() {
                    if merit <= STAGNATION_ACCEPT {
                        log::debug!("QP breakdown at iteration {iter}: {reason}; returning best iterate with merit {merit:.3e}");
                        sol.iterations = iter;
                        return Ok(sol);
                    }
                }
                return Err(Error::QpFailure {
                    reason,
                    iterations: iter,
                    primal_residual: res.primal_norm,
                    dual_residual: res.dual_norm,
                    mu: res.mu,
                });
            }
            Err(other) => return Err(other),
        };

        let direction = |rc: &[DVector<f64>]| newton_direction(qp, &system, &res, &s, &lam, &sigma, rc);

        let step_length = |d: &Direction| (0.995 * max_step(&s, &d.ds).min(max_step(&lam, &d.dlam))).min(1.0);
        let (dir, alpha) = if m_total == 0 {
            let rc: Vec<DVector<f64>> = qp.stages.iter().map(|_| DVector::zeros(0)).collect();
            (direction(&rc), 1.0)
        } else {
            // Predictor.
            let rc_aff: Vec<DVector<f64>> = s.iter().zip(&lam).map(|(a, b)| a.component_mul(b)).collect();
            let aff = direction(&rc_aff);
            let a_aff = max_step(&s, &aff.ds).min(max_step(&lam, &aff.dlam));
            let mut comp_aff = 0.0;
            for k in 0..n_stages {
                let sa = &s[k] + &aff.ds[k] * a_aff;
                let la = &lam[k] + &aff.dlam[k] * a_aff;
                comp_aff += sa.dot(&la);
            }
            let mu_aff = comp_aff / m_total as f64;
            let centering = (mu_aff / res.mu).powi(3).min(1.0);
            // Driving complementarity far below the tolerance only inflates
            // λ/s and ruins the conditioning of the Newton system.
            let target_mu = (centering * res.mu).max(MU_FLOOR_FACTOR * settings.tol);
            let centred: Vec<DVector<f64>> = (0..n_stages)
                .map(|k| s[k].component_mul(&lam[k]).add_scalar(-target_mu))
                .collect();
            // Corrector with the second-order term. It can cycle on
            // degenerate problems, so the plain centred direction is kept
            // whenever it allows a longer step.
            let rc: Vec<DVector<f64>> = (0..n_stages)
                .map(|k| &centred[k] + aff.ds[k].component_mul(&aff.dlam[k]))
                .collect();
            let corrected = direction(&rc);
            let a_corrected = step_length(&corrected);
            let plain = direction(&centred);
            let a_plain = step_length(&plain);
            if a_plain > a_corrected {
                (plain, a_plain)
            } else {
                (corrected, a_corrected)
            }
        };
        log::trace!(
            "QP iteration {iter}: primal {:.3e}, dual {:.3e}, mu {:.3e}, step {alpha:.3e}",
            res.primal_norm,
            res.dual_norm,
            res.mu
        );
        for k in 0..n_stages {
            w[k] += &dir.dw[k] * alpha;
            s[k] += &dir.ds[k] * alpha;
            lam[k] += &dir.dlam[k] * alpha;
        }
        for (n, d) in nu.iter_mut().zip(&dir.dnu) {
            *n += d * alpha;
        }
        // Keep the pinned initial state exact.
        w[0].rows_mut(0, nx).copy_from(&qp.initial_state);
    }
    let (_, mut sol) = best.expect("at least one iterate evaluated");
    sol.status = QpStatus::IterLimit;
    sol.iterations = settings.max_iters;
    Ok(sol)
}
