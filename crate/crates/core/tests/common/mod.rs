#![allow(dead_code)]

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use ellipsoid_mpc::qp::{DenseQp, QpStage, StageQp};

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(format!("{name}.json"))
}

pub fn random_unit(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    loop {
        let v = DVector::from_iterator(n, (0..n).map(|_| rng.random_range(-1.0..1.0)));
        let norm = v.norm();
        if norm > 1e-3 && norm <= 1.0 {
            return v / norm;
        }
    }
}

pub fn random_rotation(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    a.qr().q()
}

/// Symmetric positive definite matrix with eigenvalues drawn from `[lo, hi]`.
pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    let q = random_rotation(rng, n);
    let d = DMatrix::from_diagonal(&DVector::from_iterator(n, (0..n).map(|_| rng.random_range(lo..hi))));
    let m = &q * d * q.transpose();
    (&m + m.transpose()) * 0.5
}

/// Random stage-structured convex QP with a strictly feasible point and at
/// most `max_rows` inequality rows in total.
pub fn random_stage_qp(rng: &mut ChaCha8Rng, max_dim: usize, max_rows: usize) -> StageQp {
    let nx = rng.random_range(1..=3);
    let nu = rng.random_range(1..=2);
    let n_stages = rng.random_range(2..=(max_dim / (nx + nu)).max(2));
    let x0 = DVector::from_iterator(nx, (0..nx).map(|_| rng.random_range(-1.0..1.0)));
    let mut rows_left = max_rows;
    let mut x = x0.clone();
    let mut stages = Vec::with_capacity(n_stages);
    for k in 0..n_stages {
        let last = k + 1 == n_stages;
        let n = if last { nx } else { nx + nu };
        let mut w = DVector::zeros(n);
        w.rows_mut(0, nx).copy_from(&x);
        for i in nx..n {
            w[i] = rng.random_range(-1.0..1.0);
        }
        let hessian = random_spd(rng, n, 0.1, 3.0);
        let gradient = DVector::from_iterator(n, (0..n).map(|_| rng.random_range(-3.0..3.0)));
        let dynamics = (!last).then(|| {
            let j = DMatrix::from_fn(nx, n, |_, _| rng.random_range(-1.0..1.0));
            let c = DVector::from_iterator(nx, (0..nx).map(|_| rng.random_range(-0.5..0.5)));
            x = &j * &w + &c;
            (j, c)
        });
        let rows = rng.random_range(0..=3.min(rows_left));
        rows_left -= rows;
        let ineq_matrix = DMatrix::from_fn(rows, n, |_, _| rng.random_range(-1.0..1.0));
        let ineq_bound = &ineq_matrix * &w + DVector::from_iterator(rows, (0..rows).map(|_| rng.random_range(0.01..1.0)));
        stages.push(QpStage {
            hessian,
            gradient,
            dynamics,
            ineq_matrix,
            ineq_bound,
        });
    }
    StageQp {
        nx,
        initial_state: x0,
        stages,
    }
}

/// Brute-force QP oracle: tries every subset of active inequality rows and
/// keeps the KKT point that is primal and dual feasible. Returns the
/// minimiser of `½zᵀHz + gᵀz` subject to `Az = b, Cz ≤ d`.
pub fn enumerate_active_sets(qp: &DenseQp) -> Option<(DVector<f64>, f64)> {
    let n = qp.h.nrows();
    let n_eq = qp.a.nrows();
    let m = qp.c.nrows();
    assert!(m <= 16, "enumeration over {m} rows is too large");
    let mut best: Option<(DVector<f64>, f64)> = None;
    for mask in 0u32..(1 << m) {
        let active: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        if active.len() + n_eq > n {
            continue;
        }
        let size = n + n_eq + active.len();
        let mut kkt = DMatrix::zeros(size, size);
        let mut rhs = DVector::zeros(size);
        kkt.view_mut((0, 0), (n, n)).copy_from(&qp.h);
        kkt.view_mut((n, 0), (n_eq, n)).copy_from(&qp.a);
        kkt.view_mut((0, n), (n, n_eq)).copy_from(&qp.a.transpose());
        rhs.rows_mut(0, n).copy_from(&(-&qp.g));
        rhs.rows_mut(n, n_eq).copy_from(&qp.b);
        for (r, &i) in active.iter().enumerate() {
            let row = qp.c.row(i);
            kkt.view_mut((n + n_eq + r, 0), (1, n)).copy_from(&row);
            kkt.view_mut((0, n + n_eq + r), (n, 1)).copy_from(&row.transpose());
            rhs[n + n_eq + r] = qp.d[i];
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        if sol.iter().any(|v| !v.is_finite()) {
            continue;
        }
        let z = sol.rows(0, n).into_owned();
        let primal_ok = (&qp.c * &z - &qp.d).iter().all(|v| *v <= 1e-9);
        let dual_ok = (0..active.len()).all(|r| sol[n + n_eq + r] >= -1e-9);
        if primal_ok && dual_ok {
            let obj = 0.5 * z.dot(&(&qp.h * &z)) + qp.g.dot(&z);
            if best.as_ref().is_none_or(|(_, b)| obj < *b) {
                best = Some((z, obj));
            }
        }
    }
    best
}
