//! Slow, independent reference computations used to validate the main path.
//!
//! Nothing here is tuned for speed. The pair-distance routine is also used at
//! runtime for clearance logging and for the fixed separating-hyperplane
//! parameters.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{interiors_overlap, symmetric_eigen, Ellipsoid};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleConfig {
    pub sample_count: usize,
    pub tolerance: f64,
    pub rng_seed: u64,
}

impl OracleConfig {
    pub fn new(sample_count: usize, tolerance: f64, rng_seed: u64) -> Result<Self> {
        if sample_count < 1000 {
            return Err(Error::invalid("oracle sample_count must be at least 1000"));
        }
        if !(tolerance > 0.0) {
            return Err(Error::invalid("oracle tolerance must be positive"));
        }
        Ok(Self {
            sample_count,
            tolerance,
            rng_seed,
        })
    }
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            sample_count: 10_000,
            tolerance: 1e-9,
            rng_seed: 0x5eed,
        }
    }
}

/// Point on `∂E(0, M)` from its principal-axis parameterisation: `Q Λ^½ u`
/// for a unit vector `u`.
fn boundary_point(vals: &DVector<f64>, vecs: &DMatrix<f64>, unit: &DVector<f64>) -> DVector<f64> {
    let scaled = DVector::from_iterator(unit.len(), unit.iter().zip(vals.iter()).map(|(u, l)| u * l.sqrt()));
    vecs * scaled
}

fn random_unit(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    if n == 2 {
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        return DVector::from_row_slice(&[phi.cos(), phi.sin()]);
    }
    loop {
        let v = DVector::from_iterator(n, (0..n).map(|_| rng.random_range(-1.0..1.0)));
        let norm = v.norm();
        if norm > 1e-3 && norm <= 1.0 {
            return v / norm;
        }
    }
}

/// Sums `b + d` with `b ∈ ∂E(0, M1)` and `d ∈ ∂E(0, M2)`.
///
/// Even-indexed samples pair independently drawn boundary points; odd-indexed
/// samples pair the two boundary points sharing a random outward normal, which
/// land on the boundary of the Minkowski sum itself.
pub fn sampled_minkowski_points(
    m1: &DMatrix<f64>,
    m2: &DMatrix<f64>,
    count: usize,
    seed: u64,
) -> Vec<DVector<f64>> {
    let n = m1.nrows();
    let (v1, q1) = symmetric_eigen(m1);
    let (v2, q2) = symmetric_eigen(m2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            if i % 2 == 0 {
                let b = boundary_point(&v1, &q1, &random_unit(&mut rng, n));
                let d = boundary_point(&v2, &q2, &random_unit(&mut rng, n));
                b + d
            } else {
                let eta = random_unit(&mut rng, n);
                let w1 = m1 * &eta;
                let w2 = m2 * &eta;
                &w1 / eta.dot(&w1).sqrt() + &w2 / eta.dot(&w2).sqrt()
            }
        })
        .collect()
}

/// Deterministic planar variant: `count` equally spaced principal-axis angles,
/// the same angle used on both ellipses.
pub fn grid_minkowski_points(m1: &DMatrix<f64>, m2: &DMatrix<f64>, count: usize) -> Vec<DVector<f64>> {
    let (v1, q1) = symmetric_eigen(m1);
    let (v2, q2) = symmetric_eigen(m2);
    (0..count)
        .map(|i| {
            let phi = std::f64::consts::TAU * i as f64 / count as f64;
            let u = DVector::from_row_slice(&[phi.cos(), phi.sin()]);
            boundary_point(&v1, &q1, &u) + boundary_point(&v2, &q2, &u)
        })
        .collect()
}

/// Euclidean projection onto an ellipsoid given its eigen-decomposition.
struct Projector<'a> {
    center: &'a DVector<f64>,
    vals: DVector<f64>,
    vecs: DMatrix<f64>,
}

impl<'a> Projector<'a> {
    fn new(e: &'a Ellipsoid) -> Self {
        let (vals, vecs) = symmetric_eigen(e.shape());
        Self {
            center: e.center(),
            vals,
            vecs,
        }
    }

    fn project(&self, y: &DVector<f64>) -> DVector<f64> {
        let w = self.vecs.transpose() * (y - self.center);
        let z = project_diagonal(&self.vals, &w);
        self.center + &self.vecs * z
    }
}

/// Projection of `w` onto `{z : Σ z_i²/λ_i ≤ 1}`. Outside points solve the
/// secular equation `Σ λ_i w_i² / (λ_i + μ)² = 1` for `μ > 0` by Newton's
/// method, which is monotone from `μ = 0` because the left side is convex and
/// decreasing.
fn project_diagonal(vals: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
    let inside: f64 = w.iter().zip(vals.iter()).map(|(wi, l)| wi * wi / l).sum();
    if inside <= 1.0 {
        return w.clone();
    }
    let mut mu = 0.0_f64;
    for _ in 0..500 {
        let mut phi = -1.0;
        let mut dphi = 0.0;
        for (wi, l) in w.iter().zip(vals.iter()) {
            let den = l + mu;
            let t = l * wi * wi / (den * den);
            phi += t;
            dphi -= 2.0 * t / den;
        }
        if phi <= 0.0 {
            break;
        }
        let step = -phi / dphi;
        mu += step;
        if step <= 1e-16 * (1.0 + mu) {
            break;
        }
    }
    DVector::from_iterator(
        w.len(),
        w.iter().zip(vals.iter()).map(|(wi, l)| l * wi / (l + mu)),
    )
}

pub fn project_onto_ellipsoid(point: &DVector<f64>, e: &Ellipsoid) -> DVector<f64> {
    Projector::new(e).project(point)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairDistance {
    pub distance: f64,
    /// Closest point on the first ellipsoid.
    pub p1: DVector<f64>,
    /// Closest point on the second ellipsoid.
    pub p2: DVector<f64>,
    pub iterations: usize,
}

pub const PAIR_DISTANCE_STEP_TOL: f64 = 1e-10;
pub const PAIR_DISTANCE_MAX_ITERS: usize = 10_000;

/// Closest points of two ellipsoids with disjoint interiors by alternating
/// projections.
pub fn ellipsoid_pair_distance(e1: &Ellipsoid, e2: &Ellipsoid) -> Result<PairDistance> {
    if e1.dim() != e2.dim() {
        return Err(Error::DimensionMismatch("ellipsoid dimensions differ".into()));
    }
    if interiors_overlap(e1, e2) {
        return Err(Error::Domain("ellipsoid interiors overlap".into()));
    }
    let proj1 = Projector::new(e1);
    let proj2 = Projector::new(e2);
    let mut p2 = proj2.project(e1.center());
    let mut p1 = proj1.project(&p2);
    let mut iterations = 1;
    while iterations < PAIR_DISTANCE_MAX_ITERS {
        let next2 = proj2.project(&p1);
        let next1 = proj1.project(&next2);
        let step = (&next1 - &p1).norm().max((&next2 - &p2).norm());
        p1 = next1;
        p2 = next2;
        iterations += 1;
        if step < PAIR_DISTANCE_STEP_TOL {
            break;
        }
    }
    Ok(PairDistance {
        distance: (&p1 - &p2).norm(),
        p1,
        p2,
        iterations,
    })
}

/// Dense search over principal-axis angles of two planar ellipses:
/// `resolution × resolution` boundary pairs.
pub fn boundary_grid_distance(e1: &Ellipsoid, e2: &Ellipsoid, resolution: usize) -> f64 {
    let sample = |e: &Ellipsoid| -> Vec<[f64; 2]> {
        let (vals, vecs) = symmetric_eigen(e.shape());
        (0..resolution)
            .map(|i| {
                let phi = std::f64::consts::TAU * i as f64 / resolution as f64;
                let u = DVector::from_row_slice(&[phi.cos(), phi.sin()]);
                let p = e.center() + boundary_point(&vals, &vecs, &u);
                [p[0], p[1]]
            })
            .collect()
    };
    let a = sample(e1);
    let b = sample(e2);
    let mut best = f64::INFINITY;
    for p in &a {
        for q in &b {
            let d = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
            if d < best {
                best = d;
            }
        }
    }
    best.sqrt()
}

/// Optimal value of the convex program
/// `min (z - t1)ᵀ M1⁻¹ (z - t1)  s.t.  z ∈ E(t2, M2)`.
///
/// With `M1 = L Lᵀ` and `w = L⁻¹ (z - t1)` the objective becomes `|w|²` over
/// the whitened ellipsoid `E(L⁻¹(t2 - t1), L⁻¹ M2 L⁻ᵀ)`, so the minimiser is
/// the projection of the origin onto that set (a single exact
/// projected-gradient step).
pub fn min_form_over_ellipsoid(e1: &Ellipsoid, e2: &Ellipsoid) -> f64 {
    let chol = e1
        .shape()
        .clone()
        .cholesky()
        .expect("ellipsoid shape is positive definite");
    let l = chol.l();
    let linv = l
        .clone()
        .try_inverse()
        .expect("Cholesky factor is invertible");
    let center = &linv * (e2.center() - e1.center());
    let shape = &linv * e2.shape() * linv.transpose();
    let shape = (&shape + shape.transpose()) * 0.5;
    let (vals, vecs) = symmetric_eigen(&shape);
    let w = vecs.transpose() * (-&center);
    let z = project_diagonal(&vals, &w);
    // Projected point relative to the whitened origin.
    let point = &center + &vecs * z;
    point.norm_squared()
}

/// Convex-program overlap decision: overlap iff the optimum is below `1 - 1e-9`.
pub fn oracle_overlap(e1: &Ellipsoid, e2: &Ellipsoid) -> bool {
    min_form_over_ellipsoid(e1, e2) < 1.0 - 1e-9
}

/// Central-difference Jacobian: `(f(x + h e_j) - f(x - h e_j)) / 2h`.
pub fn finite_difference_jacobian<F>(f: F, x: &DVector<f64>, h: f64) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let m = f(x).len();
    let n = x.len();
    let mut jac = DMatrix::zeros(m, n);
    let mut xp = x.clone();
    for j in 0..n {
        let orig = xp[j];
        xp[j] = orig + h;
        let fp = f(&xp);
        xp[j] = orig - h;
        let fm = f(&xp);
        xp[j] = orig;
        jac.set_column(j, &((fp - fm) / (2.0 * h)));
    }
    jac
}

/// Golden-section minimisation of a unimodal function on `[a, b]`.
pub fn golden_section_min<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}
