//! Dimension-generic ellipsoid calculus.
//!
//! An ellipsoid `E(t, M)` is the set `{τ : (τ - t)ᵀ M⁻¹ (τ - t) ≤ 1}` with `M`
//! symmetric positive definite. The Minkowski sum of two origin-centred
//! ellipsoids is bounded by the one-parameter family
//!
//! ```text
//! B(γ) = (1 + e^γ) M1 + (1 + e^-γ) M2
//! ```
//!
//! which is tight in a chosen direction `η` at `γ*(η) = ½ ln(ηᵀM2η / ηᵀM1η)`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative tolerance for the symmetry check on shape matrices.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Number of coarse grid points used to bracket the maximiser in [`interiors_overlap`].
const OVERLAP_GRID: usize = 64;
const OVERLAP_GOLDEN_TOL: f64 = 1e-10;
/// Touching sets count as disjoint; this absorbs rounding in the quadratic form.
const TOUCH_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Ellipsoid {
    center: DVector<f64>,
    shape: DMatrix<f64>,
}

impl Ellipsoid {
    pub fn new(center: DVector<f64>, shape: DMatrix<f64>) -> Result<Self> {
        if shape.nrows() != center.len() || shape.ncols() != center.len() {
            return Err(Error::DimensionMismatch(format!(
                "center has length {} but shape is {}x{}",
                center.len(),
                shape.nrows(),
                shape.ncols()
            )));
        }
        if center.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("ellipsoid center must be finite"));
        }
        check_positive_definite(&shape)?;
        Ok(Self { center, shape })
    }

    /// Planar ellipse from semi-axes and a rotation angle (radians):
    /// `M = R(angle) diag(a², b²) R(angle)ᵀ`.
    pub fn from_semi_axes_2d(center: [f64; 2], semi_axes: [f64; 2], angle: f64) -> Result<Self> {
        if semi_axes.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
            return Err(Error::invalid(format!(
                "semi-axes must be positive and finite, got {semi_axes:?}"
            )));
        }
        let (s, c) = angle.sin_cos();
        let rot = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
        let diag = DMatrix::from_diagonal(&DVector::from_vec(vec![
            semi_axes[0] * semi_axes[0],
            semi_axes[1] * semi_axes[1],
        ]));
        let shape = &rot * diag * rot.transpose();
        Self::new(DVector::from_row_slice(&center), symmetrize(&shape))
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn shape(&self) -> &DMatrix<f64> {
        &self.shape
    }

    /// `(τ - t)ᵀ M⁻¹ (τ - t)`.
    pub fn quadratic_form(&self, point: &DVector<f64>) -> f64 {
        let d = point - &self.center;
        quadratic_form_inverse(&self.shape, &d)
    }

    pub fn contains(&self, point: &DVector<f64>) -> bool {
        self.quadratic_form(point) <= 1.0
    }

    pub fn translated(&self, offset: &DVector<f64>) -> Self {
        Self {
            center: &self.center + offset,
            shape: self.shape.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaInterval {
    pub lower: f64,
    pub upper: f64,
}

impl GammaInterval {
    pub fn contains(&self, gamma: f64) -> bool {
        gamma >= self.lower && gamma <= self.upper
    }

    pub fn clamp(&self, gamma: f64) -> f64 {
        gamma.clamp(self.lower, self.upper)
    }

    /// Intersection with `[lo, hi]`. Falls back to the nearest end of `[lo, hi]`
    /// if the two intervals are disjoint.
    pub fn intersect(&self, lo: f64, hi: f64) -> Self {
        let lower = self.lower.max(lo);
        let upper = self.upper.min(hi);
        if lower <= upper {
            Self { lower, upper }
        } else if self.upper < lo {
            Self { lower: lo, upper: lo }
        } else {
            Self { lower: hi, upper: hi }
        }
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn check_square(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() != m.ncols() || m.nrows() == 0 {
        return Err(Error::DimensionMismatch(format!(
            "expected a non-empty square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

/// Symmetric within [`SYMMETRY_TOL`] (relative) and positive definite.
pub fn check_positive_definite(m: &DMatrix<f64>) -> Result<()> {
    check_square(m)?;
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("shape matrix has non-finite entries"));
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let asym = (m - m.transpose()).amax();
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::invalid(format!(
            "shape matrix is not symmetric (max asymmetry {asym:.3e})"
        )));
    }
    let (lo, _) = eigenvalue_range(m);
    if !(lo > 0.0) {
        return Err(Error::invalid(format!(
            "shape matrix is not positive definite (smallest eigenvalue {lo:.3e})"
        )));
    }
    Ok(())
}

/// `dᵀ M⁻¹ d` through a Cholesky solve; `M` must be positive definite.
pub(crate) fn quadratic_form_inverse(m: &DMatrix<f64>, d: &DVector<f64>) -> f64 {
    match m.clone().cholesky() {
        Some(ch) => {
            let w = ch.solve(d);
            d.dot(&w)
        }
        None => f64::NAN,
    }
}

/// Eigen-decomposition of a symmetric matrix. Eigenvalues are returned in
/// ascending order with matching unit eigenvectors as columns.
///
/// Closed form for 2×2, cyclic Jacobi rotations otherwise.
pub fn symmetric_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    match n {
        1 => (DVector::from_element(1, m[(0, 0)]), DMatrix::identity(1, 1)),
        2 => eigen_2x2(m[(0, 0)], m[(0, 1)], m[(1, 1)]),
        _ => jacobi_eigen(m),
    }
}

fn eigen_2x2(a: f64, b: f64, c: f64) -> (DVector<f64>, DMatrix<f64>) {
    let mean = 0.5 * (a + c);
    let half_diff = 0.5 * (a - c);
    let r = half_diff.hypot(b);
    let (l0, l1) = (mean - r, mean + r);
    // Rotation angle that diagonalises [[a, b], [b, c]].
    let phi = 0.5 * (2.0 * b).atan2(a - c);
    let (s, co) = phi.sin_cos();
    // Column for the larger eigenvalue is (cos φ, sin φ).
    let vecs = DMatrix::from_row_slice(2, 2, &[-s, co, co, s]);
    (DVector::from_vec(vec![l0, l1]), vecs)
}

fn jacobi_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let mut a = symmetrize(m);
    let mut v = DMatrix::<f64>::identity(n, n);
    let scale = a.amax().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[(i, j)] * a[(i, j)];
            }
        }
        if off.sqrt() <= 1e-12 * scale * 1e-3 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| a[(i, i)]));
    let mut vectors = DMatrix::zeros(n, n);
    for (col, &i) in order.iter().enumerate() {
        vectors.set_column(col, &v.column(i));
    }
    (values, vectors)
}

/// `(λ_min, λ_max)` of a symmetric matrix.
pub fn eigenvalue_range(m: &DMatrix<f64>) -> (f64, f64) {
    let (vals, _) = symmetric_eigen(m);
    (vals[0], vals[vals.len() - 1])
}

fn check_direction(eta: &DVector<f64>, m: &DMatrix<f64>) -> Result<()> {
    if eta.len() != m.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "direction has length {} but matrix is {}x{}",
            eta.len(),
            m.nrows(),
            m.ncols()
        )));
    }
    if eta.iter().all(|v| *v == 0.0) {
        return Err(Error::invalid("direction must be nonzero"));
    }
    if eta.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("direction must be finite"));
    }
    Ok(())
}

/// Supporting function of `E(0, M)` in direction `η`: `sqrt(ηᵀ M η)`.
pub fn support_value(eta: &DVector<f64>, m: &DMatrix<f64>) -> Result<f64> {
    check_direction(eta, m)?;
    check_positive_definite(m)?;
    Ok(eta.dot(&(m * eta)).sqrt())
}

/// Convex weights `(β1, β2) = (1/(1+e^γ), 1/(1+e^-γ))`.
pub fn beta_from_gamma(gamma: f64) -> (f64, f64) {
    (1.0 / (1.0 + gamma.exp()), 1.0 / (1.0 + (-gamma).exp()))
}

/// `(1+e^γ) M1 + (1+e^-γ) M2`, i.e. `M1/β1 + M2/β2`.
pub fn overapprox_shape(m1: &DMatrix<f64>, m2: &DMatrix<f64>, gamma: f64) -> Result<DMatrix<f64>> {
    check_pair(m1, m2)?;
    if !gamma.is_finite() {
        return Err(Error::invalid("gamma must be finite"));
    }
    Ok(overapprox_unchecked(m1, m2, gamma))
}

fn overapprox_unchecked(m1: &DMatrix<f64>, m2: &DMatrix<f64>, gamma: f64) -> DMatrix<f64> {
    m1 * (1.0 + gamma.exp()) + m2 * (1.0 + (-gamma).exp())
}

fn check_pair(m1: &DMatrix<f64>, m2: &DMatrix<f64>) -> Result<()> {
    check_positive_definite(m1)?;
    check_positive_definite(m2)?;
    if m1.nrows() != m2.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "shapes have dimensions {} and {}",
            m1.nrows(),
            m2.nrows()
        )));
    }
    Ok(())
}

/// Over-approximation parameter that is tight in direction `η`:
/// `½ ln(ηᵀM2η / ηᵀM1η)`.
pub fn gamma_star(eta: &DVector<f64>, m1: &DMatrix<f64>, m2: &DMatrix<f64>) -> Result<f64> {
    check_direction(eta, m1)?;
    check_pair(m1, m2)?;
    let q1 = eta.dot(&(m1 * eta));
    let q2 = eta.dot(&(m2 * eta));
    Ok(0.5 * (q2 / q1).ln())
}

/// Interval containing `gamma_star(η, M1, M2)` for every direction:
/// `[½ ln(λmin(M2)/λmax(M1)), ½ ln(λmax(M2)/λmin(M1))]`.
pub fn gamma_bounds(m1: &DMatrix<f64>, m2: &DMatrix<f64>) -> Result<GammaInterval> {
    check_pair(m1, m2)?;
    let (min1, max1) = eigenvalue_range(m1);
    let (min2, max2) = eigenvalue_range(m2);
    Ok(GammaInterval {
        lower: 0.5 * (min2 / max1).ln(),
        upper: 0.5 * (max2 / min1).ln(),
    })
}

/// Best over-approximation for the centre offset of two ellipsoids: maximises
/// `dᵀ B(γ)⁻¹ d` with `d = t1 - t2` over [`gamma_bounds`].
///
/// Returns `(value, gamma)`. The interiors are disjoint iff `value ≥ 1`.
pub fn max_overapprox_form(e1: &Ellipsoid, e2: &Ellipsoid) -> Result<(f64, f64)> {
    if e1.dim() != e2.dim() {
        return Err(Error::DimensionMismatch(format!(
            "ellipsoids have dimensions {} and {}",
            e1.dim(),
            e2.dim()
        )));
    }
    let bounds = gamma_bounds(&e1.shape, &e2.shape)?;
    let d = &e1.center - &e2.center;
    let f = |g: f64| quadratic_form_inverse(&overapprox_unchecked(&e1.shape, &e2.shape, g), &d);

    if bounds.width() <= 0.0 {
        return Ok((f(bounds.lower), bounds.lower));
    }
    let step = bounds.width() / (OVERLAP_GRID - 1) as f64;
    let grid: Vec<f64> = (0..OVERLAP_GRID)
        .map(|i| bounds.lower + step * i as f64)
        .collect();
    let (best, _) = grid
        .iter()
        .enumerate()
        .map(|(i, g)| (i, f(*g)))
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
    let lo = grid[best.saturating_sub(1)];
    let hi = grid[(best + 1).min(OVERLAP_GRID - 1)];
    let (g, v) = golden_section_max(&f, lo, hi, OVERLAP_GOLDEN_TOL);
    let grid_best = f(grid[best]);
    if grid_best > v {
        Ok((grid_best, grid[best]))
    } else {
        Ok((v, g))
    }
}

/// True iff the interiors of the two ellipsoids intersect. Touching ellipsoids
/// do not overlap.
pub fn interiors_overlap(e1: &Ellipsoid, e2: &Ellipsoid) -> bool {
    match max_overapprox_form(e1, e2) {
        Ok((value, _)) => value < 1.0 - TOUCH_TOL,
        // Only reachable on dimension mismatch, which the type cannot produce
        // for a well-formed scene; treat conservatively.
        Err(_) => true,
    }
}

fn golden_section_max(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    (x, f(x))
}
