//! Collision-avoidance constraint formulations between the elliptical robot
//! and elliptical obstacles, with analytic first derivatives.
//!
//! Minkowski-sum rows require
//! `(p - t)ᵀ [(1+e^γ) G̃(θ) + (1+e^-γ) M]⁻¹ (p - t) ≥ 1 + margin`,
//! separating-hyperplane rows require
//! `ηᵀ(p - t) - sqrt(ηᵀMη) - sqrt(ηᵀG̃(θ)η) ≥ margin` with `ηᵀη ≤ 1`.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::dynamics::{rotate_shape, rotate_shape_derivative, RobotShape, RobotState};
use crate::error::{Error, Result};
use crate::geometry::{interiors_overlap, Ellipsoid, GammaInterval};
use crate::oracles::ellipsoid_pair_distance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstraintKind {
    #[serde(rename = "free-gamma")]
    MinkowskiFreeGamma,
    #[serde(rename = "fixed-gamma")]
    MinkowskiFixedGamma,
    #[serde(rename = "free-eta")]
    HyperplaneFreeEta,
    #[serde(rename = "fixed-eta")]
    HyperplaneFixedEta,
}

impl ConstraintKind {
    pub const ALL: [ConstraintKind; 4] = [
        ConstraintKind::MinkowskiFreeGamma,
        ConstraintKind::MinkowskiFixedGamma,
        ConstraintKind::HyperplaneFreeEta,
        ConstraintKind::HyperplaneFixedEta,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ConstraintKind::MinkowskiFreeGamma => "free-gamma",
            ConstraintKind::MinkowskiFixedGamma => "fixed-gamma",
            ConstraintKind::HyperplaneFreeEta => "free-eta",
            ConstraintKind::HyperplaneFixedEta => "fixed-eta",
        }
    }

    pub fn is_fixed(&self) -> bool {
        matches!(
            self,
            ConstraintKind::MinkowskiFixedGamma | ConstraintKind::HyperplaneFixedEta
        )
    }

    pub fn is_minkowski(&self) -> bool {
        matches!(
            self,
            ConstraintKind::MinkowskiFreeGamma | ConstraintKind::MinkowskiFixedGamma
        )
    }
}

impl std::str::FromStr for ConstraintKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ConstraintKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown mode '{s}' (expected free-gamma, fixed-gamma, free-eta or fixed-eta)"
                ))
            })
    }
}

impl std::fmt::Display for ConstraintKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstraintMode {
    pub kind: ConstraintKind,
    pub safety_margin: f64,
}

impl ConstraintMode {
    pub fn new(kind: ConstraintKind, safety_margin: f64) -> Result<Self> {
        if !(safety_margin >= 0.0) || !safety_margin.is_finite() {
            return Err(Error::invalid(format!(
                "safety margin must be a finite non-negative number, got {safety_margin}"
            )));
        }
        Ok(Self { kind, safety_margin })
    }
}

/// Planar elliptical obstacle stored with fixed-size data for the hot path.
#[derive(Debug, Clone, PartialEq)]
pub struct Obstacle {
    pub center: Vector2<f64>,
    pub shape: Matrix2<f64>,
}

impl Obstacle {
    pub fn from_ellipsoid(e: &Ellipsoid) -> Result<Self> {
        if e.dim() != 2 {
            return Err(Error::DimensionMismatch(format!(
                "obstacles must be planar, got dimension {}",
                e.dim()
            )));
        }
        let c = e.center();
        let m = e.shape();
        Ok(Self {
            center: Vector2::new(c[0], c[1]),
            shape: Matrix2::new(m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]),
        })
    }

    pub fn to_ellipsoid(&self) -> Ellipsoid {
        Ellipsoid::new(to_dvec(&self.center), to_dmat(&self.shape))
            .expect("obstacle shape was validated on construction")
    }

    /// Eigenvalues `(min, max)` of the shape.
    pub fn eigenvalues(&self) -> (f64, f64) {
        eig2(&self.shape)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObstacleSet {
    obstacles: Vec<Obstacle>,
}

impl ObstacleSet {
    pub fn new(ellipsoids: &[Ellipsoid]) -> Result<Self> {
        let obstacles = ellipsoids
            .iter()
            .map(Obstacle::from_ellipsoid)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { obstacles })
    }

    pub fn len(&self) -> usize {
        self.obstacles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obstacles.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Obstacle> {
        self.obstacles.iter()
    }

    pub fn get(&self, m: usize) -> &Obstacle {
        &self.obstacles[m]
    }
}

pub(crate) fn to_dvec(v: &Vector2<f64>) -> DVector<f64> {
    DVector::from_row_slice(&[v[0], v[1]])
}

pub(crate) fn to_dmat(m: &Matrix2<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &[m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]])
}

fn eig2(m: &Matrix2<f64>) -> (f64, f64) {
    let mean = 0.5 * (m[(0, 0)] + m[(1, 1)]);
    let r = (0.5 * (m[(0, 0)] - m[(1, 1)])).hypot(0.5 * (m[(0, 1)] + m[(1, 0)]));
    (mean - r, mean + r)
}

/// Robot footprint at a given state as a generic ellipsoid.
pub fn robot_ellipsoid(shape: &RobotShape, state: &RobotState) -> Ellipsoid {
    let g = rotate_shape(shape, state.theta);
    Ellipsoid::new(to_dvec(&state.position()), to_dmat(&g))
        .expect("rotated robot shape is positive definite")
}

/// Over-approximation parameter bounds for the robot against one obstacle.
/// Rotation preserves the robot's eigenvalues, so the interval is constant.
pub fn robot_gamma_bounds(shape: &RobotShape, obstacle: &Obstacle) -> GammaInterval {
    let (a, b) = shape.semi_axes();
    let (g_min, g_max) = ((a * a).min(b * b), (a * a).max(b * b));
    let (m_min, m_max) = obstacle.eigenvalues();
    GammaInterval {
        lower: 0.5 * (m_min / g_max).ln(),
        upper: 0.5 * (m_max / g_min).ln(),
    }
}

fn solve_spd2(b: &Matrix2<f64>, d: &Vector2<f64>) -> Vector2<f64> {
    // 2x2 Cholesky; B is a positive combination of SPD matrices.
    let l11 = b[(0, 0)].sqrt();
    let l21 = b[(1, 0)] / l11;
    let l22 = (b[(1, 1)] - l21 * l21).sqrt();
    let y0 = d[0] / l11;
    let y1 = (d[1] - l21 * y0) / l22;
    let x1 = y1 / l22;
    let x0 = (y0 - l21 * x1) / l11;
    Vector2::new(x0, x1)
}

fn overapprox2(g_rot: &Matrix2<f64>, m: &Matrix2<f64>, gamma: f64) -> Matrix2<f64> {
    g_rot * (1.0 + gamma.exp()) + m * (1.0 + (-gamma).exp())
}

/// `(p - t)ᵀ [(1+e^γ) G̃ + (1+e^-γ) M]⁻¹ (p - t)`.
pub fn minkowski_residual(
    p: &Vector2<f64>,
    g_rot: &Matrix2<f64>,
    t: &Vector2<f64>,
    m: &Matrix2<f64>,
    gamma: f64,
) -> f64 {
    let d = p - t;
    if d == Vector2::zeros() {
        return 0.0;
    }
    let b = overapprox2(g_rot, m, gamma);
    d.dot(&solve_spd2(&b, &d))
}

/// Minkowski residual with its gradient over `(px, py, θ, γ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinkowskiGradient {
    pub value: f64,
    pub d_position: Vector2<f64>,
    pub d_theta: f64,
    pub d_gamma: f64,
    /// Second derivative with respect to `γ`.
    pub d2_gamma: f64,
}

pub fn minkowski_jacobian(
    state: &RobotState,
    shape: &RobotShape,
    obstacle: &Obstacle,
    gamma: f64,
) -> MinkowskiGradient {
    let g_rot = rotate_shape(shape, state.theta);
    let d = state.position() - obstacle.center;
    let eg = gamma.exp();
    let emg = (-gamma).exp();
    let b = g_rot * (1.0 + eg) + obstacle.shape * (1.0 + emg);
    let w = solve_spd2(&b, &d);
    let dg = rotate_shape_derivative(shape, state.theta);
    let b_gamma = g_rot * eg - obstacle.shape * emg;
    let b_gamma2 = g_rot * eg + obstacle.shape * emg;
    let bw = b_gamma * w;
    // d(dᵀB⁻¹d) = 2 wᵀ dd - wᵀ dB w
    MinkowskiGradient {
        value: d.dot(&w),
        d_position: w * 2.0,
        d_theta: -(1.0 + eg) * w.dot(&(dg * w)),
        d_gamma: -w.dot(&bw),
        d2_gamma: 2.0 * bw.dot(&solve_spd2(&b, &bw)) - w.dot(&(b_gamma2 * w)),
    }
}

/// `(separation, norm_slack)` of the hyperplane parameterised by `η`.
pub fn hyperplane_residuals(
    p: &Vector2<f64>,
    g_rot: &Matrix2<f64>,
    t: &Vector2<f64>,
    m: &Matrix2<f64>,
    eta: &Vector2<f64>,
) -> (f64, f64) {
    let sep = eta.dot(&(p - t)) - eta.dot(&(m * eta)).sqrt() - eta.dot(&(g_rot * eta)).sqrt();
    (sep, 1.0 - eta.dot(eta))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperplaneGradient {
    pub separation: f64,
    pub norm_slack: f64,
    pub d_position: Vector2<f64>,
    pub d_theta: f64,
    pub d_eta: Vector2<f64>,
    /// Gradient of `norm_slack` with respect to `η`.
    pub norm_d_eta: Vector2<f64>,
    /// Hessian of `separation` with respect to `η`.
    pub d2_eta: Matrix2<f64>,
}

pub fn hyperplane_jacobian(
    state: &RobotState,
    shape: &RobotShape,
    obstacle: &Obstacle,
    eta: &Vector2<f64>,
) -> HyperplaneGradient {
    let g_rot = rotate_shape(shape, state.theta);
    let d = state.position() - obstacle.center;
    let m_eta = obstacle.shape * eta;
    let g_eta = g_rot * eta;
    let sm = eta.dot(&m_eta).sqrt();
    let sg = eta.dot(&g_eta).sqrt();
    let dg = rotate_shape_derivative(shape, state.theta);
    let safe = |x: f64| if x > 0.0 { x } else { f64::INFINITY };
    HyperplaneGradient {
        separation: eta.dot(&d) - sm - sg,
        norm_slack: 1.0 - eta.dot(eta),
        d_position: *eta,
        d_theta: -eta.dot(&(dg * eta)) / (2.0 * safe(sg)),
        d_eta: d - m_eta / safe(sm) - g_eta / safe(sg),
        norm_d_eta: -eta * 2.0,
        d2_eta: -(support_hessian(&obstacle.shape, &m_eta, sm) + support_hessian(&g_rot, &g_eta, sg)),
    }
}

/// Hessian of `sqrt(ηᵀMη)` given `Mη` and the support value `σ`.
fn support_hessian(m: &Matrix2<f64>, m_eta: &Vector2<f64>, sigma: f64) -> Matrix2<f64> {
    if sigma <= 0.0 {
        return Matrix2::zeros();
    }
    m / sigma - m_eta * m_eta.transpose() / (sigma * sigma * sigma)
}

/// Fixed over-approximation parameter from a guess state:
/// `½ ln(ηᵀMη / ηᵀG̃η)` at `η = p - t`, clamped to the parameter bounds.
/// Coincident centres fall back to `γ = 0`.
pub fn fixed_gamma_hat(state_guess: &RobotState, shape: &RobotShape, obstacle: &Obstacle) -> f64 {
    let eta = state_guess.position() - obstacle.center;
    if eta.norm() <= f64::EPSILON * (1.0 + obstacle.center.norm()) {
        log::warn!("fixed_gamma_hat: robot and obstacle centres coincide, using gamma = 0");
        return 0.0;
    }
    let g_rot = rotate_shape(shape, state_guess.theta);
    let gamma = 0.5 * (eta.dot(&(obstacle.shape * eta)) / eta.dot(&(g_rot * eta))).ln();
    robot_gamma_bounds(shape, obstacle).clamp(gamma)
}

/// Fixed separating direction, oriented from the obstacle towards the robot.
///
/// Uses the closest-point vector when the interiors are disjoint and the
/// normalised centre difference otherwise.
pub fn fixed_eta_hat(robot: &Ellipsoid, obstacle: &Ellipsoid) -> DVector<f64> {
    let n = robot.dim();
    if !interiors_overlap(robot, obstacle) {
        if let Ok(pd) = ellipsoid_pair_distance(robot, obstacle) {
            if pd.distance > 1e-12 {
                return (&pd.p1 - &pd.p2) / pd.distance;
            }
        }
    }
    let diff = robot.center() - obstacle.center();
    let norm = diff.norm();
    if norm > 0.0 {
        diff / norm
    } else {
        log::warn!("fixed_eta_hat: coincident centres, using the first coordinate axis");
        let mut e = DVector::zeros(n);
        e[0] = 1.0;
        e
    }
}

/// Planar convenience wrapper around [`fixed_eta_hat`].
pub fn fixed_eta_hat_2d(state: &RobotState, shape: &RobotShape, obstacle: &Obstacle) -> Vector2<f64> {
    let eta = fixed_eta_hat(&robot_ellipsoid(shape, state), &obstacle.to_ellipsoid());
    Vector2::new(eta[0], eta[1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::gamma_star;
    use approx::assert_relative_eq;

    fn circle_obstacle(x: f64, y: f64, r: f64) -> Obstacle {
        Obstacle::from_ellipsoid(&Ellipsoid::from_semi_axes_2d([x, y], [r, r], 0.0).unwrap()).unwrap()
    }

    #[test]
    fn minkowski_residual_examples() {
        let i2 = Matrix2::identity();
        let p = Vector2::new(2.0, 0.0);
        assert_relative_eq!(minkowski_residual(&p, &i2, &Vector2::zeros(), &i2, 0.0), 1.0, epsilon = 1e-15);
        let p = Vector2::new(3.0, 0.0);
        let r = minkowski_residual(&p, &i2, &Vector2::zeros(), &(i2 * 4.0), 2f64.ln());
        assert_relative_eq!(r, 1.0, epsilon = 1e-14);
        assert_eq!(minkowski_residual(&Vector2::zeros(), &i2, &Vector2::zeros(), &i2, 0.3), 0.0);
    }

    #[test]
    fn circular_robot_has_no_heading_sensitivity() {
        let shape = RobotShape::new((0.5, 0.5)).unwrap();
        let obs = Obstacle::from_ellipsoid(&Ellipsoid::from_semi_axes_2d([1.0, 2.0], [0.7, 0.3], 0.5).unwrap()).unwrap();
        let g = minkowski_jacobian(&RobotState::new(0.1, -0.4, 1.3, 0.0, 0.0), &shape, &obs, 0.4);
        assert!(g.d_theta.abs() < 1e-14);
    }

    #[test]
    fn gamma_derivative_vanishes_at_tight_parameter() {
        // Circles: the tight parameter for the centre direction is stationary.
        let shape = RobotShape::new((0.5, 0.5)).unwrap();
        let obs = circle_obstacle(1.0, 2.0, 1.5);
        let state = RobotState::new(0.1, -0.4, 1.3, 0.0, 0.0);
        let dir = to_dvec(&(state.position() - obs.center));
        let g_rot = rotate_shape(&shape, state.theta);
        let gs = gamma_star(&dir, &to_dmat(&g_rot), &to_dmat(&obs.shape)).unwrap();
        assert!(minkowski_jacobian(&state, &shape, &obs, gs).d_gamma.abs() < 1e-12);

        // General ellipses: the maximiser over gamma is stationary and is the
        // tight parameter for the normal direction B(γ)⁻¹(p - t).
        let shape = RobotShape::new((0.2, 0.35)).unwrap();
        let obs = Obstacle::from_ellipsoid(&Ellipsoid::from_semi_axes_2d([1.0, 2.0], [0.7, 0.3], 0.5).unwrap()).unwrap();
        let g_rot = rotate_shape(&shape, state.theta);
        let f = |gm: f64| minkowski_residual(&state.position(), &g_rot, &obs.center, &obs.shape, gm);
        let best = crate::oracles::golden_section_min(|gm| -f(gm), -5.0, 5.0, 1e-12);
        let grad = minkowski_jacobian(&state, &shape, &obs, best);
        assert!(grad.d_gamma.abs() < 1e-6, "d_gamma = {}", grad.d_gamma);
        let b = overapprox2(&g_rot, &obs.shape, best);
        let normal = solve_spd2(&b, &(state.position() - obs.center));
        let gs = gamma_star(&to_dvec(&normal), &to_dmat(&g_rot), &to_dmat(&obs.shape)).unwrap();
        assert!((gs - best).abs() < 1e-5);
    }

    #[test]
    fn second_derivatives_match_differences() {
        let shape = RobotShape::new((0.2, 0.35)).unwrap();
        let obs = Obstacle::from_ellipsoid(&Ellipsoid::from_semi_axes_2d([1.0, 2.0], [0.7, 0.3], 0.5).unwrap()).unwrap();
        let state = RobotState::new(0.1, -0.4, 1.3, 0.0, 0.0);
        let h = 1e-5;
        let gamma = 0.3;
        let fd = (minkowski_jacobian(&state, &shape, &obs, gamma + h).d_gamma
            - minkowski_jacobian(&state, &shape, &obs, gamma - h).d_gamma)
            / (2.0 * h);
        let exact = minkowski_jacobian(&state, &shape, &obs, gamma).d2_gamma;
        assert!((fd - exact).abs() <= 1e-6 * (1.0 + exact.abs()), "{fd} vs {exact}");

        let eta = Vector2::new(0.3, -0.8);
        let d2 = hyperplane_jacobian(&state, &shape, &obs, &eta).d2_eta;
        for j in 0..2 {
            let mut e = Vector2::zeros();
            e[j] = h;
            let col = (hyperplane_jacobian(&state, &shape, &obs, &(eta + e)).d_eta
                - hyperplane_jacobian(&state, &shape, &obs, &(eta - e)).d_eta)
                / (2.0 * h);
            for i in 0..2 {
                assert!((col[i] - d2[(i, j)]).abs() <= 1e-6 * (1.0 + d2[(i, j)].abs()));
            }
        }
    }

    #[test]
    fn hyperplane_examples() {
        let i2 = Matrix2::identity();
        let eta = Vector2::new(1.0, 0.0);
        let (sep, slack) = hyperplane_residuals(&Vector2::new(2.0, 0.0), &i2, &Vector2::zeros(), &i2, &eta);
        assert_relative_eq!(sep, 0.0);
        assert_relative_eq!(slack, 0.0);
        let (sep, _) = hyperplane_residuals(&Vector2::new(4.0, 0.0), &i2, &Vector2::zeros(), &i2, &eta);
        assert_relative_eq!(sep, 2.0);
        let (sep, slack) = hyperplane_residuals(&Vector2::new(4.0, 0.0), &i2, &Vector2::zeros(), &i2, &Vector2::zeros());
        assert_eq!(sep, 0.0);
        assert_eq!(slack, 1.0);
    }

    #[test]
    fn gamma_hat_examples() {
        let shape = RobotShape::new((1.0, 1.0)).unwrap();
        let obs = circle_obstacle(0.0, 0.0, 2.0);
        for (x, y) in [(3.0, 0.0), (-1.0, 4.0), (0.3, -2.2)] {
            let g = fixed_gamma_hat(&RobotState::new(x, y, 0.7, 0.0, 0.0), &shape, &obs);
            assert_relative_eq!(g, 2f64.ln(), epsilon = 1e-14);
        }
        let shape = RobotShape::new((0.3, 0.5)).unwrap();
        let same = Obstacle {
            center: Vector2::new(2.0, 1.0),
            shape: rotate_shape(&shape, 0.4),
        };
        let g = fixed_gamma_hat(&RobotState::new(0.0, 0.0, 0.4, 0.0, 0.0), &shape, &same);
        assert!(g.abs() < 1e-14);
        let g = fixed_gamma_hat(&RobotState::new(2.0, 1.0, 0.4, 0.0, 0.0), &shape, &same);
        assert_eq!(g, 0.0);
    }

    #[test]
    fn eta_hat_examples() {
        let robot = Ellipsoid::from_semi_axes_2d([0.0, 0.0], [1.0, 1.0], 0.0).unwrap();
        let obstacle = Ellipsoid::from_semi_axes_2d([3.0, 0.0], [1.0, 1.0], 0.0).unwrap();
        let eta = fixed_eta_hat(&robot, &obstacle);
        assert_relative_eq!(eta[0], -1.0, epsilon = 1e-12);
        assert_relative_eq!(eta[1], 0.0, epsilon = 1e-12);
        let obstacle = Ellipsoid::from_semi_axes_2d([1.0, 1.0], [1.0, 1.0], 0.0).unwrap();
        let eta = fixed_eta_hat(&robot, &obstacle);
        let s = -(0.5f64).sqrt();
        assert_relative_eq!(eta[0], s, epsilon = 1e-12);
        assert_relative_eq!(eta[1], s, epsilon = 1e-12);
        let eta = fixed_eta_hat(&robot, &robot);
        assert_eq!(eta.as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("fixed-gamma".parse::<ConstraintKind>().unwrap(), ConstraintKind::MinkowskiFixedGamma);
        assert!("nope".parse::<ConstraintKind>().is_err());
        assert!(ConstraintMode::new(ConstraintKind::HyperplaneFreeEta, -0.1).is_err());
    }
}
