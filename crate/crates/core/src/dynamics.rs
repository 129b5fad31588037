//! Differential-drive kinematics with an RK4 zero-order-hold discretisation.
//!
//! State `x = (px, py, θ, v, ω)`, input `u = (a, α)`.

use nalgebra::{Matrix2, SMatrix, SVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NX: usize = 5;
pub const NU: usize = 2;

pub type StateVec = SVector<f64, NX>;
pub type InputVec = SVector<f64, NU>;
pub type StateJac = SMatrix<f64, NX, NX>;
pub type InputJac = SMatrix<f64, NX, NU>;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RobotState {
    pub px: f64,
    pub py: f64,
    pub theta: f64,
    pub v: f64,
    pub omega: f64,
}

impl RobotState {
    pub fn new(px: f64, py: f64, theta: f64, v: f64, omega: f64) -> Self {
        Self { px, py, theta, v, omega }
    }

    pub fn to_vector(&self) -> StateVec {
        StateVec::new(self.px, self.py, self.theta, self.v, self.omega)
    }

    pub fn from_vector(x: &StateVec) -> Self {
        Self::new(x[0], x[1], x[2], x[3], x[4])
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.px, self.py)
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub a: f64,
    pub alpha: f64,
}

impl ControlInput {
    pub fn new(a: f64, alpha: f64) -> Self {
        Self { a, alpha }
    }

    pub fn to_vector(&self) -> InputVec {
        InputVec::new(self.a, self.alpha)
    }

    pub fn from_vector(u: &InputVec) -> Self {
        Self::new(u[0], u[1])
    }
}

/// Elliptical robot footprint `E(0, G)` with `G = diag(a_r², b_r²)` in the body
/// frame; `a_r` lies along the heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotShape {
    semi_axes: (f64, f64),
}

impl RobotShape {
    pub fn new(semi_axes: (f64, f64)) -> Result<Self> {
        let (a, b) = semi_axes;
        if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
            return Err(Error::invalid(format!(
                "robot semi-axes must be positive, got ({a}, {b})"
            )));
        }
        Ok(Self { semi_axes })
    }

    /// From full axis lengths, i.e. twice the semi-axes.
    pub fn from_axis_lengths(lengths: (f64, f64)) -> Result<Self> {
        Self::new((0.5 * lengths.0, 0.5 * lengths.1))
    }

    pub fn semi_axes(&self) -> (f64, f64) {
        self.semi_axes
    }

    pub fn base_shape(&self) -> Matrix2<f64> {
        let (a, b) = self.semi_axes;
        Matrix2::new(a * a, 0.0, 0.0, b * b)
    }

    /// Extent perpendicular to the heading.
    pub fn width(&self) -> f64 {
        2.0 * self.semi_axes.1
    }
}

pub fn rotation(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(c, -s, s, c)
}

pub fn rotation_derivative(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(-s, -c, c, -s)
}

/// `R(θ) G R(θ)ᵀ`.
pub fn rotate_shape(shape: &RobotShape, theta: f64) -> Matrix2<f64> {
    rotate_matrix(&shape.base_shape(), theta)
}

pub fn rotate_matrix(g: &Matrix2<f64>, theta: f64) -> Matrix2<f64> {
    let r = rotation(theta);
    let m = r * g * r.transpose();
    (m + m.transpose()) * 0.5
}

/// `d/dθ [R(θ) G R(θ)ᵀ]`.
pub fn rotate_shape_derivative(shape: &RobotShape, theta: f64) -> Matrix2<f64> {
    let g = shape.base_shape();
    let r = rotation(theta);
    let dr = rotation_derivative(theta);
    let a = dr * g * r.transpose();
    a + a.transpose()
}

pub fn ode_rhs(x: &StateVec, u: &InputVec) -> StateVec {
    let (s, c) = x[2].sin_cos();
    StateVec::new(x[3] * c, x[3] * s, x[4], u[0], u[1])
}

/// `(∂f/∂x, ∂f/∂u)`.
pub fn ode_jacobians(x: &StateVec) -> (StateJac, InputJac) {
    let (s, c) = x[2].sin_cos();
    let mut fx = StateJac::zeros();
    fx[(0, 2)] = -x[3] * s;
    fx[(0, 3)] = c;
    fx[(1, 2)] = x[3] * c;
    fx[(1, 3)] = s;
    fx[(2, 4)] = 1.0;
    let mut fu = InputJac::zeros();
    fu[(3, 0)] = 1.0;
    fu[(4, 1)] = 1.0;
    (fx, fu)
}

pub fn rk4_step(x: &StateVec, u: &InputVec, dt: f64) -> StateVec {
    let k1 = ode_rhs(x, u);
    let k2 = ode_rhs(&(x + k1 * (0.5 * dt)), u);
    let k3 = ode_rhs(&(x + k2 * (0.5 * dt)), u);
    let k4 = ode_rhs(&(x + k3 * dt), u);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rk4Sensitivity {
    pub next: StateVec,
    pub d_state: StateJac,
    pub d_input: InputJac,
}

/// One RK4 step with `∂x⁺/∂x` and `∂x⁺/∂u` propagated through the stages.
pub fn rk4_step_with_sensitivities(x: &StateVec, u: &InputVec, dt: f64) -> Rk4Sensitivity {
    let h = dt;
    let eye = StateJac::identity();

    let k1 = ode_rhs(x, u);
    let (a1, b1) = ode_jacobians(x);
    let dk1x = a1;
    let dk1u = b1;

    let x2 = x + k1 * (0.5 * h);
    let k2 = ode_rhs(&x2, u);
    let (a2, b2) = ode_jacobians(&x2);
    let dk2x = a2 * (eye + dk1x * (0.5 * h));
    let dk2u = a2 * dk1u * (0.5 * h) + b2;

    let x3 = x + k2 * (0.5 * h);
    let k3 = ode_rhs(&x3, u);
    let (a3, b3) = ode_jacobians(&x3);
    let dk3x = a3 * (eye + dk2x * (0.5 * h));
    let dk3u = a3 * dk2u * (0.5 * h) + b3;

    let x4 = x + k3 * h;
    let k4 = ode_rhs(&x4, u);
    let (a4, b4) = ode_jacobians(&x4);
    let dk4x = a4 * (eye + dk3x * h);
    let dk4u = a4 * dk3u * h + b4;

    let w = h / 6.0;
    Rk4Sensitivity {
        next: x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * w,
        d_state: eye + (dk1x + dk2x * 2.0 + dk3x * 2.0 + dk4x) * w,
        d_input: (dk1u + dk2u * 2.0 + dk3u * 2.0 + dk4u) * w,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn rhs_examples() {
        let f = ode_rhs(&StateVec::new(0.0, 0.0, 0.0, 1.0, 0.0), &InputVec::zeros());
        assert_relative_eq!(f, StateVec::new(1.0, 0.0, 0.0, 0.0, 0.0));
        let f = ode_rhs(&StateVec::new(0.0, 0.0, FRAC_PI_2, 2.0, 0.0), &InputVec::zeros());
        assert_relative_eq!(f, StateVec::new(0.0, 2.0, 0.0, 0.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn straight_line_is_exact() {
        let x = rk4_step(&StateVec::new(0.0, 0.0, 0.0, 1.0, 0.0), &InputVec::zeros(), 0.1);
        assert_eq!(x[0], 0.1);
        assert_eq!(x[1], 0.0);
    }

    #[test]
    fn constant_twist_arc() {
        let (v, w, dt) = (1.0, 1.0, 0.1);
        let x = rk4_step(&StateVec::new(0.0, 0.0, 0.0, v, w), &InputVec::zeros(), dt);
        let px = v / w * (w * dt).sin();
        let py = v / w * (1.0 - (w * dt).cos());
        assert!((x[0] - px).abs() <= 1e-7);
        assert!((x[1] - py).abs() <= 1e-7);
        assert_relative_eq!(x[2], w * dt, epsilon = 1e-15);
    }

    #[test]
    fn rotate_shape_examples() {
        let shape = RobotShape::new((2.0, 1.0)).unwrap();
        assert_relative_eq!(rotate_shape(&shape, 0.0), shape.base_shape());
        assert_relative_eq!(rotate_shape(&shape, FRAC_PI_2), Matrix2::new(1.0, 0.0, 0.0, 4.0), epsilon = 1e-14);
        let g = rotate_shape(&shape, 0.77);
        assert_relative_eq!(g.determinant(), 4.0, epsilon = 1e-12);
        assert_relative_eq!(g.trace(), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn rotation_composes() {
        let shape = RobotShape::new((0.2, 0.35)).unwrap();
        let once = rotate_shape(&shape, 0.4 + 1.1);
        let twice = rotate_matrix(&rotate_shape(&shape, 0.4), 1.1);
        assert_relative_eq!(once, twice, epsilon = 1e-12);
    }

    #[test]
    fn shape_validation_and_axes() {
        assert!(RobotShape::new((0.0, 1.0)).is_err());
        let s = RobotShape::from_axis_lengths((0.4, 0.7)).unwrap();
        assert_eq!(s.semi_axes(), (0.2, 0.35));
        assert_relative_eq!(s.width(), 0.7);
    }

    #[test]
    fn rk4_is_fourth_order() {
        let x0 = StateVec::new(0.1, -0.3, 0.4, 0.8, 0.9);
        let u = InputVec::new(0.3, -0.5);
        let exact = {
            let mut x = x0;
            let n = 4096;
            for _ in 0..n {
                x = rk4_step(&x, &u, 0.4 / n as f64);
            }
            x
        };
        let err = |h: f64| {
            let steps = (0.4 / h).round() as usize;
            let mut x = x0;
            for _ in 0..steps {
                x = rk4_step(&x, &u, h);
            }
            (x - exact).norm()
        };
        let order = (err(0.2) / err(0.1)).log2();
        assert!((order - 4.0).abs() < 0.3, "observed order {order}");
    }
}
