//! Trajectory planning among ellipsoidal obstacles.
//!
//! Collision avoidance is expressed through a parametric over-approximation of
//! the Minkowski sum of the robot and obstacle ellipses. The crate contains the
//! ellipsoid calculus, the four constraint formulations (Minkowski sum with a
//! free or fixed parameter, separating hyperplane with a free or fixed normal),
//! a differential-drive model, a stage-structured SQP with an interior-point QP
//! solver, a Theta* reference planner, and a closed-loop MPC simulator.

pub mod collision;
pub mod dynamics;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod oracles;
pub mod ocp;
pub mod planner;
pub mod qp;
pub mod scenario;
pub mod sim;
pub mod sqp;

pub use error::{Error, Result};
