//! JSON scenario files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::collision::{ConstraintKind, ConstraintMode, ObstacleSet};
use crate::dynamics::{RobotShape, RobotState, NX};
use crate::error::{Error, Result};
use crate::geometry::Ellipsoid;
use crate::ocp::{Horizon, Limits, Scenario, Weights, SLACK_PENALTY};
use crate::planner::OccupancyGrid;
use crate::sim::{ReferenceSettings, SimSettings};
use crate::sqp::SqpSettings;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotSection {
    /// Full axis lengths `(along the heading, across the heading)`.
    pub axes: [f64; 2],
    #[serde(default)]
    pub limits: Limits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleSpec {
    pub center: [f64; 2],
    pub semi_axes: [f64; 2],
    /// Rotation of the first semi-axis in radians.
    #[serde(default)]
    pub angle: f64,
}

impl ObstacleSpec {
    pub fn to_ellipsoid(&self) -> Result<Ellipsoid> {
        Ellipsoid::from_semi_axes_2d(self.center, self.semi_axes, self.angle)
    }
}

/// Occupancy map: explicit rows (first row on top) or, when `rows` is
/// absent, a `size = [width, height]` grid rasterised from the obstacles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapSection {
    pub resolution: f64,
    #[serde(default)]
    pub origin: [f64; 2],
    #[serde(default)]
    pub rows: Option<Vec<String>>,
    #[serde(default)]
    pub size: Option<[usize; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pose {
    pub position: [f64; 2],
    #[serde(default)]
    pub heading: f64,
}

impl Pose {
    fn to_state(self) -> RobotState {
        RobotState::new(self.position[0], self.position[1], self.heading, 0.0, 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub disturbance: Option<[f64; NX]>,
}

fn default_steps() -> usize {
    300
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            steps: default_steps(),
            seed: 0,
            disturbance: None,
        }
    }
}

fn default_terminal_eps() -> [f64; 2] {
    [1e-2, 1e-2]
}

fn default_slack_penalty() -> f64 {
    SLACK_PENALTY
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default)]
    pub name: Option<String>,
    pub robot: RobotSection,
    pub horizon: Horizon,
    #[serde(default)]
    pub weights: Weights,
    #[serde(default = "default_terminal_eps")]
    pub terminal_eps: [f64; 2],
    #[serde(default)]
    pub obstacles: Vec<ObstacleSpec>,
    #[serde(default)]
    pub map: Option<MapSection>,
    pub start: Pose,
    pub goal: Pose,
    pub mode: ConstraintKind,
    #[serde(default)]
    pub safety_margin: f64,
    #[serde(default = "default_slack_penalty")]
    pub slack_penalty: f64,
    #[serde(default)]
    pub solver: SqpSettings,
    #[serde(default)]
    pub reference: ReferenceSettings,
    #[serde(default)]
    pub simulation: SimulationSection,
}

/// Validated scenario together with its simulation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedScenario {
    pub name: String,
    pub scenario: Scenario,
    pub sim: SimSettings,
}

impl ScenarioFile {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Scenario(e.to_string()))
    }

    pub fn build(&self) -> Result<LoadedScenario> {
        let robot = RobotShape::from_axis_lengths((self.robot.axes[0], self.robot.axes[1]))
            .map_err(|e| Error::Scenario(format!("robot.axes: {e}")))?;
        let ellipsoids = self
            .obstacles
            .iter()
            .enumerate()
            .map(|(i, o)| o.to_ellipsoid().map_err(|e| Error::Scenario(format!("obstacles[{i}]: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let obstacles = ObstacleSet::new(&ellipsoids)?;
        let grid = match &self.map {
            None => None,
            Some(map) => Some(match (&map.rows, map.size) {
                (Some(rows), _) => OccupancyGrid::from_rows(rows, map.resolution, map.origin),
                (None, Some([w, h])) => OccupancyGrid::rasterize(&ellipsoids, map.resolution, w, h, map.origin),
                (None, None) => Err(Error::invalid("needs either rows or size")),
            }
            .map_err(|e| Error::Scenario(format!("map: {e}")))?),
        };
        let mode = ConstraintMode::new(self.mode, self.safety_margin)
            .map_err(|e| Error::Scenario(format!("safety_margin: {e}")))?;
        let scenario = Scenario {
            robot,
            obstacles,
            horizon: self.horizon,
            limits: self.robot.limits,
            weights: self.weights,
            terminal_eps: (self.terminal_eps[0], self.terminal_eps[1]),
            mode,
            grid,
            start: self.start.to_state(),
            goal: self.goal.to_state(),
            slack_penalty: self.slack_penalty,
        };
        scenario.validate().map_err(|e| Error::Scenario(e.to_string()))?;
        if let Some(grid) = &scenario.grid {
            for (name, pose) in [("start", &self.start), ("goal", &self.goal)] {
                let p = nalgebra::Vector2::new(pose.position[0], pose.position[1]);
                match grid.cell_of(&p) {
                    None => return Err(Error::Scenario(format!("{name}: position lies outside the map"))),
                    Some((ix, iy)) if grid.is_occupied(ix, iy) => {
                        return Err(Error::Scenario(format!("{name}: position lies in an occupied cell")))
                    }
                    _ => {}
                }
            }
        }
        let sim = SimSettings {
            steps: self.simulation.steps,
            solver: self.solver,
            reference: self.reference,
            disturbance: self.simulation.disturbance,
            seed: self.simulation.seed,
        };
        sim.validate().map_err(|e| Error::Scenario(e.to_string()))?;
        Ok(LoadedScenario {
            name: self.name.clone().unwrap_or_else(|| "scenario".into()),
            scenario,
            sim,
        })
    }
}

pub fn load_scenario(path: &Path) -> Result<LoadedScenario> {
    let text = std::fs::read_to_string(path)?;
    ScenarioFile::from_json(&text)?.build()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "robot": {"axes": [0.4, 0.7]},
        "horizon": {"T": 2.0, "N": 20},
        "obstacles": [{"center": [3.0, 1.0], "semi_axes": [0.5, 0.3], "angle": 0.2}],
        "start": {"position": [0.0, 0.0]},
        "goal": {"position": [5.0, 0.0]},
        "mode": "fixed-gamma",
        "safety_margin": 0.01
    }"#;

    #[test]
    fn minimal_file_builds() {
        let s = ScenarioFile::from_json(MINIMAL).unwrap().build().unwrap();
        assert_eq!(s.scenario.horizon.dt(), 0.1);
        assert_eq!(s.scenario.mode.kind, ConstraintKind::MinkowskiFixedGamma);
        assert_eq!(s.scenario.obstacles.len(), 1);
        assert_eq!(s.scenario.robot.semi_axes(), (0.2, 0.35));
    }

    #[test]
    fn missing_goal_names_the_field() {
        let text = MINIMAL.replace(r#""goal": {"position": [5.0, 0.0]},"#, "");
        let err = ScenarioFile::from_json(&text).unwrap_err().to_string();
        assert!(err.contains("goal"), "{err}");
        assert!(err.contains("line"), "{err}");
    }

    #[test]
    fn zero_semi_axis_is_rejected() {
        let text = MINIMAL.replace("[0.5, 0.3]", "[0.5, 0.0]");
        let err = ScenarioFile::from_json(&text).unwrap().build().unwrap_err().to_string();
        assert!(err.contains("obstacles[0]"), "{err}");
    }
}
