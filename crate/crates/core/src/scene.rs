//! Agents, scenes and trajectories shared by every stage.

use serde::{Deserialize, Serialize};

use crate::geometry::{wrap_angle, Point};

/// Number of future samples in a trajectory (6 s at 10 Hz).
pub const HORIZON_STEPS: usize = 60;
/// Sampling interval of trajectories, seconds.
pub const STEP_DT: f64 = 0.1;

/// Initial pose of one agent. Units are meters, radians and m/s unless the
/// value has been passed through a [`crate::codec::SceneNormalizer`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentInit {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v: f64,
    /// Agent type id (0 = vehicle).
    pub c: u32,
}

impl AgentInit {
    pub fn new(x: f64, y: f64, theta: f64, v: f64, c: u32) -> Self {
        AgentInit {
            x,
            y,
            theta: wrap_angle(theta),
            v,
            c,
        }
    }

    pub fn position(&self) -> Point {
        [self.x, self.y]
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite() && self.v.is_finite()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub agents: Vec<AgentInit>,
    /// Index of the map this scene lives on.
    pub map_ref: usize,
}

/// A sampled path. `points[0]` is the initial position (h = 0) and
/// `points[h]` the position after `h` steps, so a full-horizon trajectory
/// has `HORIZON_STEPS + 1` points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub points: Vec<Point>,
    pub agent_index: usize,
}

impl Trajectory {
    pub fn new(points: Vec<Point>, agent_index: usize) -> Self {
        Trajectory {
            points,
            agent_index,
        }
    }

    /// Number of future steps (excludes the anchor).
    pub fn steps(&self) -> usize {
        self.points.len().saturating_sub(1)
    }

    /// Interleaved `x0, y0, x1, y1, ...` layout.
    pub fn flatten(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p[0], p[1]]).collect()
    }

    pub fn from_flat(flat: &[f64], agent_index: usize) -> Self {
        Trajectory {
            points: flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
            agent_index,
        }
    }

    /// Translates the whole path so its first point sits at `anchor`.
    pub fn reanchor(&mut self, anchor: Point) {
        if let Some(first) = self.points.first().copied() {
            let dx = anchor[0] - first[0];
            let dy = anchor[1] - first[1];
            for p in &mut self.points {
                p[0] += dx;
                p[1] += dy;
            }
            self.points[0] = anchor;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Generated,
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub scene: Scene,
    pub trajectories: Vec<Trajectory>,
    pub provenance: Provenance,
    pub seed: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reanchor_translates_rigidly() {
        let mut t = Trajectory::new(vec![[1.0, 1.0], [2.0, 1.0], [3.0, 2.0]], 0);
        t.reanchor([0.0, 0.0]);
        assert_eq!(t.points, vec![[0.0, 0.0], [1.0, 0.0], [2.0, 1.0]]);
    }

    #[test]
    fn flatten_is_interleaved() {
        let t = Trajectory::new(vec![[1.0, 2.0], [3.0, 4.0]], 3);
        assert_eq!(t.flatten(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(Trajectory::from_flat(&t.flatten(), 3), t);
    }
}
