//! Synthetic maps and ground-truth scenarios from parametric lane templates.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::{LaneShape, PipelineConfig};
use crate::error::{Error, Result};
use crate::frenet::{frenet_rollout, quintic_coeffs};
use crate::geometry::{frenet_to_cart, FrenetCoord, MapFile, Point, VectorMap};
use crate::metrics::{collision_rate, trajectory_collision_rate, AgentRadii};
use crate::nn::attention::{apply_order, canonical_order};
use crate::scene::{AgentInit, Provenance, Scenario, Scene, Trajectory, HORIZON_STEPS, STEP_DT};

const MAX_TRIES: usize = 200;

/// Maps plus scenarios referencing them by index.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub maps: Vec<VectorMap>,
    pub scenarios: Vec<Scenario>,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    maps: Vec<MapFile>,
    scenarios: Vec<Scenario>,
}

impl Dataset {
    pub fn to_json(&self) -> Result<String> {
        let file = DatasetFile {
            maps: self.maps.iter().map(VectorMap::to_file).collect(),
            scenarios: self.scenarios.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: DatasetFile = serde_json::from_str(s)?;
        let maps = file.maps.iter().map(VectorMap::from_file).collect::<Result<Vec<_>>>()?;
        if let Some(bad) = file.scenarios.iter().find(|s| s.scene.map_ref >= maps.len()) {
            return Err(Error::InvalidConfig(format!("scenario references missing map {}", bad.scene.map_ref)));
        }
        Ok(Dataset {
            maps,
            scenarios: file.scenarios,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_json()?)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Training-set speed extremes.
    pub fn speed_bounds(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for a in self.scenarios.iter().flat_map(|s| s.scene.agents.iter()) {
            lo = lo.min(a.v);
            hi = hi.max(a.v);
        }
        if lo.is_finite() {
            (lo, hi)
        } else {
            (0.0, 1.0)
        }
    }
}

fn sample_points(n: usize, f: impl Fn(f64) -> Point) -> Vec<Point> {
    (0..=n).map(|i| f(i as f64 / n as f64)).collect()
}

/// Lane centerlines of one template, before rotation.
pub fn lane_template(shape: LaneShape, cfg: &PipelineConfig, rng: &mut impl Rng) -> Vec<Vec<Point>> {
    let len = cfg.lane_length;
    let g = cfg.lane_gap;
    let n = (len / cfg.lane_point_spacing).ceil().max(1.0) as usize;
    let mut lanes = match shape {
        LaneShape::Straight => {
            let y0 = if cfg.lanes_per_map == 1 { 0.0 } else { -g / 2.0 };
            vec![
                sample_points(n, |u| [-len / 2.0 + len * u, y0]),
                // Opposite direction of travel.
                sample_points(n, |u| [len / 2.0 - len * u, g / 2.0]),
            ]
        }
        LaneShape::Arc => {
            let r = rng.random_range(cfg.arc_radius_min..=cfg.arc_radius_max.max(cfg.arc_radius_min));
            let span = len / r;
            let ro = r + g;
            let span_o = len / ro;
            vec![
                sample_points(n, |u| {
                    let a = -span / 2.0 + span * u;
                    [r * a.cos() - r, r * a.sin()]
                }),
                sample_points(n, |u| {
                    let a = span_o / 2.0 - span_o * u;
                    [ro * a.cos() - r, ro * a.sin()]
                }),
            ]
        }
        LaneShape::Merge => vec![
            sample_points(n, |u| [-len / 2.0 + len * u, 0.0]),
            sample_points(n, |u| {
                let taper = if u < 0.5 { 0.5 * (1.0 + (2.0 * PI * u).cos()) } else { 0.0 };
                [-len / 2.0 + len * u, g + 2.0 * g * taper]
            }),
        ],
    };
    lanes.truncate(cfg.lanes_per_map);
    lanes
}

pub fn synth_map(cfg: &PipelineConfig, rng: &mut impl Rng) -> Result<VectorMap> {
    let shape = cfg.lane_shapes[rng.random_range(0..cfg.lane_shapes.len())];
    let mut lanes = lane_template(shape, cfg, rng);
    if cfg.rotate_maps {
        let (sin, cos) = rng.random_range(0.0..2.0 * PI).sin_cos();
        for p in lanes.iter_mut().flatten() {
            *p = [cos * p[0] - sin * p[1], sin * p[0] + cos * p[1]];
        }
    }
    VectorMap::from_polylines(&lanes, cfg.map_margin)
}

fn normal(rng: &mut impl Rng, sd: f64) -> f64 {
    if sd > 0.0 {
        Normal::new(0.0, sd).expect("positive sd").sample(rng)
    } else {
        0.0
    }
}

/// One attempt at a ground-truth scenario; `None` when placement fails.
fn try_scenario(map: &VectorMap, map_ref: usize, cfg: &PipelineConfig, rng: &mut ChaCha8Rng, seed: u64) -> Result<Option<Scenario>> {
    let n = rng.random_range(cfg.agents_min..=cfg.agents_max);
    let speeds: Vec<f64> = map
        .lanes
        .iter()
        .map(|_| rng.random_range(cfg.speed_min..=cfg.speed_max))
        .collect();
    let steps = HORIZON_STEPS;
    let horizon = steps as f64 * STEP_DT;
    let mut agents: Vec<AgentInit> = Vec::with_capacity(n);
    let mut trajs: Vec<Trajectory> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut placed = false;
        for _ in 0..MAX_TRIES {
            let li = rng.random_range(0..map.lanes.len());
            let lane = &map.lanes[li];
            let v = speeds[li];
            let s_max = lane.length() - v * horizon - 5.0;
            if s_max <= 5.0 {
                return Err(Error::InvalidConfig("lanes too short for the horizon".into()));
            }
            let s0 = rng.random_range(5.0..s_max);
            let d0 = normal(rng, cfg.position_noise);
            let p = frenet_to_cart(FrenetCoord { s: s0, d: d0 }, lane);
            if agents.iter().any(|a| crate::geometry::dist(a.position(), p) < cfg.min_spacing) {
                continue;
            }
            let theta = lane.heading_at(s0) + normal(rng, cfg.heading_noise);
            let d_target = normal(rng, cfg.lateral_noise);
            let profile = quintic_coeffs(d0, d_target, horizon)?;
            let path = frenet_rollout(&profile, s0, v, STEP_DT, steps)?;
            let mut points = Vec::with_capacity(steps + 1);
            points.push(p);
            points.extend(path.iter().map(|fc| frenet_to_cart(*fc, lane)));
            agents.push(AgentInit::new(p[0], p[1], theta, v, 0));
            trajs.push(Trajectory::new(points, 0));
            placed = true;
            break;
        }
        if !placed {
            return Ok(None);
        }
    }
    let radii = AgentRadii {
        default: cfg.vehicle_radius,
        ..AgentRadii::default()
    };
    let types: Vec<u32> = agents.iter().map(|a| a.c).collect();
    if collision_rate(&agents, &radii) > 0.0 || trajectory_collision_rate(&trajs, &types, &radii)? > 0.0 {
        return Ok(None);
    }
    let perm = canonical_order(&agents);
    let agents = apply_order(&agents, &perm);
    let trajectories = apply_order(&trajs, &perm)
        .into_iter()
        .enumerate()
        .map(|(i, mut t)| {
            t.agent_index = i;
            t
        })
        .collect();
    Ok(Some(Scenario {
        scene: Scene { agents, map_ref },
        trajectories,
        provenance: Provenance::GroundTruth,
        seed,
    }))
}

/// Builds `n_maps` maps with `scenes_per_map` ground-truth scenarios each.
/// The result is a pure function of `(cfg, seed)`.
pub fn synth_dataset(cfg: &PipelineConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut maps = Vec::with_capacity(cfg.n_maps);
    let mut scenarios = Vec::new();
    for m in 0..cfg.n_maps {
        let mut rng = ChaCha8Rng::seed_from_u64(master.random());
        let map = synth_map(cfg, &mut rng)?;
        for _ in 0..cfg.scenes_per_map {
            let scene_seed: u64 = master.random();
            let mut srng = ChaCha8Rng::seed_from_u64(scene_seed);
            let scenario = (0..MAX_TRIES)
                .find_map(|_| try_scenario(&map, m, cfg, &mut srng, scene_seed).transpose())
                .transpose()?
                .ok_or_else(|| Error::InvalidConfig("could not place agents without collisions".into()))?;
            scenarios.push(scenario);
        }
        maps.push(map);
    }
    Ok(Dataset { maps, scenarios })
}
