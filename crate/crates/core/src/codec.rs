//! Trajectory latents and scene normalization.
//!
//! Trajectories are moved into the agent's local frame (origin at the initial
//! position, +x along the initial heading), flattened as interleaved
//! `x, y` pairs and compressed with PCA to [`LATENT_DIM`] coefficients.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Point, VectorMap};
use crate::scene::{AgentInit, Scene, Trajectory};

pub const LATENT_DIM: usize = 10;
pub const FLATTEN_ORDER: &str = "xy_interleaved";

pub fn to_local_frame(traj: &Trajectory, init: &AgentInit) -> Trajectory {
    let (sin, cos) = init.theta.sin_cos();
    let points = traj
        .points
        .iter()
        .map(|p| {
            let dx = p[0] - init.x;
            let dy = p[1] - init.y;
            [cos * dx + sin * dy, -sin * dx + cos * dy]
        })
        .collect();
    Trajectory::new(points, traj.agent_index)
}

pub fn from_local_frame(traj: &Trajectory, init: &AgentInit) -> Trajectory {
    let (sin, cos) = init.theta.sin_cos();
    let points = traj
        .points
        .iter()
        .map(|p| [init.x + cos * p[0] - sin * p[1], init.y + sin * p[0] + cos * p[1]])
        .collect();
    Trajectory::new(points, traj.agent_index)
}

/// A fitted PCA basis. `basis` rows are orthonormal principal directions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    pub basis: Vec<Vec<f64>>,
    pub explained_variance: Vec<f64>,
    pub residual_bound: f64,
    pub flatten_order: String,
}

/// Fits the top-`k` principal components of the flattened trajectories.
pub fn pca_fit(trajs: &[Trajectory], k: usize) -> Result<PcaModel> {
    if trajs.len() < k || trajs.is_empty() {
        return Err(Error::InsufficientSamples {
            needed: k.max(1),
            got: trajs.len(),
        });
    }
    let dim = trajs[0].points.len() * 2;
    if k == 0 || k > dim {
        return Err(Error::InvalidConfig(format!("cannot fit {k} components in {dim} dimensions")));
    }
    let rows: Vec<Vec<f64>> = trajs.iter().map(Trajectory::flatten).collect();
    if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
        return Err(Error::shape(dim, bad.len()));
    }
    let n = rows.len();
    let mut mean = vec![0.0; dim];
    for r in &rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let centered = DMatrix::from_fn(n, dim, |i, j| rows[i][j] - mean[j]);
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let cov = (centered.transpose() * &centered) / denom;
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut basis = Vec::with_capacity(k);
    let mut explained_variance = Vec::with_capacity(k);
    for &j in order.iter().take(k) {
        let mut row: Vec<f64> = eig.eigenvectors.column(j).iter().copied().collect();
        // Sign convention: the largest-magnitude entry is positive.
        let mut arg = 0;
        for (i, v) in row.iter().enumerate() {
            if v.abs() > row[arg].abs() {
                arg = i;
            }
        }
        if row[arg] < 0.0 {
            row.iter_mut().for_each(|v| *v = -*v);
        }
        basis.push(row);
        explained_variance.push(eig.eigenvalues[j].max(0.0));
    }

    let mut model = PcaModel {
        mean,
        basis,
        explained_variance,
        residual_bound: 0.0,
        flatten_order: FLATTEN_ORDER.to_string(),
    };
    let mut bound: f64 = 0.0;
    for r in &rows {
        let rec = model.decode_flat(&model.encode_flat(r)?)?;
        for (a, b) in rec.iter().zip(r) {
            bound = bound.max((a - b).abs());
        }
    }
    model.residual_bound = bound;
    Ok(model)
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn components(&self) -> usize {
        self.basis.len()
    }

    pub fn encode_flat(&self, flat: &[f64]) -> Result<Vec<f64>> {
        if flat.len() != self.dim() {
            return Err(Error::shape(self.dim(), flat.len()));
        }
        Ok(self
            .basis
            .iter()
            .map(|row| row.iter().zip(flat).zip(&self.mean).map(|((b, x), m)| b * (x - m)).sum())
            .collect())
    }

    pub fn decode_flat(&self, code: &[f64]) -> Result<Vec<f64>> {
        if code.len() != self.components() {
            return Err(Error::shape(self.components(), code.len()));
        }
        let mut out = self.mean.clone();
        for (row, c) in self.basis.iter().zip(code) {
            for (o, b) in out.iter_mut().zip(row) {
                *o += b * c;
            }
        }
        Ok(out)
    }

    pub fn encode(&self, traj: &Trajectory) -> Result<Vec<f64>> {
        self.encode_flat(&traj.flatten())
    }

    pub fn decode(&self, code: &[f64], agent_index: usize) -> Result<Trajectory> {
        Ok(Trajectory::from_flat(&self.decode_flat(code)?, agent_index))
    }
}

/// Holder for an optionally fitted model, as loaded by the pipeline.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatentCodec {
    pub model: Option<PcaModel>,
}

impl LatentCodec {
    pub fn fitted(model: PcaModel) -> Self {
        LatentCodec { model: Some(model) }
    }

    pub fn model(&self) -> Result<&PcaModel> {
        self.model.as_ref().ok_or(Error::ModelNotFitted)
    }

    pub fn encode(&self, traj: &Trajectory) -> Result<Vec<f64>> {
        self.model()?.encode(traj)
    }

    pub fn decode(&self, code: &[f64], agent_index: usize) -> Result<Trajectory> {
        self.model()?.decode(code, agent_index)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self.model()?)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let model: PcaModel = serde_json::from_str(s)?;
        if model.flatten_order != FLATTEN_ORDER {
            return Err(Error::InvalidConfig(format!(
                "unsupported flatten order {}",
                model.flatten_order
            )));
        }
        Ok(LatentCodec::fitted(model))
    }
}

/// Per-component standard deviations used to bring PCA coefficients to unit
/// scale before diffusion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentScale {
    pub std: Vec<f64>,
}

impl LatentScale {
    pub fn from_model(model: &PcaModel) -> Self {
        let top = model.explained_variance.iter().fold(0.0_f64, |m, v| m.max(*v));
        let floor = (top * 1e-12).max(1e-12);
        LatentScale {
            std: model.explained_variance.iter().map(|v| v.max(floor).sqrt()).collect(),
        }
    }

    pub fn identity(k: usize) -> Self {
        LatentScale { std: vec![1.0; k] }
    }

    pub fn apply(&self, code: &[f64]) -> Vec<f64> {
        code.iter().zip(&self.std).map(|(c, s)| c / s).collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.std).map(|(c, s)| c * s).collect()
    }
}

/// Similarity transform taking a scene region into `[-1, 1]²` plus min-max
/// scaling of speed into `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneNormalizer {
    pub center: Point,
    pub half_extent: f64,
    pub speed_min: f64,
    pub speed_max: f64,
}

impl SceneNormalizer {
    /// Normalizer covering the bounding box `[xmin, ymin, xmax, ymax]`.
    /// A degenerate box falls back to a unit half-extent.
    pub fn from_box(b: [f64; 4], speed_min: f64, speed_max: f64) -> Self {
        let center = [(b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0];
        let half = ((b[2] - b[0]) / 2.0).max((b[3] - b[1]) / 2.0);
        SceneNormalizer {
            center,
            half_extent: if half > 0.0 { half } else { 1.0 },
            speed_min,
            speed_max,
        }
    }

    /// Normalizer over the lanes of a map, used when no agents exist yet.
    pub fn from_map(map: &VectorMap, speed_min: f64, speed_max: f64) -> Self {
        SceneNormalizer::from_box(map.lane_extent(), speed_min, speed_max)
    }

    fn speed_span(&self) -> f64 {
        let span = self.speed_max - self.speed_min;
        if span > 0.0 {
            span
        } else {
            1.0
        }
    }

    pub fn point(&self, p: Point) -> Point {
        [
            (p[0] - self.center[0]) / self.half_extent,
            (p[1] - self.center[1]) / self.half_extent,
        ]
    }

    pub fn point_inv(&self, p: Point) -> Point {
        [
            p[0] * self.half_extent + self.center[0],
            p[1] * self.half_extent + self.center[1],
        ]
    }

    pub fn speed(&self, v: f64) -> f64 {
        2.0 * (v - self.speed_min) / self.speed_span() - 1.0
    }

    pub fn speed_inv(&self, v: f64) -> f64 {
        (v + 1.0) / 2.0 * self.speed_span() + self.speed_min
    }

    pub fn agent(&self, a: &AgentInit) -> AgentInit {
        let [x, y] = self.point(a.position());
        AgentInit {
            x,
            y,
            theta: a.theta,
            v: self.speed(a.v),
            c: a.c,
        }
    }

    pub fn agent_inv(&self, a: &AgentInit) -> AgentInit {
        let [x, y] = self.point_inv(a.position());
        AgentInit {
            x,
            y,
            theta: wrap_angle(a.theta),
            v: self.speed_inv(a.v),
            c: a.c,
        }
    }

    pub fn scene(&self, scene: &Scene) -> Scene {
        Scene {
            agents: scene.agents.iter().map(|a| self.agent(a)).collect(),
            map_ref: scene.map_ref,
        }
    }

    pub fn scene_inv(&self, scene: &Scene) -> Scene {
        Scene {
            agents: scene.agents.iter().map(|a| self.agent_inv(a)).collect(),
            map_ref: scene.map_ref,
        }
    }
}

/// Normalizes a scene so the box around its agents maps into `[-1, 1]²`.
/// `speed_bounds` are the training-set speed extremes.
pub fn normalize_scene(scene: &Scene, speed_bounds: (f64, f64)) -> Result<(Scene, SceneNormalizer)> {
    if scene.agents.is_empty() {
        return Err(Error::EmptyScene);
    }
    let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for a in &scene.agents {
        b[0] = b[0].min(a.x);
        b[1] = b[1].min(a.y);
        b[2] = b[2].max(a.x);
        b[3] = b[3].max(a.y);
    }
    let norm = SceneNormalizer::from_box(b, speed_bounds.0, speed_bounds.1);
    Ok((norm.scene(scene), norm))
}

pub fn denormalize_scene(scene: &Scene, norm: &SceneNormalizer) -> Scene {
    norm.scene_inv(scene)
}
