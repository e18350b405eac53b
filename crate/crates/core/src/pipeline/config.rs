use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{make_schedule, NoiseSchedule};
use crate::error::{Error, Result};
use crate::frenet::CandidateConfig;
use crate::metrics::{AgentRadii, HistogramRanges, MetricsConfig};
use crate::nn::denoiser::NetConfig;
use crate::nn::train::{OptimizerKind, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneShape {
    Straight,
    Arc,
    Merge,
}

/// Every tunable of the pipeline as one flat table of keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    // Synthetic data.
    pub n_maps: usize,
    pub scenes_per_map: usize,
    pub agents_min: usize,
    pub agents_max: usize,
    pub lane_shapes: Vec<LaneShape>,
    pub lanes_per_map: usize,
    pub rotate_maps: bool,
    pub lane_length: f64,
    pub lane_gap: f64,
    pub arc_radius_min: f64,
    pub arc_radius_max: f64,
    pub lane_point_spacing: f64,
    pub map_margin: f64,
    pub min_spacing: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    pub heading_noise: f64,
    pub position_noise: f64,
    pub lateral_noise: f64,

    // Diffusion.
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,

    // Networks.
    pub width: usize,
    pub layers: usize,
    pub lambda_init: f64,
    pub m2a_radius: f64,
    pub n_types: usize,
    pub map_token_spacing: f64,

    // Training.
    pub lr: f64,
    pub epochs: usize,
    pub traj_epochs: usize,
    pub batch: usize,
    pub p_decentralized: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub grad_clip: f64,
    pub lr_decay: bool,
    pub ema_decay: f64,

    // Candidates and guidance.
    pub v_grid: Vec<f64>,
    pub d_grid: Vec<f64>,
    pub candidate_horizon: f64,
    pub candidate_dt: f64,
    pub lane_radius: f64,
    pub guidance_strength: f64,

    // Metrics.
    pub offroad_threshold: f64,
    pub vehicle_radius: f64,
    pub hist_bins: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let cand = CandidateConfig::default();
        PipelineConfig {
            n_maps: 4,
            scenes_per_map: 5,
            agents_min: 2,
            agents_max: 5,
            lane_shapes: vec![LaneShape::Straight, LaneShape::Arc, LaneShape::Merge],
            lanes_per_map: 2,
            rotate_maps: true,
            lane_length: 160.0,
            lane_gap: 4.0,
            arc_radius_min: 60.0,
            arc_radius_max: 120.0,
            lane_point_spacing: 2.0,
            map_margin: 40.0,
            min_spacing: 10.0,
            speed_min: 2.0,
            speed_max: 10.0,
            heading_noise: 0.03,
            position_noise: 0.2,
            lateral_noise: 0.3,

            t_max: 100,
            beta_start: 1e-4,
            beta_end: 0.2,

            width: 32,
            layers: 2,
            lambda_init: 0.5,
            m2a_radius: 2.0,
            n_types: 3,
            map_token_spacing: 10.0,

            lr: 2e-3,
            epochs: 100,
            traj_epochs: 100,
            batch: 64,
            p_decentralized: 0.5,
            optimizer: OptimizerKind::Adam,
            momentum: 0.9,
            grad_clip: 1.0,
            lr_decay: true,
            ema_decay: 0.995,

            v_grid: cand.v_grid,
            d_grid: cand.d_grid,
            candidate_horizon: cand.horizon,
            candidate_dt: cand.dt,
            lane_radius: cand.lane_radius,
            guidance_strength: 0.05,

            offroad_threshold: crate::metrics::OFFROAD_THRESHOLD,
            vehicle_radius: crate::metrics::VEHICLE_RADIUS,
            hist_bins: crate::metrics::DEFAULT_BINS,
        }
    }
}

impl PipelineConfig {
    /// Small settings for smoke runs and tests.
    pub fn tiny() -> Self {
        PipelineConfig {
            n_maps: 2,
            scenes_per_map: 3,
            agents_max: 3,
            t_max: 50,
            width: 16,
            layers: 1,
            epochs: 20,
            traj_epochs: 20,
            batch: 4,
            ..PipelineConfig::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_maps == 0 || self.scenes_per_map == 0 {
            return bad("n_maps and scenes_per_map must be positive".into());
        }
        if self.agents_min == 0 || self.agents_min > self.agents_max {
            return bad(format!("need 1 <= agents_min <= agents_max, got {}..{}", self.agents_min, self.agents_max));
        }
        if self.lane_shapes.is_empty() {
            return bad("lane_shapes is empty".into());
        }
        if !(1..=2).contains(&self.lanes_per_map) {
            return bad("lanes_per_map must be 1 or 2".into());
        }
        if self.lane_length < self.speed_max * self.candidate_horizon + 10.0 {
            return bad("lane_length must cover a full-horizon trajectory at speed_max plus 10 m".into());
        }
        if !(self.speed_min >= 0.0 && self.speed_min <= self.speed_max) {
            return bad("need 0 <= speed_min <= speed_max".into());
        }
        if !(self.lane_length > 0.0 && self.lane_point_spacing > 0.0 && self.map_token_spacing > 0.0) {
            return bad("lengths and spacings must be positive".into());
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.p_decentralized) {
            return bad("p_decentralized must lie in [0, 1]".into());
        }
        if self.width == 0 || self.n_types == 0 {
            return bad("width and n_types must be positive".into());
        }
        make_schedule(self.t_max, self.beta_start, self.beta_end)?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.t_max, self.beta_start, self.beta_end)
    }

    pub fn net_config(&self, seed: u64) -> NetConfig {
        NetConfig {
            width: self.width,
            layers: self.layers,
            lambda_init: self.lambda_init,
            m2a_radius: self.m2a_radius,
            n_types: self.n_types,
            ffn_mult: 2,
            seed,
        }
    }

    pub fn train_config(&self, epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            epochs,
            batch: self.batch,
            p_decentralized: self.p_decentralized,
            optimizer: self.optimizer,
            momentum: self.momentum,
            grad_clip: self.grad_clip,
            lr_decay: self.lr_decay,
            ema_decay: self.ema_decay,
            seed,
        }
    }

    pub fn candidate_config(&self) -> CandidateConfig {
        CandidateConfig {
            v_grid: self.v_grid.clone(),
            d_grid: self.d_grid.clone(),
            horizon: self.candidate_horizon,
            dt: self.candidate_dt,
            lane_radius: self.lane_radius,
        }
    }

    pub fn metrics_config(&self) -> MetricsConfig {
        MetricsConfig {
            offroad_threshold: self.offroad_threshold,
            radii: AgentRadii {
                default: self.vehicle_radius,
                ..AgentRadii::default()
            },
            histograms: HistogramRanges {
                bins: self.hist_bins,
                ..HistogramRanges::default()
            },
        }
    }
}
