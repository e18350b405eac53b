//! Training loops for the two denoisers.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::{apply_order, canonical_order, cdb_mask, m2a_radius_mask, AttentionMasks, CdbMode};
use super::denoiser::{InitDenoiser, InitInput, MapTokens, TrajDenoiser, TrajInput, INIT_CHANNELS};
use super::params::{Grads, Optimizer, OptimizerConfig, ParamStore};
use super::tape::Mat;
use crate::codec::{to_local_frame, LatentScale, PcaModel, SceneNormalizer};
use crate::diffusion::{forward_sample, standard_normal, NoiseSchedule};
use crate::error::{Error, Result};
use crate::frenet::{candidates_or_fallback, CandidateConfig};
use crate::geometry::{Point, VectorMap};
use crate::scene::{AgentInit, Scenario, Scene, Trajectory};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Examples per optimizer step; may exceed the dataset size.
    pub batch: usize,
    pub p_decentralized: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Cosine decay of the learning rate to zero over the run.
    pub lr_decay: bool,
    /// Decay of the parameter moving average that replaces the raw weights
    /// after training; 0 disables.
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-3,
            epochs: 100,
            batch: 8,
            p_decentralized: 0.5,
            optimizer: OptimizerKind::Adam,
            momentum: 0.9,
            grad_clip: 1.0,
            lr_decay: true,
            ema_decay: 0.995,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn optimizer_config(&self) -> OptimizerConfig {
        match self.optimizer {
            OptimizerKind::Sgd => OptimizerConfig::Sgd {
                lr: self.lr,
                momentum: self.momentum,
            },
            OptimizerKind::Adam => OptimizerConfig::adam(self.lr),
        }
    }

    /// Optimizer steps per epoch for a dataset of `len` examples.
    pub fn steps_per_epoch(&self, len: usize) -> usize {
        len.div_ceil(self.batch.max(1)).max(1)
    }
}

/// What happened on one example of one step, for instrumentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub epoch: usize,
    pub step: usize,
    pub example: usize,
    pub t: usize,
    pub mode: CdbMode,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss of every epoch.
    pub epoch_loss: Vec<f64>,
    pub steps: usize,
}

pub type StepHook<'a> = &'a mut dyn FnMut(&StepInfo);

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse_with_grad(pred: &Mat, target: &[f64]) -> (f64, Mat) {
    let n = target.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .data
        .iter()
        .zip(target)
        .map(|(p, e)| {
            let r = p - e;
            loss += r * r;
            2.0 * r / n
        })
        .collect();
    (loss / n, Mat::from_vec(pred.rows, pred.cols, grad))
}

fn draw_mode<R: Rng>(rng: &mut R, p_decentralized: f64) -> CdbMode {
    if rng.random::<f64>() < p_decentralized {
        CdbMode::Decentralized
    } else {
        CdbMode::Centralized
    }
}

fn clip(grads: &mut Grads, max_norm: f64) {
    if max_norm > 0.0 {
        let norm = grads.norm();
        if norm > max_norm {
            grads.scale(max_norm / norm);
        }
    }
}

/// Shared epoch/batch driver. `example_step` returns `(loss, t, mode, grads)`.
fn fit<N>(
    net: &mut N,
    store: fn(&mut N) -> &mut ParamStore,
    len: usize,
    cfg: &TrainConfig,
    mut hook: Option<StepHook>,
    mut example_step: impl FnMut(&mut N, usize, &mut ChaCha8Rng) -> Result<(f64, usize, CdbMode, Grads)>,
) -> Result<TrainReport> {
    if len == 0 {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer_config(), store(net));
    let batch = cfg.batch.max(1);
    let per_epoch = cfg.steps_per_epoch(len);
    let mut order: Vec<usize> = (0..len).collect();
    let mut report = TrainReport::default();
    let total_steps = (cfg.epochs * per_epoch).max(1) as f64;
    let mut ema = (cfg.ema_decay > 0.0).then(|| store(net).clone());
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for s in 0..per_epoch {
            let mut total = store(net).zeros_like();
            for b in 0..batch {
                let example = order[(s * batch + b) % len];
                let (loss, t, mode, g) = example_step(net, example, &mut rng)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
                }
                for (i, m) in g.mats.iter().enumerate() {
                    total.accumulate(i, m);
                }
                epoch_loss += loss;
                if let Some(h) = hook.as_deref_mut() {
                    h(&StepInfo {
                        epoch,
                        step: report.steps,
                        example,
                        t,
                        mode,
                        loss,
                    });
                }
            }
            total.scale(1.0 / batch as f64);
            clip(&mut total, cfg.grad_clip);
            if cfg.lr_decay {
                opt.set_lr(cfg.lr * 0.5 * (1.0 + (PI * report.steps as f64 / total_steps).cos()));
            }
            opt.step(store(net), &total);
            report.steps += 1;
            if let Some(avg) = ema.as_mut() {
                // Short warm-up so early steps are not dominated by the init.
                let n = report.steps as f64;
                avg.blend(store(net), cfg.ema_decay.min((1.0 + n) / (10.0 + n)));
            }
        }
        report.epoch_loss.push(epoch_loss / (per_epoch * batch) as f64);
    }
    if let Some(avg) = ema {
        *store(net) = avg;
    }
    if !store(net).is_finite() {
        return Err(Error::NonFinite("parameters after training".into()));
    }
    Ok(report)
}

/// `[x, y, θ/π, v]` of a normalized agent.
pub fn init_features(a: &AgentInit) -> [f64; INIT_CHANNELS] {
    [a.x, a.y, a.theta / PI, a.v]
}

pub fn agent_from_features(f: &[f64], c: u32) -> AgentInit {
    AgentInit::new(f[0], f[1], f[2] * PI, f[3], c)
}

/// Masks for a pass whose agent positions are the first two channels of
/// each row of `x` (row width `stride`).
pub fn masks_for(
    x: &[f64],
    stride: usize,
    map: &MapTokens,
    mode: CdbMode,
    radius: f64,
) -> Result<AttentionMasks> {
    let pos: Vec<Point> = x.chunks_exact(stride).map(|r| [r[0], r[1]]).collect();
    let n = pos.len();
    AttentionMasks::new(
        n,
        map.len(),
        cdb_mask(mode, n),
        m2a_radius_mask(&pos, &map.positions, radius),
    )
}

/// One normalized, canonically ordered training scene.
#[derive(Clone, Debug, PartialEq)]
pub struct InitExample {
    pub x0: Vec<f64>,
    pub types: Vec<u32>,
    pub map: usize,
}

impl InitExample {
    pub fn from_scene(scene: &Scene, norm: &SceneNormalizer) -> Self {
        let agents: Vec<AgentInit> = scene.agents.iter().map(|a| norm.agent(a)).collect();
        let agents = apply_order(&agents, &canonical_order(&agents));
        InitExample {
            x0: agents.iter().flat_map(init_features).collect(),
            types: agents.iter().map(|a| a.c).collect(),
            map: scene.map_ref,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InitDataset {
    pub maps: Vec<MapTokens>,
    pub examples: Vec<InitExample>,
}

/// Minimizes `‖ε − ε_θ(x_t, M, t)‖²` over the dataset.
pub fn train_init(
    net: &mut InitDenoiser,
    data: &InitDataset,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    hook: Option<StepHook>,
) -> Result<TrainReport> {
    let radius = net.config.m2a_radius;
    fit(
        net,
        |n| &mut n.params,
        data.examples.len(),
        cfg,
        hook,
        |net, i, rng| {
            let ex = &data.examples[i];
            let map = data.maps.get(ex.map).ok_or_else(|| Error::InvalidConfig(format!("missing map {}", ex.map)))?;
            let t = rng.random_range(1..=sched.t_max);
            let eps = standard_normal(rng, ex.x0.len());
            let x_t = forward_sample(&ex.x0, t, &eps, sched)?;
            let mode = draw_mode(rng, cfg.p_decentralized);
            let masks = masks_for(&x_t, INIT_CHANNELS, map, mode, radius)?;
            let pred = net.forward_train(&InitInput {
                x_t: &x_t,
                types: &ex.types,
                t,
                map,
                masks: &masks,
            })?;
            let (loss, grad) = mse_with_grad(&pred, &eps);
            Ok((loss, t, mode, net.backward(&grad)?))
        },
    )
}

/// One training scene for the trajectory model: scaled latents, normalized
/// inits and scaled candidate latents, all in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajExample {
    pub z0: Vec<f64>,
    pub inits: Vec<AgentInit>,
    pub candidates: Vec<Vec<Vec<f64>>>,
    pub map: usize,
}

/// Encodes a trajectory in its agent's local frame and scales the code.
pub fn encode_local(traj: &Trajectory, init: &AgentInit, pca: &PcaModel, scale: &LatentScale) -> Result<Vec<f64>> {
    Ok(scale.apply(&pca.encode(&to_local_frame(traj, init))?))
}

/// Scaled candidate latents of one agent (world-frame `init`).
pub fn candidate_latents(
    init: &AgentInit,
    map: &VectorMap,
    cand_cfg: &CandidateConfig,
    pca: &PcaModel,
    scale: &LatentScale,
) -> Result<Vec<Vec<f64>>> {
    candidates_or_fallback(init, map, cand_cfg)?
        .candidates
        .iter()
        .map(|c| encode_local(&Trajectory::new(c.xy.clone(), 0), init, pca, scale))
        .collect()
}

impl TrajExample {
    pub fn from_scenario(
        scenario: &Scenario,
        map: &VectorMap,
        norm: &SceneNormalizer,
        pca: &PcaModel,
        scale: &LatentScale,
        cand_cfg: &CandidateConfig,
    ) -> Result<Self> {
        let agents = &scenario.scene.agents;
        if agents.is_empty() {
            return Err(Error::EmptyScene);
        }
        if scenario.trajectories.len() != agents.len() {
            return Err(Error::shape(agents.len(), scenario.trajectories.len()));
        }
        let perm = canonical_order(&agents.iter().map(|a| norm.agent(a)).collect::<Vec<_>>());
        let mut z0 = Vec::new();
        let mut inits = Vec::new();
        let mut candidates = Vec::new();
        for &i in &perm {
            let a = &agents[i];
            z0.extend(encode_local(&scenario.trajectories[i], a, pca, scale)?);
            inits.push(norm.agent(a));
            candidates.push(candidate_latents(a, map, cand_cfg, pca, scale)?);
        }
        Ok(TrajExample {
            z0,
            inits,
            candidates,
            map: scenario.scene.map_ref,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrajDataset {
    pub maps: Vec<MapTokens>,
    pub examples: Vec<TrajExample>,
}

/// Minimizes `‖ε − ε_φ(τ_z^t, M, x⃗, C_z, t)‖²` over the dataset.
pub fn train_traj(
    net: &mut TrajDenoiser,
    data: &TrajDataset,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    hook: Option<StepHook>,
) -> Result<TrainReport> {
    let radius = net.config.m2a_radius;
    fit(
        net,
        |n| &mut n.params,
        data.examples.len(),
        cfg,
        hook,
        |net, i, rng| {
            let ex = &data.examples[i];
            let map = data.maps.get(ex.map).ok_or_else(|| Error::InvalidConfig(format!("missing map {}", ex.map)))?;
            let t = rng.random_range(1..=sched.t_max);
            let eps = standard_normal(rng, ex.z0.len());
            let z_t = forward_sample(&ex.z0, t, &eps, sched)?;
            let mode = draw_mode(rng, cfg.p_decentralized);
            let pos: Vec<f64> = ex.inits.iter().flat_map(|a| [a.x, a.y]).collect();
            let masks = masks_for(&pos, 2, map, mode, radius)?;
            let pred = net.forward_train(&TrajInput {
                z_t: &z_t,
                inits: &ex.inits,
                t,
                map,
                masks: &masks,
                candidates: &ex.candidates,
            })?;
            let (loss, grad) = mse_with_grad(&pred, &eps);
            Ok((loss, t, mode, net.backward(&grad)?))
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_schedule;
    use crate::nn::denoiser::NetConfig;

    fn dataset() -> InitDataset {
        let positions: Vec<Point> = (0..6).map(|i| [-0.8 + 0.3 * i as f64, 0.0]).collect();
        let map = MapTokens::from_parts(positions, &[0.0; 6], &[0.0; 6], vec![0; 6]);
        InitDataset {
            maps: vec![map],
            examples: vec![InitExample {
                x0: vec![-0.5, 0.0, 0.0, 0.2, 0.4, 0.0, 0.0, -0.6],
                types: vec![0, 0],
                map: 0,
            }],
        }
    }

    fn net() -> InitDenoiser {
        InitDenoiser::new(NetConfig {
            width: 16,
            layers: 1,
            seed: 3,
            ..NetConfig::default()
        })
    }

    #[test]
    fn zero_p_decentralized_always_centralized() {
        let sched = make_schedule(50, 1e-4, 0.2).unwrap();
        let cfg = TrainConfig {
            epochs: 10,
            batch: 4,
            p_decentralized: 0.0,
            ..TrainConfig::default()
        };
        let mut modes = Vec::new();
        let mut hook = |s: &StepInfo| modes.push(s.mode);
        train_init(&mut net(), &dataset(), &sched, &cfg, Some(&mut hook)).unwrap();
        assert_eq!(modes.len(), 40);
        assert!(modes.iter().all(|&m| m == CdbMode::Centralized));

        let mut modes = Vec::new();
        let mut hook = |s: &StepInfo| modes.push(s.mode);
        let cfg = TrainConfig {
            p_decentralized: 1.0,
            ..cfg
        };
        train_init(&mut net(), &dataset(), &sched, &cfg, Some(&mut hook)).unwrap();
        assert!(modes.iter().all(|&m| m == CdbMode::Decentralized));
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let sched = make_schedule(50, 1e-4, 0.2).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            batch: 3,
            ..TrainConfig::default()
        };
        let (mut a, mut b) = (net(), net());
        let ra = train_init(&mut a, &dataset(), &sched, &cfg, None).unwrap();
        let rb = train_init(&mut b, &dataset(), &sched, &cfg, None).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(ra, rb);
        let mut c = net();
        train_init(&mut c, &dataset(), &sched, &TrainConfig { seed: 1, ..cfg }, None).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn single_sample_overfit_halves_loss() {
        let sched = make_schedule(50, 1e-4, 0.2).unwrap();
        let cfg = TrainConfig {
            epochs: 150,
            batch: 16,
            lr: 3e-3,
            ..TrainConfig::default()
        };
        let report = train_init(&mut net(), &dataset(), &sched, &cfg, None).unwrap();
        let first = report.epoch_loss[0];
        let tail = report.epoch_loss[report.epoch_loss.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(tail <= 0.5 * first, "first {first} tail {tail}");
    }

    #[test]
    fn sgd_with_momentum_also_trains() {
        let sched = make_schedule(50, 1e-4, 0.2).unwrap();
        let cfg = TrainConfig {
            epochs: 150,
            batch: 16,
            lr: 0.02,
            optimizer: OptimizerKind::Sgd,
            ..TrainConfig::default()
        };
        let report = train_init(&mut net(), &dataset(), &sched, &cfg, None).unwrap();
        let tail = report.epoch_loss[report.epoch_loss.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(tail <= 0.5 * report.epoch_loss[0]);
    }

    #[test]
    fn empty_dataset_rejected() {
        let sched = make_schedule(10, 1e-4, 0.2).unwrap();
        let mut data = dataset();
        data.examples.clear();
        let r = train_init(&mut net(), &data, &sched, &TrainConfig::default(), None);
        assert!(matches!(r, Err(Error::InsufficientSamples { .. })));
    }
}
