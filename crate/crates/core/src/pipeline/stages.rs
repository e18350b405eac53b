//! Training artifacts and the three generation stages: initial poses,
//! Frenet candidates, trajectories.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::synth::Dataset;
use crate::codec::{from_local_frame, pca_fit, to_local_frame, LatentScale, PcaModel, SceneNormalizer, LATENT_DIM};
use crate::diffusion::{guided_step, sample_loop};
use crate::error::{Error, Result};
use crate::frenet::{candidates_or_fallback, CandidateSet};
use crate::geometry::VectorMap;
use crate::nn::attention::{apply_order, canonical_order, CdbMode};
use crate::nn::denoiser::{InitDenoiser, InitInput, MapTokens, NetConfig, TrajDenoiser, TrajInput, TrajNetConfig, INIT_CHANNELS};
use crate::nn::params::Checkpoint;
use crate::nn::train::{
    agent_from_features, candidate_latents, masks_for, train_init, train_traj, InitDataset, InitExample,
    StepHook, TrainReport, TrajDataset, TrajExample,
};
use crate::scene::{AgentInit, Provenance, Scenario, Scene, Trajectory};

/// Shared normalization settings of a trained model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormSpec {
    pub speed_min: f64,
    pub speed_max: f64,
    pub token_spacing: f64,
}

impl NormSpec {
    pub fn from_dataset(ds: &Dataset, cfg: &PipelineConfig) -> Self {
        let (speed_min, speed_max) = ds.speed_bounds();
        NormSpec {
            speed_min,
            speed_max,
            token_spacing: cfg.map_token_spacing,
        }
    }

    /// Normalization frame of a map: its lane extent maps into `[-1, 1]²`.
    pub fn normalizer(&self, map: &VectorMap) -> SceneNormalizer {
        SceneNormalizer::from_map(map, self.speed_min, self.speed_max)
    }

    pub fn tokens(&self, map: &VectorMap) -> Result<MapTokens> {
        MapTokens::from_map(map, &self.normalizer(map), self.token_spacing)
    }
}

fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    Ok(std::fs::write(path, serde_json::to_string(value)?)?)
}

fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

pub struct InitModel {
    pub net: InitDenoiser,
    pub norm: NormSpec,
}

#[derive(Serialize, Deserialize)]
struct InitModelFile {
    norm: NormSpec,
    checkpoint: Checkpoint<NetConfig>,
}

impl InitModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(
            &InitModelFile {
                norm: self.norm,
                checkpoint: self.net.checkpoint(),
            },
            path,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f: InitModelFile = load_json(path)?;
        Ok(InitModel {
            net: InitDenoiser::from_checkpoint(&f.checkpoint)?,
            norm: f.norm,
        })
    }
}

pub struct TrajModel {
    pub net: TrajDenoiser,
    pub norm: NormSpec,
    pub scale: LatentScale,
}

#[derive(Serialize, Deserialize)]
struct TrajModelFile {
    norm: NormSpec,
    scale: LatentScale,
    checkpoint: Checkpoint<TrajNetConfig>,
}

impl TrajModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(
            &TrajModelFile {
                norm: self.norm,
                scale: self.scale.clone(),
                checkpoint: self.net.checkpoint(),
            },
            path,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f: TrajModelFile = load_json(path)?;
        Ok(TrajModel {
            net: TrajDenoiser::from_checkpoint(&f.checkpoint)?,
            norm: f.norm,
            scale: f.scale,
        })
    }
}

pub fn save_codec(pca: &PcaModel, path: &Path) -> Result<()> {
    save_json(pca, path)
}

pub fn load_codec(path: &Path) -> Result<PcaModel> {
    load_json(path)
}

fn map_tokens(ds: &Dataset, norm: &NormSpec) -> Result<Vec<MapTokens>> {
    ds.maps.iter().map(|m| norm.tokens(m)).collect()
}

pub fn train_init_model(
    ds: &Dataset,
    cfg: &PipelineConfig,
    seed: u64,
    hook: Option<StepHook>,
) -> Result<(InitModel, TrainReport)> {
    let norm = NormSpec::from_dataset(ds, cfg);
    let data = InitDataset {
        maps: map_tokens(ds, &norm)?,
        examples: ds
            .scenarios
            .iter()
            .map(|s| InitExample::from_scene(&s.scene, &norm.normalizer(&ds.maps[s.scene.map_ref])))
            .collect(),
    };
    let mut net = InitDenoiser::new(cfg.net_config(seed));
    let report = train_init(&mut net, &data, &cfg.schedule()?, &cfg.train_config(cfg.epochs, seed), hook)?;
    Ok((InitModel { net, norm }, report))
}

/// PCA over every ground-truth trajectory in its agent's local frame.
pub fn fit_codec(ds: &Dataset) -> Result<PcaModel> {
    let local: Vec<Trajectory> = ds
        .scenarios
        .iter()
        .flat_map(|s| s.scene.agents.iter().zip(&s.trajectories).map(|(a, t)| to_local_frame(t, a)))
        .collect();
    pca_fit(&local, LATENT_DIM)
}

pub fn train_traj_model(
    ds: &Dataset,
    pca: &PcaModel,
    cfg: &PipelineConfig,
    seed: u64,
    hook: Option<StepHook>,
) -> Result<(TrajModel, TrainReport)> {
    let norm = NormSpec::from_dataset(ds, cfg);
    let scale = LatentScale::from_model(pca);
    let cand_cfg = cfg.candidate_config();
    let examples = ds
        .scenarios
        .iter()
        .map(|s| {
            let map = &ds.maps[s.scene.map_ref];
            TrajExample::from_scenario(s, map, &norm.normalizer(map), pca, &scale, &cand_cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let data = TrajDataset {
        maps: map_tokens(ds, &norm)?,
        examples,
    };
    let mut net = TrajDenoiser::new(cfg.net_config(seed), pca.components());
    let report = train_traj(&mut net, &data, &cfg.schedule()?, &cfg.train_config(cfg.traj_epochs, seed), hook)?;
    Ok((TrajModel { net, norm, scale }, report))
}

/// Stage A: samples `n_agents` initial poses on `map`, returned in world
/// units and canonical order.
pub fn sample_scene(
    map: &VectorMap,
    map_ref: usize,
    n_agents: usize,
    model: &InitModel,
    cfg: &PipelineConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Scene> {
    if n_agents < 1 {
        return Err(Error::EmptyScene);
    }
    let norm = model.norm.normalizer(map);
    let tokens = model.norm.tokens(map)?;
    let types = vec![0u32; n_agents];
    let radius = model.net.config.m2a_radius;
    let mut denoiser = |x: &[f64], t: usize| -> Result<Vec<f64>> {
        let masks = masks_for(x, INIT_CHANNELS, &tokens, CdbMode::Centralized, radius)?;
        let out = model.net.forward(&InitInput {
            x_t: x,
            types: &types,
            t,
            map: &tokens,
            masks: &masks,
        })?;
        Ok(out.data)
    };
    let x0 = sample_loop(&mut denoiser, n_agents * INIT_CHANNELS, &cfg.schedule()?, rng, None)?;
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sampled initial poses".into()));
    }
    let agents: Vec<AgentInit> = x0
        .chunks_exact(INIT_CHANNELS)
        .zip(&types)
        .map(|(f, &c)| norm.agent_inv(&agent_from_features(f, c)))
        .collect();
    let agents = apply_order(&agents, &canonical_order(&agents));
    Ok(Scene { agents, map_ref })
}

/// Output of stages B and C for one scene.
#[derive(Clone, Debug)]
pub struct TrajSample {
    pub trajectories: Vec<Trajectory>,
    pub candidates: Vec<CandidateSet>,
    /// Final scaled latents, one row per agent.
    pub latents: Vec<Vec<f64>>,
    pub candidate_latents: Vec<Vec<Vec<f64>>>,
}

impl TrajSample {
    /// Mean over agents of the distance from the sampled latent to the
    /// nearest candidate latent.
    pub fn mean_candidate_distance(&self) -> f64 {
        let n = self.latents.len().max(1) as f64;
        self.latents
            .iter()
            .zip(&self.candidate_latents)
            .map(|(z, cs)| {
                cs.iter()
                    .map(|c| z.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / n
    }
}

/// Stages B and C for a scene in canonical order. With `guidance`, every
/// reverse step pulls each agent's latent toward its nearest candidate.
pub fn sample_trajectories(
    map: &VectorMap,
    scene: &Scene,
    model: &TrajModel,
    pca: &PcaModel,
    cfg: &PipelineConfig,
    rng: &mut ChaCha8Rng,
    guidance: Option<f64>,
) -> Result<TrajSample> {
    let n = scene.agents.len();
    if n == 0 {
        return Err(Error::EmptyScene);
    }
    let cand_cfg = cfg.candidate_config();
    let norm = model.norm.normalizer(map);
    let tokens = model.norm.tokens(map)?;
    let k = pca.components();
    let candidates = scene
        .agents
        .iter()
        .map(|a| candidates_or_fallback(a, map, &cand_cfg))
        .collect::<Result<Vec<_>>>()?;
    let cand_z = scene
        .agents
        .iter()
        .map(|a| candidate_latents(a, map, &cand_cfg, pca, &model.scale))
        .collect::<Result<Vec<_>>>()?;
    let inits: Vec<AgentInit> = scene.agents.iter().map(|a| norm.agent(a)).collect();
    let pos: Vec<f64> = inits.iter().flat_map(|a| [a.x, a.y]).collect();
    let masks = masks_for(&pos, 2, &tokens, CdbMode::Centralized, model.net.config.m2a_radius)?;
    let mut denoiser = |z: &[f64], t: usize| -> Result<Vec<f64>> {
        Ok(model
            .net
            .forward(&TrajInput {
                z_t: z,
                inits: &inits,
                t,
                map: &tokens,
                masks: &masks,
                candidates: &cand_z,
            })?
            .data)
    };
    let mut guide = |z: &mut [f64], _t: usize| -> Result<()> {
        if let Some(s) = guidance {
            for (row, cs) in z.chunks_exact_mut(k).zip(&cand_z) {
                let g = guided_step(row, cs, s)?;
                row.copy_from_slice(&g);
            }
        }
        Ok(())
    };
    let hook: Option<&mut dyn FnMut(&mut [f64], usize) -> Result<()>> = if guidance.is_some() {
        Some(&mut guide)
    } else {
        None
    };
    let z = sample_loop(&mut denoiser, n * k, &cfg.schedule()?, rng, hook)?;
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sampled trajectory latents".into()));
    }
    let latents: Vec<Vec<f64>> = z.chunks_exact(k).map(<[f64]>::to_vec).collect();
    let trajectories = latents
        .iter()
        .zip(&scene.agents)
        .enumerate()
        .map(|(i, (zi, a))| {
            let local = pca.decode(&model.scale.invert(zi), i)?;
            let mut t = from_local_frame(&local, a);
            t.reanchor(a.position());
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajSample {
        trajectories,
        candidates,
        latents,
        candidate_latents: cand_z,
    })
}

/// Trained artifacts needed for end-to-end generation.
pub struct Models<'a> {
    pub init: &'a InitModel,
    pub traj: &'a TrajModel,
    pub pca: &'a PcaModel,
}

/// Full A → B → C generation on one map, a pure function of its inputs.
pub fn generate_scenario(
    map: &VectorMap,
    map_ref: usize,
    n_agents: usize,
    models: &Models,
    cfg: &PipelineConfig,
    seed: u64,
    use_guidance: bool,
) -> Result<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = sample_scene(map, map_ref, n_agents, models.init, cfg, &mut rng)?;
    let guidance = use_guidance.then_some(cfg.guidance_strength);
    let sample = sample_trajectories(map, &scene, models.traj, models.pca, cfg, &mut rng, guidance)?;
    Ok(Scenario {
        scene,
        trajectories: sample.trajectories,
        provenance: Provenance::Generated,
        seed,
    })
}

/// One scenario per seed, generated in parallel and returned in seed order.
pub fn generate_many(
    map: &VectorMap,
    map_ref: usize,
    n_agents: usize,
    models: &Models,
    cfg: &PipelineConfig,
    seeds: &[u64],
    use_guidance: bool,
) -> Result<Vec<Scenario>> {
    seeds
        .par_iter()
        .map(|&s| generate_scenario(map, map_ref, n_agents, models, cfg, s, use_guidance))
        .collect()
}
