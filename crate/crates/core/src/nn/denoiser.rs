//! Noise predictors for the two diffusion stages.
//!
//! Both networks embed one token per agent, then run a stack of pre-norm
//! residual blocks built from differential attention. The initialization
//! network alternates agent self-attention (under the CDB mask) with
//! map-to-agent cross-attention. The trajectory network first lets each agent
//! attend to its own Frenet candidates, then does the same alternation.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::{sinusoidal, AttentionMasks};
use super::params::{Checkpoint, Grads, ParamStore};
use super::tape::{Mat, Tape, Var};
use crate::codec::SceneNormalizer;
use crate::error::{Error, Result};
use crate::geometry::{resample_lane, Point, VectorMap};
use crate::scene::AgentInit;

/// Continuous channels diffused by the initialization model: x, y, θ/π, v.
pub const INIT_CHANNELS: usize = 4;
/// Octaves of the sinusoidal position encoding.
pub const FOURIER_BANDS: usize = 6;
const FOURIER_FEATURES: usize = 4 * FOURIER_BANDS;
/// Per-token map features: x, y, cos h, sin h, curvature, position encoding.
pub const MAP_FEATURES: usize = 5 + FOURIER_FEATURES;
/// Per-agent conditioning features of the trajectory model: x, y, cos θ,
/// sin θ, v, position encoding.
pub const POSE_FEATURES: usize = 5 + FOURIER_FEATURES;
const INIT_INPUT: usize = INIT_CHANNELS + FOURIER_FEATURES;

/// `sin`/`cos` of `2^k π x` and `2^k π y` for every octave `k`. Raw
/// coordinates alone leave a small network unable to resolve lanes a few
/// meters apart.
pub fn fourier_features(p: Point) -> [f64; FOURIER_FEATURES] {
    let mut out = [0.0; FOURIER_FEATURES];
    for k in 0..FOURIER_BANDS {
        let f = PI * (1u32 << k) as f64;
        let (sx, cx) = (f * p[0]).sin_cos();
        let (sy, cy) = (f * p[1]).sin_cos();
        out[4 * k..4 * k + 4].copy_from_slice(&[sx, cx, sy, cy]);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub width: usize,
    pub layers: usize,
    pub lambda_init: f64,
    pub m2a_radius: f64,
    pub n_types: usize,
    pub ffn_mult: usize,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            width: 32,
            layers: 2,
            lambda_init: 0.5,
            m2a_radius: 2.0,
            n_types: 3,
            ffn_mult: 2,
            seed: 0,
        }
    }
}

/// Vectorized map points in scene-normalized coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct MapTokens {
    pub features: Mat,
    pub positions: Vec<Point>,
    pub lane_of: Vec<usize>,
}

impl MapTokens {
    /// Resamples every lane at `spacing` meters and normalizes positions.
    pub fn from_map(map: &VectorMap, norm: &SceneNormalizer, spacing: f64) -> Result<Self> {
        let mut positions = Vec::new();
        let mut headings = Vec::new();
        let mut curvatures = Vec::new();
        let mut lane_of = Vec::new();
        for (li, lane) in map.lanes.iter().enumerate() {
            let pts = resample_lane(lane, spacing);
            let total = lane.length();
            let n = pts.len() - 1;
            for (j, p) in pts.iter().enumerate() {
                let s = total * j as f64 / n as f64;
                let h = lane.heading_at(s);
                let k = curvature_at(lane, s) * norm.half_extent;
                positions.push(norm.point(*p));
                headings.push(h);
                curvatures.push(k);
                lane_of.push(li);
            }
        }
        if positions.is_empty() {
            return Err(Error::InvalidConfig("map has no lanes".into()));
        }
        Ok(MapTokens::from_parts(positions, &headings, &curvatures, lane_of))
    }

    /// Tokens from normalized positions, headings and normalized curvatures.
    pub fn from_parts(positions: Vec<Point>, headings: &[f64], curvatures: &[f64], lane_of: Vec<usize>) -> Self {
        let data = positions
            .iter()
            .zip(headings.iter().zip(curvatures))
            .flat_map(|(q, (h, k))| {
                let mut row = vec![q[0], q[1], h.cos(), h.sin(), k.clamp(-5.0, 5.0)];
                row.extend_from_slice(&fourier_features(*q));
                row
            })
            .collect();
        MapTokens {
            features: Mat::from_vec(positions.len(), MAP_FEATURES, data),
            positions,
            lane_of,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Tokens may only attend to tokens on the same lane.
    pub fn lane_mask(&self) -> Vec<bool> {
        let p = self.len();
        (0..p * p).map(|k| self.lane_of[k / p] == self.lane_of[k % p]).collect()
    }
}

fn curvature_at(lane: &crate::geometry::Lane, s: f64) -> f64 {
    let k = lane
        .cum_s
        .partition_point(|&c| c <= s)
        .clamp(1, lane.len())
        - 1;
    lane.curvature[k]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnKind {
    AgentAgent,
    MapAgent,
    Candidate,
}

/// Effective attention weights `A1 − λ A2` of one block in one pass.
#[derive(Clone, Debug)]
pub struct AttnRecord {
    pub layer: usize,
    pub kind: AttnKind,
    pub weights: Mat,
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: Option<usize>,
}

impl Linear {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, out: usize, bias: bool) -> Self {
        let w = store.add_uniform(format!("{name}.w"), fan_in, out, fan_in, rng);
        let b = bias.then(|| store.add_uniform(format!("{name}.b"), 1, out, fan_in, rng));
        Linear { w, b }
    }

    fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(self.w, store.get(self.w));
        let y = tape.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = tape.param(b, store.get(b));
                tape.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct DiffAttn {
    q1: Linear,
    k1: Linear,
    q2: Linear,
    k2: Linear,
    v: Linear,
    o: Linear,
    lambda: usize,
}

impl DiffAttn {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, width: usize, lambda_init: f64) -> Self {
        let mut lin = |part: &str| Linear::new(store, rng, &format!("{name}.{part}"), width, width, false);
        let (q1, k1, q2, k2, v, o) = (lin("q1"), lin("k1"), lin("q2"), lin("k2"), lin("v"), lin("o"));
        let lambda = store.add(format!("{name}.lambda"), Mat::from_vec(1, 1, vec![lambda_init]));
        DiffAttn {
            q1,
            k1,
            q2,
            k2,
            v,
            o,
            lambda,
        }
    }

    fn apply(&self, tape: &mut Tape, store: &ParamStore, xq: Var, xkv: Var, mask: &[bool]) -> (Var, Var) {
        let scale = 1.0 / (tape.value(xq).cols as f64).sqrt();
        let q1 = self.q1.apply(tape, store, xq);
        let k1 = self.k1.apply(tape, store, xkv);
        let q2 = self.q2.apply(tape, store, xq);
        let k2 = self.k2.apply(tape, store, xkv);
        let v = self.v.apply(tape, store, xkv);
        let s1 = tape.matmul_t(q1, k1);
        let s1 = tape.scale(s1, scale);
        let a1 = tape.softmax(s1, mask);
        let s2 = tape.matmul_t(q2, k2);
        let s2 = tape.scale(s2, scale);
        let a2 = tape.softmax(s2, mask);
        let lambda = tape.param(self.lambda, store.get(self.lambda));
        let a2 = tape.scale_var(a2, lambda);
        let a = tape.sub(a1, a2);
        let ctx = tape.matmul(a, v);
        (self.o.apply(tape, store, ctx), a)
    }
}

#[derive(Clone, Copy, Debug)]
struct Ffn {
    up: Linear,
    down: Linear,
}

impl Ffn {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, width: usize, mult: usize) -> Self {
        Ffn {
            up: Linear::new(store, rng, &format!("{name}.up"), width, width * mult, true),
            down: Linear::new(store, rng, &format!("{name}.down"), width * mult, width, true),
        }
    }

    fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.up.apply(tape, store, x);
        let h = tape.silu(h);
        self.down.apply(tape, store, h)
    }
}

/// Pre-norm residual: `x + f(LN(x))`.
fn residual(tape: &mut Tape, x: Var, f: impl FnOnce(&mut Tape, Var) -> Var) -> Var {
    let n = tape.layer_norm(x);
    let y = f(tape, n);
    tape.add(x, y)
}

/// Per-point projection followed by one self-attention block restricted to
/// points of the same lane.
#[derive(Clone, Copy, Debug)]
struct MapEncoder {
    input: Linear,
    attn: DiffAttn,
}

impl MapEncoder {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &NetConfig) -> Self {
        MapEncoder {
            input: Linear::new(store, rng, &format!("{name}.in"), MAP_FEATURES, cfg.width, true),
            attn: DiffAttn::new(store, rng, &format!("{name}.attn"), cfg.width, cfg.lambda_init),
        }
    }

    /// Returns normalized map keys/values.
    fn apply(&self, tape: &mut Tape, store: &ParamStore, map: &MapTokens) -> Var {
        let f = tape.constant(map.features.clone());
        let m = self.input.apply(tape, store, f);
        let mask = map.lane_mask();
        let m = residual(tape, m, |t, n| self.attn.apply(t, store, n, n, &mask).0);
        tape.layer_norm(m)
    }
}

#[derive(Clone, Copy, Debug)]
struct TimeEmbed {
    lin: Linear,
}

impl TimeEmbed {
    fn apply(&self, tape: &mut Tape, store: &ParamStore, t: usize, width: usize) -> Var {
        let s = tape.constant(Mat::from_vec(1, width, sinusoidal(t as f64, width)));
        let h = self.lin.apply(tape, store, s);
        tape.silu(h)
    }
}

#[derive(Clone, Copy, Debug)]
struct AgentLayer {
    cand: Option<DiffAttn>,
    agents: DiffAttn,
    map: DiffAttn,
    ffn: Ffn,
}

impl AgentLayer {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, l: usize, cfg: &NetConfig, with_cand: bool) -> Self {
        let w = cfg.width;
        let cand = with_cand.then(|| DiffAttn::new(store, rng, &format!("layer{l}.cand"), w, cfg.lambda_init));
        AgentLayer {
            cand,
            agents: DiffAttn::new(store, rng, &format!("layer{l}.a2a"), w, cfg.lambda_init),
            map: DiffAttn::new(store, rng, &format!("layer{l}.m2a"), w, cfg.lambda_init),
            ffn: Ffn::new(store, rng, &format!("layer{l}.ffn"), w, cfg.ffn_mult),
        }
    }
}

struct Recorded {
    tape: Tape,
    out: Var,
}

struct Pass {
    out: Var,
    attn: Vec<(usize, AttnKind, Var)>,
    cand_context: Option<Var>,
}

fn check_len(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::shape(format!("{what} of length {expected}"), got));
    }
    Ok(())
}

fn type_ids(types: &[u32], n_types: usize) -> Result<Vec<usize>> {
    types
        .iter()
        .map(|&c| {
            let c = c as usize;
            if c < n_types {
                Ok(c)
            } else {
                Err(Error::InvalidConfig(format!("agent type {c} >= n_types {n_types}")))
            }
        })
        .collect()
}

fn run_layers(
    tape: &mut Tape,
    store: &ParamStore,
    layers: &[AgentLayer],
    mut h: Var,
    map_kv: Var,
    masks: &AttentionMasks,
    cands: Option<(Var, &[bool])>,
    pass: &mut Pass,
) -> Var {
    for (l, layer) in layers.iter().enumerate() {
        if let (Some(attn), Some((c, cmask))) = (layer.cand, cands) {
            let n = tape.layer_norm(h);
            let (y, a) = attn.apply(tape, store, n, c, cmask);
            if l == 0 {
                pass.cand_context = Some(y);
            }
            pass.attn.push((l, AttnKind::Candidate, a));
            h = tape.add(h, y);
        }
        let n = tape.layer_norm(h);
        let (y, a) = layer.agents.apply(tape, store, n, n, &masks.a2a);
        pass.attn.push((l, AttnKind::AgentAgent, a));
        h = tape.add(h, y);

        let n = tape.layer_norm(h);
        let (y, a) = layer.map.apply(tape, store, n, map_kv, &masks.m2a);
        pass.attn.push((l, AttnKind::MapAgent, a));
        h = tape.add(h, y);

        h = residual(tape, h, |t, n| layer.ffn.apply(t, store, n));
    }
    h
}

fn backward_recorded(record: Option<Recorded>, store: &ParamStore, loss_grad: &Mat) -> Result<Grads> {
    let rec = record.ok_or(Error::GraphNotRecorded)?;
    let out = rec.tape.value(rec.out);
    if out.shape() != loss_grad.shape() {
        return Err(Error::shape(format!("{:?}", out.shape()), format!("{:?}", loss_grad.shape())));
    }
    let mut grads = store.zeros_like();
    for (idx, g) in rec.tape.backward(rec.out, loss_grad) {
        grads.accumulate(idx, &g);
    }
    Ok(grads)
}

fn collect_attn(tape: &Tape, pass: &Pass) -> Vec<AttnRecord> {
    pass.attn
        .iter()
        .map(|&(layer, kind, v)| AttnRecord {
            layer,
            kind,
            weights: tape.value(v).clone(),
        })
        .collect()
}

/// Spread of attention weights across diffusion steps for one block.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttnVariance {
    pub layer: usize,
    pub kind: AttnKind,
    /// Variance over steps of each weight, averaged over all weights.
    pub mean_variance: f64,
}

/// `per_step[s]` holds the records of one forward pass at diffusion step `s`.
/// Blocks are matched by position, so all passes must share one network and
/// one scene.
pub fn attention_variance(per_step: &[Vec<AttnRecord>]) -> Vec<AttnVariance> {
    let Some(first) = per_step.first() else {
        return Vec::new();
    };
    first
        .iter()
        .enumerate()
        .map(|(b, rec)| {
            let n = rec.weights.data.len();
            let steps = per_step.len() as f64;
            let mut total = 0.0;
            for k in 0..n {
                let vals = per_step.iter().map(|r| r[b].weights.data[k]);
                let mean = vals.clone().sum::<f64>() / steps;
                total += vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / steps;
            }
            AttnVariance {
                layer: rec.layer,
                kind: rec.kind,
                mean_variance: if n > 0 { total / n as f64 } else { 0.0 },
            }
        })
        .collect()
}

/// Position indices for the ordering embedding. Rows are assumed to be in
/// canonical order already; a row identical to its predecessor shares its
/// index, so indistinguishable agents stay indistinguishable.
pub fn order_ranks(x_t: &[f64], types: &[u32]) -> Vec<usize> {
    let mut ranks = Vec::with_capacity(types.len());
    for i in 0..types.len() {
        let r = match i {
            0 => 0,
            _ if types[i] == types[i - 1]
                && x_t[i * INIT_CHANNELS..(i + 1) * INIT_CHANNELS]
                    == x_t[(i - 1) * INIT_CHANNELS..i * INIT_CHANNELS] =>
            {
                ranks[i - 1]
            }
            _ => i,
        };
        ranks.push(r);
    }
    ranks
}

/// Inputs of the initialization denoiser for one scene.
pub struct InitInput<'a> {
    /// Row-major `N × 4` noisy channels.
    pub x_t: &'a [f64],
    pub types: &'a [u32],
    pub t: usize,
    pub map: &'a MapTokens,
    pub masks: &'a AttentionMasks,
}

/// Noise predictor for agent initial poses.
pub struct InitDenoiser {
    pub config: NetConfig,
    pub params: ParamStore,
    input: Linear,
    type_table: usize,
    time: TimeEmbed,
    map_enc: MapEncoder,
    layers: Vec<AgentLayer>,
    output: Linear,
    record: Option<Recorded>,
}

impl InitDenoiser {
    pub const KIND: &'static str = "init";

    pub fn new(config: NetConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::default();
        let w = config.width;
        let input = Linear::new(&mut store, &mut rng, "input", INIT_INPUT, w, true);
        let type_table = store.add_uniform("type_embed", config.n_types, w, 1, &mut rng);
        let time = TimeEmbed {
            lin: Linear::new(&mut store, &mut rng, "time", w, w, true),
        };
        let map_enc = MapEncoder::new(&mut store, &mut rng, "map", &config);
        let layers = (0..config.layers)
            .map(|l| AgentLayer::new(&mut store, &mut rng, l, &config, false))
            .collect();
        let output = Linear::new(&mut store, &mut rng, "output", w, INIT_CHANNELS, true);
        InitDenoiser {
            config,
            params: store,
            input,
            type_table,
            time,
            map_enc,
            layers,
            output,
            record: None,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint<NetConfig> {
        Checkpoint::new(Self::KIND, &self.config, &self.params)
    }

    pub fn from_checkpoint(ck: &Checkpoint<NetConfig>) -> Result<Self> {
        let mut net = InitDenoiser::new(ck.config.clone());
        ck.load_into(Self::KIND, &mut net.params)?;
        Ok(net)
    }

    pub fn output_bias_index(&self) -> usize {
        self.output.b.expect("output has a bias")
    }

    fn build(&self, store: &ParamStore, tape: &mut Tape, inp: &InitInput) -> Result<Pass> {
        let n = inp.types.len();
        if n == 0 {
            return Err(Error::EmptyScene);
        }
        check_len("x_t", n * INIT_CHANNELS, inp.x_t.len())?;
        check_len("a2a mask", n * n, inp.masks.a2a.len())?;
        check_len("m2a mask", n * inp.map.len(), inp.masks.m2a.len())?;
        let ids = type_ids(inp.types, self.config.n_types)?;
        let w = self.config.width;

        let feats: Vec<f64> = inp
            .x_t
            .chunks_exact(INIT_CHANNELS)
            .flat_map(|r| r.iter().copied().chain(fourier_features([r[0], r[1]])))
            .collect();
        let x = tape.constant(Mat::from_vec(n, INIT_INPUT, feats));
        let mut h = self.input.apply(tape, store, x);
        let table = tape.param(self.type_table, store.get(self.type_table));
        let te = tape.gather(table, &ids);
        h = tape.add(h, te);
        let pos: Vec<f64> = order_ranks(inp.x_t, inp.types)
            .into_iter()
            .flat_map(|r| sinusoidal(r as f64, w))
            .collect();
        let pos = tape.constant(Mat::from_vec(n, w, pos));
        h = tape.add(h, pos);
        let temb = self.time.apply(tape, store, inp.t, w);
        h = tape.add_row(h, temb);

        let map_kv = self.map_enc.apply(tape, store, inp.map);
        let mut pass = Pass {
            out: h,
            attn: Vec::new(),
            cand_context: None,
        };
        let h = run_layers(tape, store, &self.layers, h, map_kv, inp.masks, None, &mut pass);
        pass.out = self.output.apply(tape, store, h);
        Ok(pass)
    }

    /// Evaluation-only forward pass; returns the `N × 4` noise prediction.
    /// Forward pass with an external parameter set of the same layout.
    pub fn forward_with_params(&self, params: &ParamStore, inp: &InitInput) -> Result<Mat> {
        if params.len() != self.params.len() {
            return Err(Error::shape(self.params.len(), params.len()));
        }
        let mut tape = Tape::new();
        let pass = self.build(params, &mut tape, inp)?;
        Ok(tape.value(pass.out).clone())
    }

    pub fn forward(&self, inp: &InitInput) -> Result<Mat> {
        let mut tape = Tape::new();
        let pass = self.build(&self.params, &mut tape, inp)?;
        Ok(tape.value(pass.out).clone())
    }

    /// Forward pass that records intermediates for [`Self::backward`].
    pub fn forward_train(&mut self, inp: &InitInput) -> Result<Mat> {
        let mut tape = Tape::new();
        let pass = self.build(&self.params, &mut tape, inp)?;
        let out = tape.value(pass.out).clone();
        self.record = Some(Recorded { tape, out: pass.out });
        Ok(out)
    }

    /// Gradients of the loss given `dL/d(eps_pred)`. Consumes the recorded
    /// forward pass.
    pub fn backward(&mut self, loss_grad: &Mat) -> Result<Grads> {
        backward_recorded(self.record.take(), &self.params, loss_grad)
    }

    pub fn attention_maps(&self, inp: &InitInput) -> Result<Vec<AttnRecord>> {
        let mut tape = Tape::new();
        let pass = self.build(&self.params, &mut tape, inp)?;
        Ok(collect_attn(&tape, &pass))
    }
}

/// Inputs of the trajectory denoiser for one scene.
pub struct TrajInput<'a> {
    /// Row-major `N × latent_dim` noisy latents.
    pub z_t: &'a [f64],
    /// Scene-normalized initial poses.
    pub inits: &'a [AgentInit],
    pub t: usize,
    pub map: &'a MapTokens,
    pub masks: &'a AttentionMasks,
    /// Per-agent candidate latents.
    pub candidates: &'a [Vec<Vec<f64>>],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajNetConfig {
    pub net: NetConfig,
    pub latent_dim: usize,
}

/// Noise predictor for trajectory latents.
pub struct TrajDenoiser {
    pub config: NetConfig,
    pub latent_dim: usize,
    pub params: ParamStore,
    input: Linear,
    pose: Linear,
    type_table: usize,
    time: TimeEmbed,
    cand_in: Linear,
    map_enc: MapEncoder,
    layers: Vec<AgentLayer>,
    output: Linear,
    record: Option<Recorded>,
}

pub fn pose_features(a: &AgentInit) -> Vec<f64> {
    let mut f = vec![a.x, a.y, a.theta.cos(), a.theta.sin(), a.v];
    f.extend_from_slice(&fourier_features(a.position()));
    f
}

impl TrajDenoiser {
    pub const KIND: &'static str = "traj";

    pub fn new(config: NetConfig, latent_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::default();
        let w = config.width;
        let input = Linear::new(&mut store, &mut rng, "input", latent_dim, w, true);
        let pose = Linear::new(&mut store, &mut rng, "pose", POSE_FEATURES, w, false);
        let type_table = store.add_uniform("type_embed", config.n_types, w, 1, &mut rng);
        let time = TimeEmbed {
            lin: Linear::new(&mut store, &mut rng, "time", w, w, true),
        };
        let cand_in = Linear::new(&mut store, &mut rng, "cand_in", latent_dim, w, true);
        let map_enc = MapEncoder::new(&mut store, &mut rng, "map", &config);
        let layers = (0..config.layers)
            .map(|l| AgentLayer::new(&mut store, &mut rng, l, &config, true))
            .collect();
        let output = Linear::new(&mut store, &mut rng, "output", w, latent_dim, true);
        TrajDenoiser {
            config,
            latent_dim,
            params: store,
            input,
            pose,
            type_table,
            time,
            cand_in,
            map_enc,
            layers,
            output,
            record: None,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint<TrajNetConfig> {
        let config = TrajNetConfig {
            net: self.config.clone(),
            latent_dim: self.latent_dim,
        };
        Checkpoint::new(Self::KIND, &config, &self.params)
    }

    pub fn from_checkpoint(ck: &Checkpoint<TrajNetConfig>) -> Result<Self> {
        let mut net = TrajDenoiser::new(ck.config.net.clone(), ck.config.latent_dim);
        ck.load_into(Self::KIND, &mut net.params)?;
        Ok(net)
    }

    pub fn input_weight_index(&self) -> usize {
        self.input.w
    }

    pub fn output_weight_index(&self) -> usize {
        self.output.w
    }

    fn build(&self, store: &ParamStore, tape: &mut Tape, inp: &TrajInput) -> Result<Pass> {
        let n = inp.inits.len();
        if n == 0 {
            return Err(Error::EmptyScene);
        }
        let k = self.latent_dim;
        check_len("z_t", n * k, inp.z_t.len())?;
        check_len("candidate sets", n, inp.candidates.len())?;
        check_len("a2a mask", n * n, inp.masks.a2a.len())?;
        check_len("m2a mask", n * inp.map.len(), inp.masks.m2a.len())?;
        let types: Vec<u32> = inp.inits.iter().map(|a| a.c).collect();
        let ids = type_ids(&types, self.config.n_types)?;
        let w = self.config.width;

        // Candidate tokens, with each agent restricted to its own block.
        let total: usize = inp.candidates.iter().map(Vec::len).sum();
        let mut cdata = Vec::with_capacity(total * k);
        let mut owner = Vec::with_capacity(total);
        for (i, set) in inp.candidates.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::EmptyCandidates);
            }
            for c in set {
                check_len("candidate latent", k, c.len())?;
                cdata.extend_from_slice(c);
                owner.push(i);
            }
        }
        let cmask: Vec<bool> = (0..n * total).map(|q| owner[q % total] == q / total).collect();

        let x = tape.constant(Mat::from_vec(n, k, inp.z_t.to_vec()));
        let mut h = self.input.apply(tape, store, x);
        let pose: Vec<f64> = inp.inits.iter().flat_map(pose_features).collect();
        let pose = tape.constant(Mat::from_vec(n, POSE_FEATURES, pose));
        let pe = self.pose.apply(tape, store, pose);
        h = tape.add(h, pe);
        let table = tape.param(self.type_table, store.get(self.type_table));
        let te = tape.gather(table, &ids);
        h = tape.add(h, te);
        let temb = self.time.apply(tape, store, inp.t, w);
        h = tape.add_row(h, temb);

        let c = tape.constant(Mat::from_vec(total, k, cdata));
        let c = self.cand_in.apply(tape, store, c);
        let c = tape.layer_norm(c);
        let map_kv = self.map_enc.apply(tape, store, inp.map);

        let mut pass = Pass {
            out: h,
            attn: Vec::new(),
            cand_context: None,
        };
        let h = run_layers(tape, store, &self.layers, h, map_kv, inp.masks, Some((c, &cmask)), &mut pass);
        pass.out = self.output.apply(tape, store, h);
        Ok(pass)
    }

    /// Forward pass with an external parameter set of the same layout.
    pub fn forward_with_params(&self, params: &ParamStore, inp: &TrajInput) -> Result<Mat> {
        if params.len() != self.params.len() {
            return Err(Error::shape(self.params.len(), params.len()));
        }
        let mut tape = Tape::new();
        let pass = self.build(params, &mut tape, inp)?;
        Ok(tape.value(pass.out).clone())
    }

    pub fn forward(&self, inp: &TrajInput) -> Result<Mat> {
        let mut tape = Tape::new();
        let pass = self.build(&self.params, &mut tape, inp)?;
        Ok(tape.value(pass.out).clone())
    }

    pub fn forward_train(&mut self, inp: &TrajInput) -> Result<Mat> {
        let mut tape = Tape::new();
        let pass = self.build(&self.params, &mut tape, inp)?;
        let out = tape.value(pass.out).clone();
        self.record = Some(Recorded { tape, out: pass.out });
        Ok(out)
    }

    pub fn backward(&mut self, loss_grad: &Mat) -> Result<Grads> {
        backward_recorded(self.record.take(), &self.params, loss_grad)
    }

    /// Output of the first candidate cross-attention block, before any
    /// agent-agent mixing. `None` for a zero-depth network.
    pub fn candidate_context(&self, inp: &TrajInput) -> Result<Option<Mat>> {
        let mut tape = Tape::new();
        let pass = self.build(&self.params, &mut tape, inp)?;
        Ok(pass.cand_context.map(|v| tape.value(v).clone()))
    }

    pub fn attention_maps(&self, inp: &TrajInput) -> Result<Vec<AttnRecord>> {
        let mut tape = Tape::new();
        let pass = self.build(&self.params, &mut tape, inp)?;
        Ok(collect_attn(&tape, &pass))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::attention::{cdb_mask, m2a_radius_mask, CdbMode};
    use crate::nn::gradcheck::check_gradients;

    fn tokens() -> MapTokens {
        let positions: Vec<Point> = (0..8)
            .map(|i| [-0.9 + 0.25 * i as f64, if i < 4 { 0.3 } else { -0.3 }])
            .collect();
        let headings: Vec<f64> = (0..8).map(|i| 0.1 * i as f64).collect();
        MapTokens::from_parts(positions, &headings, &[0.05; 8], (0..8).map(|i| i / 4).collect())
    }

    fn masks(pos: &[Point], map: &MapTokens, mode: CdbMode) -> AttentionMasks {
        let n = pos.len();
        AttentionMasks::new(n, map.len(), cdb_mask(mode, n), m2a_radius_mask(pos, &map.positions, 0.6)).unwrap()
    }

    fn small(width: usize, layers: usize) -> NetConfig {
        NetConfig {
            width,
            layers,
            seed: 7,
            ..NetConfig::default()
        }
    }

    const X_T: [f64; 12] = [-0.5, 0.2, 0.1, -0.3, 0.1, -0.4, -0.7, 0.5, 0.6, 0.3, 0.9, -0.1];
    const TYPES: [u32; 3] = [0, 1, 0];

    fn agent_pos(x: &[f64]) -> Vec<Point> {
        x.chunks(INIT_CHANNELS).map(|r| [r[0], r[1]]).collect()
    }

    fn weights(rows: usize, cols: usize) -> Mat {
        Mat::from_vec(rows, cols, (0..rows * cols).map(|i| ((i * 7919) % 13) as f64 / 6.0 - 1.0).collect())
    }

    fn traj_fixture(k: usize) -> (Vec<f64>, Vec<AgentInit>, Vec<Vec<Vec<f64>>>) {
        let z: Vec<f64> = (0..3 * k).map(|i| ((i * 37) % 11) as f64 / 5.0 - 1.0).collect();
        let inits = vec![
            AgentInit::new(-0.5, 0.3, 0.2, 0.1, 0),
            AgentInit::new(0.1, -0.3, -1.0, -0.5, 2),
            AgentInit::new(0.6, 0.2, 3.0, 0.7, 0),
        ];
        let cands = (0..3)
            .map(|a| {
                (0..a + 2)
                    .map(|j| (0..k).map(|c| ((a * 31 + j * 17 + c * 5) % 9) as f64 / 4.0 - 1.0).collect())
                    .collect()
            })
            .collect();
        (z, inits, cands)
    }

    #[test]
    fn dead_network_outputs_bias() {
        let map = tokens();
        let mut net = InitDenoiser::new(small(8, 2));
        net.params.zero_all();
        let b = net.output_bias_index();
        net.params.get_mut(b).data = vec![0.5, -1.0, 2.0, 0.25];
        let m = masks(&agent_pos(&X_T), &map, CdbMode::Centralized);
        let out = net
            .forward(&InitInput {
                x_t: &X_T,
                types: &TYPES,
                t: 9,
                map: &map,
                masks: &m,
            })
            .unwrap();
        for r in 0..3 {
            assert_eq!(out.row(r), &[0.5, -1.0, 2.0, 0.25]);
        }
    }

    #[test]
    fn decentralized_isolation_and_centralized_coupling() {
        let map = tokens();
        let net = InitDenoiser::new(small(8, 2));
        let mut x2 = X_T;
        x2[4] += 0.3;
        x2[7] -= 0.2;
        for (mode, coupled) in [(CdbMode::Decentralized, false), (CdbMode::Centralized, true)] {
            // Same m2a rows for both inputs so only a2a can couple agents.
            let m = masks(&agent_pos(&X_T), &map, mode);
            let run = |x: &[f64]| {
                net.forward(&InitInput {
                    x_t: x,
                    types: &TYPES,
                    t: 30,
                    map: &map,
                    masks: &m,
                })
                .unwrap()
            };
            let (a, b) = (run(&X_T), run(&x2));
            assert_ne!(a.row(1), b.row(1));
            assert_eq!(a.row(0) != b.row(0) || a.row(2) != b.row(2), coupled);
        }
    }

    #[test]
    fn identical_agents_get_identical_predictions() {
        let map = tokens();
        let net = InitDenoiser::new(small(8, 2));
        let x = [0.1, 0.2, 0.3, 0.4, 0.1, 0.2, 0.3, 0.4];
        let m = masks(&agent_pos(&x), &map, CdbMode::Centralized);
        let out = net
            .forward(&InitInput {
                x_t: &x,
                types: &[1, 1],
                t: 4,
                map: &map,
                masks: &m,
            })
            .unwrap();
        assert_eq!(out.row(0), out.row(1));
    }

    #[test]
    fn shape_errors() {
        let map = tokens();
        let net = InitDenoiser::new(small(8, 1));
        let m = masks(&agent_pos(&X_T), &map, CdbMode::Centralized);
        let r = net.forward(&InitInput {
            x_t: &X_T[..11],
            types: &TYPES,
            t: 1,
            map: &map,
            masks: &m,
        });
        assert!(matches!(r, Err(Error::ShapeMismatch { .. })));
    }

    fn grad_check_init(seed_grad: &Mat) -> (InitDenoiser, Grads) {
        let map = tokens();
        let mut net = InitDenoiser::new(small(8, 2));
        let m = masks(&agent_pos(&X_T), &map, CdbMode::Centralized);
        let inp = InitInput {
            x_t: &X_T,
            types: &TYPES,
            t: 17,
            map: &map,
            masks: &m,
        };
        net.forward_train(&inp).unwrap();
        let g = net.backward(seed_grad).unwrap();
        (net, g)
    }

    #[test]
    fn init_gradients_match_finite_differences() {
        let map = tokens();
        let w = weights(3, INIT_CHANNELS);
        let (net, g) = grad_check_init(&w);
        let m = masks(&agent_pos(&X_T), &map, CdbMode::Centralized);
        let inp = InitInput {
            x_t: &X_T,
            types: &TYPES,
            t: 17,
            map: &map,
            masks: &m,
        };
        let mut store = net.params.clone();
        let report = check_gradients(&mut store, &g, 1e-5, 1e-4, 1e-9, |p| {
            let out = net.forward_with_params(p, &inp).unwrap();
            out.data.iter().zip(&w.data).map(|(a, b)| a * b).sum()
        });
        assert!(report.passed(), "{:?}", &report.failures[..report.failures.len().min(5)]);
    }

    #[test]
    fn unused_parameters_get_zero_gradient_and_grads_are_linear() {
        let w = weights(3, INIT_CHANNELS);
        let (net, g) = grad_check_init(&w);
        // Type 2 never appears in TYPES.
        let table = net.params.index_of("type_embed").unwrap();
        assert!(g.mats[table].row(2).iter().all(|&v| v == 0.0));
        assert!(g.mats[table].row(1).iter().any(|&v| v != 0.0));

        let w2 = Mat::from_vec(3, INIT_CHANNELS, w.data.iter().map(|v| 2.0 * v).collect());
        let (_, g2) = grad_check_init(&w2);
        for (a, b) in g.mats.iter().zip(&g2.mats) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((2.0 * x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }

    #[test]
    fn backward_requires_recorded_forward() {
        let mut net = InitDenoiser::new(small(8, 1));
        assert!(matches!(net.backward(&Mat::zeros(3, 4)), Err(Error::GraphNotRecorded)));
        let (mut net, _) = grad_check_init(&weights(3, 4));
        // The record is consumed by the first backward.
        assert!(matches!(net.backward(&Mat::zeros(3, 4)), Err(Error::GraphNotRecorded)));
    }

    #[test]
    fn traj_gradients_match_finite_differences() {
        let k = 4;
        let map = tokens();
        let (z, inits, cands) = traj_fixture(k);
        let pos: Vec<Point> = inits.iter().map(|a| a.position()).collect();
        let m = masks(&pos, &map, CdbMode::Centralized);
        let inp = TrajInput {
            z_t: &z,
            inits: &inits,
            t: 5,
            map: &map,
            masks: &m,
            candidates: &cands,
        };
        let mut net = TrajDenoiser::new(small(8, 2), k);
        let w = weights(3, k);
        net.forward_train(&inp).unwrap();
        let g = net.backward(&w).unwrap();
        let mut store = net.params.clone();
        let report = check_gradients(&mut store, &g, 1e-5, 1e-4, 1e-9, |p| {
            let out = net.forward_with_params(p, &inp).unwrap();
            out.data.iter().zip(&w.data).map(|(a, b)| a * b).sum()
        });
        assert!(report.passed(), "{:?}", &report.failures[..report.failures.len().min(5)]);
    }

    fn layer_norm_rows(m: &Mat) -> Mat {
        let mut out = m.clone();
        for r in 0..m.rows {
            let row = m.row(r);
            let mean = row.iter().sum::<f64>() / row.len() as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / row.len() as f64;
            for c in 0..m.cols {
                *out.at_mut(r, c) = (m.at(r, c) - mean) / (var + 1e-5).sqrt();
            }
        }
        out
    }

    #[test]
    fn single_candidate_context_is_its_value() {
        let k = 4;
        let map = tokens();
        let (z, inits, _) = traj_fixture(k);
        let cands: Vec<Vec<Vec<f64>>> = (0..3).map(|a| vec![vec![0.3 * a as f64 - 0.2, 0.5, -0.1, 0.8]]).collect();
        let pos: Vec<Point> = inits.iter().map(|a| a.position()).collect();
        let m = masks(&pos, &map, CdbMode::Centralized);
        let net = TrajDenoiser::new(small(8, 1), k);
        let inp = TrajInput {
            z_t: &z,
            inits: &inits,
            t: 5,
            map: &map,
            masks: &m,
            candidates: &cands,
        };
        let ctx = net.candidate_context(&inp).unwrap().unwrap();

        let p = |name: &str| net.params.get(net.params.index_of(name).unwrap()).clone();
        let c = Mat::from_vec(3, k, cands.iter().flatten().flatten().copied().collect());
        let mut e = c.matmul(&p("cand_in.w"));
        for r in 0..3 {
            for col in 0..8 {
                *e.at_mut(r, col) += p("cand_in.b").at(0, col);
            }
        }
        let v = layer_norm_rows(&e).matmul(&p("layer0.cand.v.w"));
        let lambda = p("layer0.cand.lambda").at(0, 0);
        let expected = v.matmul(&p("layer0.cand.o.w"));
        for (a, b) in ctx.data.iter().zip(&expected.data) {
            assert!((a - (1.0 - lambda) * b).abs() < 1e-12);
        }
    }

    #[test]
    fn candidate_context_ignores_other_agents_candidates() {
        let k = 4;
        let map = tokens();
        let (z, inits, cands) = traj_fixture(k);
        let pos: Vec<Point> = inits.iter().map(|a| a.position()).collect();
        let m = masks(&pos, &map, CdbMode::Centralized);
        let net = TrajDenoiser::new(small(8, 2), k);
        let run = |c: &[Vec<Vec<f64>>]| {
            net.candidate_context(&TrajInput {
                z_t: &z,
                inits: &inits,
                t: 5,
                map: &map,
                masks: &m,
                candidates: c,
            })
            .unwrap()
            .unwrap()
        };
        let mut other = cands.clone();
        other[1][0][2] += 1.5;
        other[2].push(vec![0.9; k]);
        let (a, b) = (run(&cands), run(&other));
        assert_eq!(a.row(0), b.row(0));
        assert_ne!(a.row(1), b.row(1));
    }

    #[test]
    fn empty_candidates_rejected() {
        let k = 4;
        let map = tokens();
        let (z, inits, mut cands) = traj_fixture(k);
        cands[1].clear();
        let pos: Vec<Point> = inits.iter().map(|a| a.position()).collect();
        let m = masks(&pos, &map, CdbMode::Centralized);
        let net = TrajDenoiser::new(small(8, 1), k);
        let r = net.forward(&TrajInput {
            z_t: &z,
            inits: &inits,
            t: 5,
            map: &map,
            masks: &m,
            candidates: &cands,
        });
        assert!(matches!(r, Err(Error::EmptyCandidates)));
    }

    #[test]
    fn zero_depth_identity_head_passes_input_through() {
        let k = 10;
        let map = tokens();
        let (z, inits, cands) = traj_fixture(k);
        let pos: Vec<Point> = inits.iter().map(|a| a.position()).collect();
        let m = masks(&pos, &map, CdbMode::Centralized);
        let mut net = TrajDenoiser::new(small(k, 0), k);
        net.params.zero_all();
        *net.params.get_mut(net.input_weight_index()) = Mat::identity(k);
        *net.params.get_mut(net.output_weight_index()) = Mat::identity(k);
        let out = net
            .forward(&TrajInput {
                z_t: &z,
                inits: &inits,
                t: 5,
                map: &map,
                masks: &m,
                candidates: &cands,
            })
            .unwrap();
        assert_eq!(out.data, z);
    }

    #[test]
    fn checkpoint_round_trip() {
        let map = tokens();
        let net = InitDenoiser::new(small(8, 2));
        let json = serde_json::to_string(&net.checkpoint()).unwrap();
        let back = InitDenoiser::from_checkpoint(&serde_json::from_str(&json).unwrap()).unwrap();
        let m = masks(&agent_pos(&X_T), &map, CdbMode::Centralized);
        let inp = InitInput {
            x_t: &X_T,
            types: &TYPES,
            t: 3,
            map: &map,
            masks: &m,
        };
        assert_eq!(net.forward(&inp).unwrap(), back.forward(&inp).unwrap());

        let traj = TrajDenoiser::new(small(8, 1), 4);
        let json = serde_json::to_string(&traj.checkpoint()).unwrap();
        let back = TrajDenoiser::from_checkpoint(&serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(back.params, traj.params);
        assert!(serde_json::from_str::<Checkpoint<NetConfig>>(&json).is_err());
    }

    #[test]
    fn attention_variance_is_zero_for_repeated_pass() {
        let map = tokens();
        let net = InitDenoiser::new(small(8, 2));
        let m = masks(&agent_pos(&X_T), &map, CdbMode::Centralized);
        let maps = |t| {
            net.attention_maps(&InitInput {
                x_t: &X_T,
                types: &TYPES,
                t,
                map: &map,
                masks: &m,
            })
            .unwrap()
        };
        let same = attention_variance(&[maps(5), maps(5)]);
        assert_eq!(same.len(), 4);
        assert!(same.iter().all(|s| s.mean_variance == 0.0));
        let varied = attention_variance(&[maps(1), maps(50), maps(99)]);
        assert!(varied.iter().any(|s| s.mean_variance > 0.0));
    }
}
