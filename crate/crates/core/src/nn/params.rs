use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::Mat;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Mat,
}

/// Named parameter matrices in registration order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub params: Vec<Param>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> usize {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        self.params.len() - 1
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn add_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> usize {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
        self.add(name, Mat::from_vec(rows, cols, data))
    }

    pub fn get(&self, i: usize) -> &Mat {
        &self.params[i].value
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Mat {
        &mut self.params[i].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.data.len()).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn zeros_like(&self) -> Grads {
        Grads {
            mats: self
                .params
                .iter()
                .map(|p| Mat::zeros(p.value.rows, p.value.cols))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.data.iter().all(|v| v.is_finite()))
    }

    /// Sets every parameter to zero.
    /// `self = decay * self + (1 - decay) * other`, parameter by parameter.
    pub fn blend(&mut self, other: &ParamStore, decay: f64) {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            for (x, y) in a.value.data.iter_mut().zip(&b.value.data) {
                *x = decay * *x + (1.0 - decay) * y;
            }
        }
    }

    pub fn zero_all(&mut self) {
        for p in &mut self.params {
            p.value.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Gradient buffers mirroring a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    pub mats: Vec<Mat>,
}

impl Grads {
    pub fn accumulate(&mut self, idx: usize, g: &Mat) {
        for (a, b) in self.mats[idx].data.iter_mut().zip(&g.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for m in &mut self.mats {
            m.data.iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn norm(&self) -> f64 {
        self.mats
            .iter()
            .flat_map(|m| m.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Gradient-descent state for one parameter store.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    velocity: Vec<Mat>,
    second: Vec<Mat>,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &ParamStore) -> Self {
        let zeros = params.zeros_like().mats;
        Optimizer {
            config,
            velocity: zeros.clone(),
            second: zeros,
            steps: 0,
        }
    }

    pub fn set_lr(&mut self, new_lr: f64) {
        match &mut self.config {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => *lr = new_lr,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads) {
        self.steps += 1;
        match self.config {
            OptimizerConfig::Sgd { lr, momentum } => {
                for ((p, g), v) in params.params.iter_mut().zip(&grads.mats).zip(&mut self.velocity) {
                    for ((pv, gv), vv) in p.value.data.iter_mut().zip(&g.data).zip(&mut v.data) {
                        *vv = momentum * *vv + gv;
                        *pv -= lr * *vv;
                    }
                }
            }
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => {
                let c1 = 1.0 - beta1.powi(self.steps as i32);
                let c2 = 1.0 - beta2.powi(self.steps as i32);
                for (((p, g), m), s) in params
                    .params
                    .iter_mut()
                    .zip(&grads.mats)
                    .zip(&mut self.velocity)
                    .zip(&mut self.second)
                {
                    for (((pv, gv), mv), sv) in p
                        .value
                        .data
                        .iter_mut()
                        .zip(&g.data)
                        .zip(&mut m.data)
                        .zip(&mut s.data)
                    {
                        *mv = beta1 * *mv + (1.0 - beta1) * gv;
                        *sv = beta2 * *sv + (1.0 - beta2) * gv * gv;
                        *pv -= lr * (*mv / c1) / ((*sv / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Plain gradient descent: `p -= lr * g`.
pub fn sgd_step(params: &mut ParamStore, grads: &Grads, lr: f64) {
    for (p, g) in params.params.iter_mut().zip(&grads.mats) {
        for (pv, gv) in p.value.data.iter_mut().zip(&g.data) {
            *pv -= lr * gv;
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShapeEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// Versioned parameter checkpoint with a shape manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint<C> {
    pub version: u32,
    pub kind: String,
    pub config: C,
    pub manifest: Vec<ShapeEntry>,
    pub params: Vec<Vec<f64>>,
}

impl<C: Clone> Checkpoint<C> {
    pub fn new(kind: &str, config: &C, store: &ParamStore) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            kind: kind.to_string(),
            config: config.clone(),
            manifest: store
                .params
                .iter()
                .map(|p| ShapeEntry {
                    name: p.name.clone(),
                    rows: p.value.rows,
                    cols: p.value.cols,
                })
                .collect(),
            params: store.params.iter().map(|p| p.value.data.clone()).collect(),
        }
    }

    /// Copies the stored values into `store`, which must have the same layout.
    pub fn load_into(&self, kind: &str, store: &mut ParamStore) -> Result<()> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidConfig(format!("checkpoint version {}", self.version)));
        }
        if self.kind != kind {
            return Err(Error::InvalidConfig(format!(
                "checkpoint holds a {} network, expected {kind}",
                self.kind
            )));
        }
        if self.manifest.len() != store.len() || self.params.len() != store.len() {
            return Err(Error::shape(store.len(), self.manifest.len()));
        }
        for ((entry, data), p) in self.manifest.iter().zip(&self.params).zip(&mut store.params) {
            if entry.name != p.name
                || entry.rows != p.value.rows
                || entry.cols != p.value.cols
                || data.len() != entry.rows * entry.cols
            {
                return Err(Error::shape(
                    format!("{} {}x{}", p.name, p.value.rows, p.value.cols),
                    format!("{} {}x{}", entry.name, entry.rows, entry.cols),
                ));
            }
            p.value.data.clone_from(data);
        }
        Ok(())
    }
}
