//! Agent ordering, attention masks and differential attention.

use serde::{Deserialize, Serialize};

use super::tape::{masked_softmax_rows, Mat};
use crate::error::{Error, Result};
use crate::geometry::{dist, Point};
use crate::scene::AgentInit;

/// Left-to-right, then top-to-bottom ordering of agents. Returns the
/// permutation `perm` such that `agents[perm[0]]` comes first.
pub fn canonical_order(agents: &[AgentInit]) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..agents.len()).collect();
    perm.sort_by(|&a, &b| {
        agents[a]
            .x
            .total_cmp(&agents[b].x)
            .then(agents[b].y.total_cmp(&agents[a].y))
            .then(a.cmp(&b))
    });
    perm
}

pub fn apply_order<T: Clone>(items: &[T], perm: &[usize]) -> Vec<T> {
    perm.iter().map(|&i| items[i].clone()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CdbMode {
    Centralized,
    Decentralized,
}

/// Agent-to-agent mask: all-true when centralized, identity when
/// decentralized. Row-major `n × n`.
pub fn cdb_mask(mode: CdbMode, n: usize) -> Vec<bool> {
    (0..n * n)
        .map(|k| match mode {
            CdbMode::Centralized => true,
            CdbMode::Decentralized => k / n == k % n,
        })
        .collect()
}

/// Masks for one forward pass; `true` means the query may attend the key.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMasks {
    pub n_agents: usize,
    pub n_map: usize,
    pub a2a: Vec<bool>,
    pub m2a: Vec<bool>,
}

impl AttentionMasks {
    pub fn new(n_agents: usize, n_map: usize, a2a: Vec<bool>, m2a: Vec<bool>) -> Result<Self> {
        if a2a.len() != n_agents * n_agents {
            return Err(Error::shape(n_agents * n_agents, a2a.len()));
        }
        if m2a.len() != n_agents * n_map {
            return Err(Error::shape(n_agents * n_map, m2a.len()));
        }
        let masks = AttentionMasks {
            n_agents,
            n_map,
            a2a,
            m2a,
        };
        for i in 0..n_agents {
            if !masks.a2a[i * n_agents + i] {
                return Err(Error::InvalidConfig(format!("a2a mask drops self for agent {i}")));
            }
            if n_map > 0 && !masks.m2a[i * n_map..(i + 1) * n_map].iter().any(|&b| b) {
                return Err(Error::InvalidConfig(format!("m2a mask row {i} is empty")));
            }
        }
        Ok(masks)
    }
}

/// Map-to-agent locality mask: each agent sees map tokens within `radius`;
/// rows with none in range fall back to the single nearest token.
pub fn m2a_radius_mask(agents: &[Point], tokens: &[Point], radius: f64) -> Vec<bool> {
    let mut mask = vec![false; agents.len() * tokens.len()];
    for (i, a) in agents.iter().enumerate() {
        let row = &mut mask[i * tokens.len()..(i + 1) * tokens.len()];
        let mut nearest = (0, f64::INFINITY);
        let mut any = false;
        for (j, t) in tokens.iter().enumerate() {
            let d = dist(*a, *t);
            if d <= radius {
                row[j] = true;
                any = true;
            }
            if d < nearest.1 {
                nearest = (j, d);
            }
        }
        if !any && !tokens.is_empty() {
            row[nearest.0] = true;
        }
    }
    mask
}

/// `softmax(q kᵀ / sqrt(d_k) + maskbias) v`
pub fn attention(q: &Mat, k: &Mat, v: &Mat, mask: &[bool]) -> Result<Mat> {
    check_qkv(q, k, v, mask)?;
    let scores = scaled_scores(q, k);
    Ok(masked_softmax_rows(&scores, mask).matmul(v))
}

/// `(softmax(q1 k1ᵀ/√d) − λ softmax(q2 k2ᵀ/√d)) v` with a shared mask.
pub fn diff_attention(
    q1: &Mat,
    k1: &Mat,
    q2: &Mat,
    k2: &Mat,
    v: &Mat,
    lambda: f64,
    mask: &[bool],
) -> Result<Mat> {
    check_qkv(q1, k1, v, mask)?;
    check_qkv(q2, k2, v, mask)?;
    if q1.cols != q2.cols {
        return Err(Error::shape(q1.cols, q2.cols));
    }
    let a1 = masked_softmax_rows(&scaled_scores(q1, k1), mask);
    let a2 = masked_softmax_rows(&scaled_scores(q2, k2), mask);
    let data = a1.data.iter().zip(&a2.data).map(|(x, y)| x - lambda * y).collect();
    Ok(Mat::from_vec(a1.rows, a1.cols, data).matmul(v))
}

fn scaled_scores(q: &Mat, k: &Mat) -> Mat {
    let mut s = q.matmul_t(k);
    let scale = 1.0 / (q.cols as f64).sqrt();
    s.data.iter_mut().for_each(|x| *x *= scale);
    s
}

fn check_qkv(q: &Mat, k: &Mat, v: &Mat, mask: &[bool]) -> Result<()> {
    if q.cols != k.cols {
        return Err(Error::shape(format!("key width {}", q.cols), k.cols));
    }
    if k.rows != v.rows {
        return Err(Error::shape(format!("{} value rows", k.rows), v.rows));
    }
    if mask.len() != q.rows * k.rows {
        return Err(Error::shape(q.rows * k.rows, mask.len()));
    }
    for i in 0..q.rows {
        if !mask[i * k.rows..(i + 1) * k.rows].iter().any(|&b| b) {
            return Err(Error::InvalidConfig(format!("attention mask row {i} is empty")));
        }
    }
    Ok(())
}

/// Sinusoidal embedding of a scalar position into `width` channels.
pub fn sinusoidal(pos: f64, width: usize) -> Vec<f64> {
    (0..width)
        .map(|c| {
            let i = (c / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * i / width as f64);
            if c % 2 == 0 {
                (pos * freq).sin()
            } else {
                (pos * freq).cos()
            }
        })
        .collect()
}
