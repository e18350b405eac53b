//! Minimal neural-network stack: a reverse-mode tape over dense matrices,
//! differential attention and the two denoisers built on it.

pub mod attention;
pub mod denoiser;
pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod train;

pub use attention::{canonical_order, cdb_mask, AttentionMasks, CdbMode};
pub use denoiser::{InitDenoiser, MapTokens, NetConfig, TrajDenoiser};
pub use params::{Grads, Optimizer, OptimizerConfig, ParamStore};
pub use tape::{Mat, Tape, Var};
