//! Synthetic data, two-stage training, sampling, evaluation and rendering.

pub mod config;
pub mod evaluate;
pub mod render;
pub mod stages;
pub mod synth;

pub use config::{LaneShape, PipelineConfig};
pub use evaluate::evaluate;
pub use render::render_svg;
pub use stages::{
    fit_codec, generate_many, generate_scenario, sample_scene, sample_trajectories, train_init_model,
    train_traj_model, InitModel, Models, NormSpec, TrajModel, TrajSample,
};
pub use synth::{synth_dataset, synth_map, Dataset};
