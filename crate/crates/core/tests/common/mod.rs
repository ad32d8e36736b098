#![allow(dead_code)]

pub mod attention;
pub mod geometry;
pub mod gradients;

use nplf::scene_io::{split_frames, RunConfig, Scene};
use nplf::synth_scenes::{generate_scene, Layout, SceneSpec};

/// Small network and batch sizes so a step runs in milliseconds.
pub fn tiny_config() -> RunConfig {
    RunConfig {
        k_closest: 4,
        n_sample_points: 300,
        feature_dim: 8,
        n_heads: 2,
        pe_bands: 2,
        ray_batch: 32,
        lr_start: 5e-3,
        lr_end: 5e-4,
        total_steps: 50,
        projection_resolution: 16,
        encoder_channels: 4,
        kv_hidden: 16,
        lf_width: 16,
        lf_layers: 3,
        frames_per_step: 2,
        checkpoint_every: 20,
        render_chunk: 256,
        ..RunConfig::default()
    }
}

/// Corridor with few frames, small images and a sparse cloud.
pub fn tiny_spec() -> SceneSpec {
    let mut spec = SceneSpec::preset(Layout::Corridor);
    spec.trajectory.frames = 12;
    spec.width = 32;
    spec.height = 24;
    spec.focal = 24.0;
    spec.points_per_frame = 600;
    spec
}

pub fn tiny_scene(cfg: &RunConfig) -> Scene {
    split_frames(generate_scene(&tiny_spec()).unwrap(), cfg.holdout_fraction, cfg.seed).unwrap()
}

/// Configuration used for the desk-scale overfit and ablation runs.
pub fn desk_config() -> RunConfig {
    RunConfig {
        k_closest: 8,
        n_sample_points: 5000,
        feature_dim: 16,
        n_heads: 4,
        pe_bands: 4,
        ray_batch: 256,
        lr_start: 2e-3,
        lr_end: 2e-4,
        total_steps: 3000,
        projection_resolution: 32,
        encoder_channels: 8,
        kv_hidden: 64,
        lf_width: 64,
        lf_layers: 8,
        frames_per_step: 4,
        ..RunConfig::default()
    }
}
