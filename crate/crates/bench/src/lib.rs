//! Shared fixtures for the benchmarks.

use tmsp_core::features::{embed_text_mock, mock_scene_features, FeatureBundle};
use tmsp_core::model::{InputWidths, ModelConfig, ModelParams};
use tmsp_core::trajectory::{Trajectory, TrajectoryStats, DOF};
use tmsp_core::world::{sample_episode, GenConfig};
use tmsp_core::Tensor;

pub const WIDTHS: InputWidths = InputWidths {
    lambda: 20,
    text: 32,
};

pub fn model_config() -> ModelConfig {
    ModelConfig {
        d_model: 32,
        layers: 1,
        heads: 4,
        ff_dim: 64,
        head_hidden: 32,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

pub fn params(config: &ModelConfig) -> ModelParams<f32> {
    ModelParams::init(config, WIDTHS, 0).expect("valid config")
}

/// Deterministic pseudo-random trajectory with `t` steps.
pub fn trajectory(t: usize) -> Trajectory {
    let data = (0..DOF * t)
        .map(|i| ((i as f64) * 0.618_034).fract() * 2.0 - 1.0)
        .collect();
    Trajectory::new(Tensor::new(&[DOF, t], data).unwrap()).unwrap()
}

pub fn bundles(n: usize) -> Vec<(FeatureBundle, u8)> {
    let gen = GenConfig::default();
    (0..n as u64)
        .map(|seed| {
            let ep = sample_episode(&format!("b{seed}"), seed, &gen).unwrap();
            let bundle = FeatureBundle {
                episode_id: ep.id.clone(),
                h_lambda: mock_scene_features(&ep.scene, WIDTHS.lambda),
                h_txt: embed_text_mock(&ep.instruction, 0, WIDTHS.text).unwrap(),
                trajectory: TrajectoryStats::identity()
                    .normalize(&ep.trajectory, &ep.id)
                    .unwrap(),
            };
            (bundle, ep.label)
        })
        .collect()
}
