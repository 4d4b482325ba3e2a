//! Fixtures shared by the criterion benches.

use objectness::network::{NetConfig, Tensor};
use objectness::scenegen::{sample_scene, GenConfig, SceneSpec, ShapeLibrary};

/// A desk-scale (64x64, 15 frame) scene with at least two layers.
pub fn desk_scene(seed: u64) -> SceneSpec {
    let mut cfg = GenConfig::desk();
    cfg.layers = [2, 4];
    sample_scene(seed, &cfg, &ShapeLibrary::builtin()).expect("desk config is valid")
}

/// Constant input batch for a network: `batch` windows of 64x64 frames.
pub fn input_batch(cfg: &NetConfig, batch: usize) -> Tensor<f32> {
    Tensor::full(&[batch * cfg.temporal_window, cfg.in_channels, 64, 64], 0.3)
}
