#![allow(dead_code)]

pub mod criteria;
pub mod oracles;

use ndarray::{Array2, Array3, Array4, Array5, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use tavlo_core::evaluation::EvalRecord;
use tavlo_core::harness::RunConfig;
use tavlo_core::synthetic::Scenario;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.sample(StandardNormal))
}

pub fn randn3(rng: &mut ChaCha8Rng, s: (usize, usize, usize)) -> Array3<f64> {
    Array3::from_shape_simple_fn(s, || rng.sample(StandardNormal))
}

pub fn randn4(rng: &mut ChaCha8Rng, s: (usize, usize, usize, usize)) -> Array4<f64> {
    Array4::from_shape_simple_fn(s, || rng.sample(StandardNormal))
}

pub fn randn5(rng: &mut ChaCha8Rng, s: (usize, usize, usize, usize, usize)) -> Array5<f64> {
    Array5::from_shape_simple_fn(s, || rng.sample(StandardNormal))
}

pub fn uniform2(rng: &mut ChaCha8Rng, s: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(s, || rng.gen::<f64>())
}

/// Random axis-aligned non-empty rectangle mask.
pub fn random_box(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array2<bool> {
    let r0 = rng.gen_range(0..h);
    let c0 = rng.gen_range(0..w);
    let r1 = rng.gen_range(r0 + 1..=h);
    let c1 = rng.gen_range(c0 + 1..=w);
    Array2::from_shape_fn((h, w), |(r, c)| r >= r0 && r < r1 && c >= c0 && c < c1)
}

pub fn record(clip: &str, frame: usize, heatmap: Array2<f64>, gt: Array2<bool>, tags: &[Scenario], cross: bool) -> EvalRecord {
    EvalRecord {
        clip_id: clip.into(),
        frame_index: frame,
        heatmap,
        gt,
        tags: tags.iter().copied().collect(),
        cross_event: cross,
    }
}

/// A small but complete model geometry for fast end-to-end runs:
/// T = 4, 32×32 frames (2×2 grid), D = 24.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.frames = 4;
    cfg.model.frame_height = 32;
    cfg.model.frame_width = 32;
    cfg.model.feature_dim = 16;
    cfg.model.temporal_dim = 8;
    cfg.model.visual_base_channels = 8;
    cfg.model.visual_max_channels = 16;
    cfg.model.audio_channels = 16;
    cfg.model.freq_bins = 32;
    cfg.model.time_steps = 64;
    cfg.model.depth = 1;
    cfg.model.heads = 2;
    cfg.optimizer.batch_size = 4;
    cfg.optimizer.warmup_steps = 2;
    cfg.validate().expect("tiny config is valid");
    cfg
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
