//! Deterministic fixtures shared by the benchmarks.

use ndarray::{Array3, Array5};
use tavlo_core::harness::{ClipTensors, RunConfig};
use tavlo_core::synthetic::{make_suite, ScenarioCounts, SplitFractions};

/// Smooth pseudo-random fill, reproducible without an RNG.
pub fn filled3(shape: (usize, usize, usize), phase: f64) -> Array3<f64> {
    Array3::from_shape_fn(shape, |(a, b, c)| ((a * 131 + b * 17 + c) as f64 * 0.37 + phase).sin())
}

pub fn filled5(shape: (usize, usize, usize, usize, usize), phase: f64) -> Array5<f64> {
    Array5::from_shape_fn(shape, |(a, b, c, d, e)| {
        ((a * 7919 + b * 613 + c * 71 + d * 13 + e) as f64 * 0.23 + phase).cos()
    })
}

/// `n` default-geometry synthetic clips.
pub fn synthetic_clips(cfg: &RunConfig, n: usize) -> Vec<ClipTensors> {
    let per_kind = n.div_ceil(5);
    let suite = make_suite(7, ScenarioCounts::uniform(per_kind), cfg.scene_geometry(), SplitFractions { val: 0.0, test: 0.0 })
        .expect("suite renders");
    suite
        .iter()
        .take(n)
        .map(|c| ClipTensors::from_labeled(c, cfg).expect("clip converts"))
        .collect()
}
