//! Configuration, model assembly, training, checkpoints and dataset plumbing.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod model;
pub mod optim;
pub mod train;

pub use checkpoint::{Checkpoint, HistoryEntry};
pub use config::{DataConfig, ModelConfig, OptimizerConfig, RunConfig, Schedule, SyntheticConfig};
pub use data::{
    load_clip, load_manifest_clips, read_manifest, sample_media, write_manifest, write_suite, ClipTensors, ManifestRecord,
};
pub use eval::{
    config_diff, evaluate, evaluate_clips, evaluate_oracle, export_heatmaps, external_records, model_records, oracle_records,
};
pub use model::Model;
pub use optim::Adam;
pub use train::{resume, total_steps, train, TrainOptions};
