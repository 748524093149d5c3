//! Deterministic training loop.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

use super::checkpoint::{Checkpoint, HistoryEntry};
use super::config::RunConfig;
use super::data::ClipTensors;
use super::eval::evaluate_clips;
use super::model::Model;
use super::optim::{clip_global_norm, learning_rate, Adam};

pub const CHECKPOINT_FILE: &str = "checkpoint.ck";
pub const LAST_GOOD_FILE: &str = "checkpoint.last_good.ck";
pub const ABORT_FILE: &str = "abort.json";

/// Extra knobs that are not part of the reproducible config.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Checkpoints, the abort dump and the final checkpoint go here.
    pub out_dir: Option<PathBuf>,
    /// Stop early once this much wall time has passed (breaks determinism).
    pub time_budget_seconds: Option<f64>,
}

#[derive(Serialize)]
struct AbortDump<'a> {
    step: u64,
    epoch: u64,
    batch_clip_ids: Vec<&'a str>,
    message: String,
}

fn steps_per_epoch(n: usize, batch: usize) -> usize {
    if n < 2 {
        0
    } else {
        n / batch.min(n)
    }
}

pub fn total_steps(cfg: &RunConfig, clips: usize) -> usize {
    let total = cfg.optimizer.epochs * steps_per_epoch(clips, cfg.optimizer.batch_size);
    if cfg.optimizer.max_steps > 0 {
        total.min(cfg.optimizer.max_steps)
    } else {
        total
    }
}

fn non_finite(details: &crate::objective::LossOutput, grads: &std::collections::BTreeMap<String, crate::autodiff::Tensor>) -> Option<String> {
    if !details.total.is_finite() {
        return Some(format!("loss is {}", details.total));
    }
    grads
        .iter()
        .find(|(_, g)| g.iter().any(|v| !v.is_finite()))
        .map(|(k, _)| format!("non-finite gradient for `{k}`"))
}

fn abort(out: Option<&Path>, last_good: &Checkpoint, dump: AbortDump<'_>) -> Error {
    if let Some(dir) = out {
        if let Err(e) = last_good.save(&dir.join(LAST_GOOD_FILE)) {
            log::error!("could not save last-good checkpoint: {e}");
        }
        let path = dir.join(ABORT_FILE);
        let text = serde_json::to_string_pretty(&dump).expect("dump serializes");
        if let Err(e) = std::fs::write(&path, text) {
            log::error!("could not write {}: {e}", path.display());
        }
    }
    Error::Numerical {
        location: format!("training step {} (clips {})", dump.step, dump.batch_clip_ids.join(", ")),
        message: dump.message,
    }
}

/// Trains from a fresh initialization. With zero steps the returned
/// checkpoint holds the initial weights and an empty history.
pub fn train(cfg: &RunConfig, train_clips: &[ClipTensors], val_clips: &[ClipTensors], opts: &TrainOptions) -> Result<Checkpoint> {
    cfg.validate()?;
    let model = Model::new(&cfg.model)?;
    let weights = model.init(cfg.optimizer.seed);
    let start = Checkpoint {
        config: cfg.clone(),
        optimizer: Adam::new(&weights),
        weights,
        step: 0,
        history: Vec::new(),
    };
    resume(start, train_clips, val_clips, opts)
}

/// Continues training `ckpt` up to its config's step budget.
pub fn resume(mut ckpt: Checkpoint, train_clips: &[ClipTensors], val_clips: &[ClipTensors], opts: &TrainOptions) -> Result<Checkpoint> {
    let cfg = ckpt.config.clone();
    let model = Model::new(&cfg.model)?;
    model.check_store(&ckpt.weights)?;
    let out = opts.out_dir.as_deref();
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let total = total_steps(&cfg, train_clips.len());
    if total > 0 && train_clips.len() < 2 {
        return Err(Error::EmptySet("training needs at least two clips".into()));
    }
    let batch = cfg.optimizer.batch_size.min(train_clips.len().max(1));
    let per_epoch = steps_per_epoch(train_clips.len(), cfg.optimizer.batch_size).max(1);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.optimizer.seed ^ 0x0bad_5eed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.optimizer.seed ^ 0xd40_0a7);
    let clock = Instant::now();
    let mut order: Vec<usize> = (0..train_clips.len()).collect();
    // Replay the shuffles of epochs already started so a resumed run sees
    // the same batch order.
    let started_epochs = (ckpt.step as usize).div_ceil(per_epoch);
    for _ in 0..started_epochs {
        order.shuffle(&mut order_rng);
    }

    let mut step = ckpt.step as usize;
    'epochs: while step < total {
        let epoch = step / per_epoch;
        if step % per_epoch == 0 {
            order.shuffle(&mut order_rng);
        }
        let within = step % per_epoch;
        for b in within..per_epoch {
            if step >= total {
                break 'epochs;
            }
            if let Some(budget) = opts.time_budget_seconds {
                if clock.elapsed().as_secs_f64() > budget {
                    log::warn!("time budget reached after {step} steps");
                    break 'epochs;
                }
            }
            let idx = &order[b * batch..(b + 1) * batch];
            let clips: Vec<&ClipTensors> = idx.iter().map(|&i| &train_clips[i]).collect();
            let ids = || clips.iter().map(|c| c.clip_id.as_str()).collect::<Vec<_>>();
            let dump = |message: String| AbortDump {
                step: step as u64,
                epoch: epoch as u64,
                batch_clip_ids: ids(),
                message,
            };
            let (details, mut grads) = match model.loss_and_grads(&ckpt.weights, &clips, Some(&mut dropout_rng)) {
                Ok(r) => r,
                Err(Error::Numerical { location, message }) => {
                    return Err(abort(out, &ckpt, dump(format!("{location}: {message}"))));
                }
                Err(e) => return Err(e),
            };
            if let Some(message) = non_finite(&details, &grads) {
                return Err(abort(out, &ckpt, dump(message)));
            }
            clip_global_norm(&mut grads, cfg.optimizer.grad_clip);
            let lr = learning_rate(&cfg.optimizer, step, total);
            let mut next = ckpt.weights.clone();
            let mut adam = ckpt.optimizer.clone();
            adam.step(&mut next, &grads, lr, &cfg.optimizer);
            if next.iter().any(|(_, w)| w.iter().any(|v| !v.is_finite())) {
                return Err(abort(out, &ckpt, dump("update produced non-finite weights".into())));
            }
            ckpt.weights = next;
            ckpt.optimizer = adam;
            step += 1;
            ckpt.step = step as u64;

            let mut entry = HistoryEntry {
                step: step as u64,
                epoch: epoch as u64,
                loss: details.total,
                val_ciou: None,
            };
            let validate = cfg.optimizer.validate_every;
            if validate > 0 && step % validate == 0 && !val_clips.is_empty() {
                match evaluate_clips(&model, &ckpt.weights, val_clips, &cfg.eval) {
                    Ok(report) => entry.val_ciou = report.value(crate::evaluation::TOTAL, "ciou"),
                    Err(e) => log::warn!("validation skipped: {e}"),
                }
            }
            log::info!(
                "step {step}/{total} epoch {epoch} loss {:.5} lr {lr:.2e}{}",
                details.total,
                entry.val_ciou.map(|c| format!(" val_ciou {c:.2}")).unwrap_or_default()
            );
            ckpt.history.push(entry);
            if let (Some(dir), every) = (out, cfg.optimizer.checkpoint_every) {
                if every > 0 && step % every == 0 {
                    ckpt.save(&dir.join(format!("checkpoint_step{step:06}.ck")))?;
                    ckpt.save(&dir.join(CHECKPOINT_FILE))?;
                }
            }
        }
    }
    if let Some(dir) = out {
        ckpt.save(&dir.join(CHECKPOINT_FILE))?;
    }
    Ok(ckpt)
}
