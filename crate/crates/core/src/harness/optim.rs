//! Adam with optional decoupled weight decay and global-norm clipping.

use std::collections::BTreeMap;

use crate::autodiff::Tensor;
use crate::params::ParamStore;

use super::config::{OptimizerConfig, Schedule};

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub m: ParamStore,
    pub v: ParamStore,
    pub t: u64,
}

impl Adam {
    pub fn new(weights: &ParamStore) -> Self {
        let mut m = ParamStore::new();
        for (k, w) in weights.iter() {
            m.insert(k.clone(), Tensor::zeros(w.raw_dim()));
        }
        Adam { v: m.clone(), m, t: 0 }
    }

    pub fn step(&mut self, weights: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64, cfg: &OptimizerConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (name, w) in weights.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.get_mut(name).expect("moments track weights");
            m.zip_mut_with(g, |m, &g| *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g);
            let v = self.v.get_mut(name).expect("moments track weights");
            v.zip_mut_with(g, |v, &g| *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g);
            let m = self.m.get(name).expect("present");
            let v = self.v.get(name).expect("present");
            ndarray::Zip::from(w).and(m).and(v).for_each(|w, &m, &v| {
                let update = (m / bc1) / ((v / bc2).sqrt() + cfg.epsilon);
                *w -= lr * (update + cfg.weight_decay * *w);
            });
        }
    }
}

pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads.values().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales in place so the global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|x| x * scale);
        }
    }
    norm
}

/// Step size at zero-based `step` of a run with `total` steps.
pub fn learning_rate(cfg: &OptimizerConfig, step: usize, total: usize) -> f64 {
    match cfg.schedule {
        Schedule::Constant => cfg.learning_rate,
        Schedule::WarmupCosine => {
            if step < cfg.warmup_steps {
                return cfg.learning_rate * (step + 1) as f64 / cfg.warmup_steps as f64;
            }
            let span = total.saturating_sub(cfg.warmup_steps).max(1) as f64;
            let progress = ((step - cfg.warmup_steps) as f64 / span).min(1.0);
            cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}
