//! Checkpoints in the `TAVLO-CK` container: weights, Adam moments, the run
//! config, the step counter and the metric history.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor_io::{RawTensor, TensorContainer, TensorData};

use super::config::RunConfig;
use super::optim::Adam;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub val_ciou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub weights: ParamStore,
    pub optimizer: Adam,
    pub step: u64,
    pub history: Vec<HistoryEntry>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    step: u64,
    adam_t: u64,
    shapes: Vec<(String, Vec<usize>)>,
}

fn bytes(text: &str) -> RawTensor {
    RawTensor::from_bytes(text.as_bytes())
}

fn text(c: &TensorContainer, key: &str) -> Result<String> {
    let raw = c
        .get(key)
        .ok_or_else(|| Error::format("checkpoint", format!("missing entry `{key}`")))?;
    String::from_utf8(raw.as_bytes()?.to_vec()).map_err(|e| Error::format("checkpoint", e.to_string()))
}

impl Checkpoint {
    pub fn to_container(&self) -> TensorContainer {
        let mut c = TensorContainer::new();
        c.insert("config", bytes(&self.config.to_toml_string()));
        let meta = Meta {
            step: self.step,
            adam_t: self.optimizer.t,
            shapes: self.weights.iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect(),
        };
        c.insert("meta", bytes(&serde_json::to_string(&meta).expect("meta serializes")));
        let rows: Vec<f64> = self
            .history
            .iter()
            .flat_map(|h| [h.step as f64, h.epoch as f64, h.loss, h.val_ciou.unwrap_or(f64::NAN)])
            .collect();
        let hist = RawTensor::new([1, 1, self.history.len(), 4], TensorData::F64(rows)).expect("row count matches");
        c.insert("history", hist);
        for (prefix, store) in [("w", &self.weights), ("m", &self.optimizer.m), ("v", &self.optimizer.v)] {
            for (k, v) in store.iter() {
                c.insert(format!("{prefix}/{k}"), RawTensor::from_f64(v));
            }
        }
        c
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        let config = RunConfig::from_toml_str(&text(c, "config")?)?;
        let meta: Meta = serde_json::from_str(&text(c, "meta")?).map_err(|e| Error::format("checkpoint meta", e.to_string()))?;
        let load_store = |prefix: &str| -> Result<ParamStore> {
            let mut store = ParamStore::new();
            for (k, shape) in &meta.shapes {
                let key = format!("{prefix}/{k}");
                let raw = c
                    .get(&key)
                    .ok_or_else(|| Error::format("checkpoint", format!("missing entry `{key}`")))?;
                store.insert(k.clone(), raw.to_f64(shape)?);
            }
            Ok(store)
        };
        let hist = c
            .get("history")
            .ok_or_else(|| Error::format("checkpoint", "missing entry `history`"))?;
        let rows = hist.dims[2];
        let table: Array2<f64> = hist
            .to_f64(&[rows, 4])?
            .into_dimensionality()
            .expect("rank 2");
        let history = table
            .outer_iter()
            .map(|r| HistoryEntry {
                step: r[0] as u64,
                epoch: r[1] as u64,
                loss: r[2],
                val_ciou: (!r[3].is_nan()).then_some(r[3]),
            })
            .collect();
        Ok(Checkpoint {
            config,
            weights: load_store("w")?,
            optimizer: Adam {
                m: load_store("m")?,
                v: load_store("v")?,
                t: meta.adam_t,
            },
            step: meta.step,
            history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&TensorContainer::load(path)?)
    }
}

