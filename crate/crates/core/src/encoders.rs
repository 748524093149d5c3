//! Time-aligned visual and audio encoders plus modality-specific positional
//! encodings.
//!
//! The visual backbone is a strided CNN applied to every frame with shared
//! weights. The audio encoder's first layer spans the full frequency axis and
//! `K_w = floor(W_a / T)` spectrogram columns with horizontal stride `K_w`, so
//! output step `t` only sees the audio that belongs to frame `t`. The
//! remaining audio layers are pointwise, which keeps that alignment exact;
//! context across frames is left to the temporal attention.

use ndarray::{s, Array2, Array3, Array4, ArrayD, Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::media_ingest::{FrameSequence, Spectrogram, LOG_FLOOR};
use crate::params::{normal, zeros, Binding, ParamStore};

const MODULE: &str = "encoders";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PositionalKind {
    #[default]
    Sinusoidal,
    /// Trainable tables initialised from the sinusoidal values.
    Learned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualEncoderConfig {
    pub frame_height: usize,
    pub frame_width: usize,
    /// Power of two; one stride-2 stage per factor of two.
    pub downsample_factor: usize,
    pub feature_dim: usize,
    pub base_channels: usize,
    pub max_channels: usize,
}

impl VisualEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let f = self.downsample_factor;
        if f < 2 || !f.is_power_of_two() {
            return Err(Error::config(MODULE, "downsample_factor", format!("{f} is not a power of two ≥ 2")));
        }
        if self.frame_height % f != 0 || self.frame_height == 0 {
            return Err(Error::config(
                MODULE,
                "frame_height",
                format!("{} is not divisible by downsample factor {f}", self.frame_height),
            ));
        }
        if self.frame_width % f != 0 || self.frame_width == 0 {
            return Err(Error::config(
                MODULE,
                "frame_width",
                format!("{} is not divisible by downsample factor {f}", self.frame_width),
            ));
        }
        if self.feature_dim == 0 {
            return Err(Error::config(MODULE, "feature_dim", "must be positive"));
        }
        if self.base_channels == 0 || self.max_channels < self.base_channels {
            return Err(Error::config(MODULE, "base_channels", "need 0 < base_channels ≤ max_channels"));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.downsample_factor.trailing_zeros() as usize
    }

    pub fn grid(&self) -> (usize, usize) {
        (
            self.frame_height / self.downsample_factor,
            self.frame_width / self.downsample_factor,
        )
    }

    fn stage_channels(&self, stage: usize) -> usize {
        (self.base_channels << stage).min(self.max_channels)
    }
}

/// `T × H × W × D_f` feature map of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatureMap {
    pub values: Array4<f64>,
    pub downsample_factor: usize,
}

/// `T × D_f` audio features of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeatureSeq {
    pub values: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualEncoder {
    pub cfg: VisualEncoderConfig,
}

impl VisualEncoder {
    pub fn new(cfg: VisualEncoderConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(VisualEncoder { cfg })
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let mut cin = 3;
        for stage in 0..self.cfg.stages() {
            let cout = self.cfg.stage_channels(stage);
            let fan_in = (9 * cin) as f64;
            store.insert(format!("visual.conv{stage}.w"), normal(rng, &[3, 3, cin, cout], (2.0 / fan_in).sqrt()));
            store.insert(format!("visual.conv{stage}.b"), zeros(&[cout]));
            cin = cout;
        }
        let d = self.cfg.feature_dim;
        store.insert("visual.proj.w", normal(rng, &[1, 1, cin, d], (1.0 / cin as f64).sqrt()));
        store.insert("visual.proj.b", zeros(&[d]));
    }

    /// `frames`: `N × H_v × W_v × 3` with values in [0, 1];
    /// returns `N × H × W × D_f`.
    pub fn forward(&self, tape: &mut Tape, w: &Binding, frames: Var) -> Result<Var> {
        let shape = tape.shape(frames).to_vec();
        if shape.len() != 4 || shape[3] != 3 {
            return Err(Error::ShapeMismatch(format!("visual input must be N × H × W × 3, got {shape:?}")));
        }
        if shape[1] != self.cfg.frame_height || shape[2] != self.cfg.frame_width {
            return Err(Error::config(
                MODULE,
                "frame_height",
                format!(
                    "frames are {}×{} but the encoder expects {}×{}",
                    shape[1], shape[2], self.cfg.frame_height, self.cfg.frame_width
                ),
            ));
        }
        let centre = tape.constant(ArrayD::from_elem(IxDyn(&shape), -0.5));
        let mut x = tape.add(frames, centre);
        for stage in 0..self.cfg.stages() {
            let cw = w.get(&format!("visual.conv{stage}.w"))?;
            let cb = w.get(&format!("visual.conv{stage}.b"))?;
            x = tape.conv2d(x, cw, cb, (2, 2), (1, 1));
            x = tape.relu(x);
        }
        let pw = w.get("visual.proj.w")?;
        let pb = w.get("visual.proj.b")?;
        Ok(tape.conv2d(x, pw, pb, (1, 1), (0, 0)))
    }

    /// Encodes one clip's frames with fixed weights.
    pub fn encode(&self, store: &ParamStore, frames: &FrameSequence) -> Result<VisualFeatureMap> {
        let mut tape = Tape::new();
        let w = store.bind(&mut tape, false);
        let input = tape.constant(frames.frames.mapv(|v| v as f64).into_dyn());
        let out = self.forward(&mut tape, &w, input)?;
        let values = tape
            .value(out)
            .clone()
            .into_dimensionality()
            .expect("4-D output");
        Ok(VisualFeatureMap {
            values,
            downsample_factor: self.cfg.downsample_factor,
        })
    }
}

/// `(K_w, K_h)` of the first audio layer for a `H_a × W_a` spectrogram cut
/// into `T` segments.
pub fn audio_kernel_dims(w_a: usize, h_a: usize, t: usize) -> Result<(usize, usize)> {
    if t == 0 {
        return Err(Error::InvalidInput("T must be at least 1".into()));
    }
    let k_w = w_a / t;
    if k_w == 0 {
        return Err(Error::InvalidInput(format!(
            "spectrogram has {w_a} time steps for {t} frames; use a smaller hop so W_a ≥ T"
        )));
    }
    Ok((k_w, h_a))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioEncoderConfig {
    pub freq_bins: usize,
    pub time_steps: usize,
    pub frames: usize,
    pub channels: usize,
    pub feature_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioEncoder {
    pub cfg: AudioEncoderConfig,
    pub kernel: (usize, usize),
}

impl AudioEncoder {
    pub fn new(cfg: AudioEncoderConfig) -> Result<Self> {
        if cfg.freq_bins == 0 {
            return Err(Error::config(MODULE, "freq_bins", "must be positive"));
        }
        if cfg.channels == 0 || cfg.feature_dim == 0 {
            return Err(Error::config(MODULE, "channels", "channels and feature_dim must be positive"));
        }
        let kernel = audio_kernel_dims(cfg.time_steps, cfg.freq_bins, cfg.frames)?;
        Ok(AudioEncoder { cfg, kernel })
    }

    pub fn init<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) {
        let (k_w, k_h) = self.kernel;
        let c = self.cfg.channels;
        let d = self.cfg.feature_dim;
        store.insert("audio.conv0.w", normal(rng, &[k_h, k_w, 1, c], (2.0 / (k_h * k_w) as f64).sqrt()));
        store.insert("audio.conv0.b", zeros(&[c]));
        store.insert("audio.conv1.w", normal(rng, &[1, 1, c, c], (2.0 / c as f64).sqrt()));
        store.insert("audio.conv1.b", zeros(&[c]));
        store.insert("audio.proj.w", normal(rng, &[1, 1, c, d], (1.0 / c as f64).sqrt()));
        store.insert("audio.proj.b", zeros(&[d]));
    }

    /// Maps log-magnitudes so the floor sits at 0 and unit magnitude at 1.
    pub fn normalize_input(log_magnitude: f64) -> f64 {
        let floor = LOG_FLOOR.ln();
        (log_magnitude - floor) / -floor
    }

    /// Output of the first (rectangular-kernel) layer, `B × 1 × T × C`,
    /// before the activation.
    pub fn first_layer(&self, tape: &mut Tape, w: &Binding, spectrograms: Var) -> Result<Var> {
        let shape = tape.shape(spectrograms).to_vec();
        if shape.len() != 3 {
            return Err(Error::ShapeMismatch(format!("audio input must be B × H_a × W_a, got {shape:?}")));
        }
        let (h_a, w_a) = (shape[1], shape[2]);
        let (k_w, k_h) = audio_kernel_dims(w_a, h_a, self.cfg.frames)?;
        if (k_w, k_h) != self.kernel {
            return Err(Error::config(
                MODULE,
                "time_steps",
                format!(
                    "spectrogram {h_a}×{w_a} gives kernel {k_h}×{k_w}, encoder was built for {}×{}",
                    self.kernel.1, self.kernel.0
                ),
            ));
        }
        let used = k_w * self.cfg.frames;
        let mut x = spectrograms;
        if used < w_a {
            x = tape.slice_axis(x, 2, 0, used);
        }
        let x = tape.reshape(x, &[shape[0], h_a, used, 1]);
        let cw = w.get("audio.conv0.w")?;
        let cb = w.get("audio.conv0.b")?;
        Ok(tape.conv2d(x, cw, cb, (1, k_w), (0, 0)))
    }

    /// `spectrograms`: `B × H_a × W_a` already normalized; returns `B × T × D_f`.
    pub fn forward(&self, tape: &mut Tape, w: &Binding, spectrograms: Var) -> Result<Var> {
        let b = tape.shape(spectrograms)[0];
        let x = self.first_layer(tape, w, spectrograms)?;
        let x = tape.relu(x);
        let x = tape.conv2d(x, w.get("audio.conv1.w")?, w.get("audio.conv1.b")?, (1, 1), (0, 0));
        let x = tape.relu(x);
        let x = tape.conv2d(x, w.get("audio.proj.w")?, w.get("audio.proj.b")?, (1, 1), (0, 0));
        Ok(tape.reshape(x, &[b, self.cfg.frames, self.cfg.feature_dim]))
    }

    pub fn spectrogram_input(spec: &Spectrogram) -> ArrayD<f64> {
        spec.values.mapv(Self::normalize_input).insert_axis(Axis(0)).into_dyn()
    }

    /// Encodes one clip's spectrogram with fixed weights.
    pub fn encode(&self, store: &ParamStore, spec: &Spectrogram) -> Result<AudioFeatureSeq> {
        let mut tape = Tape::new();
        let w = store.bind(&mut tape, false);
        let input = tape.constant(Self::spectrogram_input(spec));
        let out = self.forward(&mut tape, &w, input)?;
        let values = tape
            .value(out)
            .index_axis(Axis(0), 0)
            .to_owned()
            .into_dimensionality()
            .expect("2-D output");
        Ok(AudioFeatureSeq { values })
    }
}

/// Sinusoidal code for `positions` positions in `dim` channels
/// (`sin` on even channels, `cos` on odd ones).
pub fn sinusoid_table(positions: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((positions, dim), |(p, k)| {
        let rate = 1.0 / 10000f64.powf((2 * (k / 2)) as f64 / dim as f64);
        let angle = p as f64 * rate;
        if k % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Spatial code `H × W × D_s` (identical for every timestamp) and temporal
/// code `T × D_t` shared by both modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalEncodings {
    pub spatial: Array3<f64>,
    pub temporal: Array2<f64>,
}

impl PositionalEncodings {
    /// Row code in the first half of the channels, column code in the rest.
    pub fn sinusoidal(t: usize, h: usize, w: usize, spatial_dim: usize, temporal_dim: usize) -> Self {
        let rows = sinusoid_table(h, spatial_dim / 2);
        let cols = sinusoid_table(w, spatial_dim - spatial_dim / 2);
        let half = spatial_dim / 2;
        let spatial = Array3::from_shape_fn((h, w, spatial_dim), |(x, y, k)| {
            if k < half {
                rows[[x, k]]
            } else {
                cols[[y, k - half]]
            }
        });
        PositionalEncodings {
            spatial,
            temporal: sinusoid_table(t, temporal_dim),
        }
    }

    pub fn init_learned(&self, store: &mut ParamStore) {
        store.insert("pos.spatial", self.spatial.clone().into_dyn());
        store.insert("pos.temporal", self.temporal.clone().into_dyn());
    }

    /// Reads the tables from `store` when they were trained.
    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let spatial = store
            .get("pos.spatial")?
            .clone()
            .into_dimensionality()
            .map_err(|_| Error::ShapeMismatch("pos.spatial must be H × W × D_s".into()))?;
        let temporal = store
            .get("pos.temporal")?
            .clone()
            .into_dimensionality()
            .map_err(|_| Error::ShapeMismatch("pos.temporal must be T × D_t".into()))?;
        Ok(PositionalEncodings { spatial, temporal })
    }
}

/// Where the positional tables live on a tape.
#[derive(Debug, Clone, Copy)]
pub struct PositionalVars {
    pub spatial: Var,
    pub temporal: Var,
}

impl PositionalVars {
    pub fn fixed(tape: &mut Tape, pos: &PositionalEncodings) -> Self {
        PositionalVars {
            spatial: tape.constant(pos.spatial.clone().into_dyn()),
            temporal: tape.constant(pos.temporal.clone().into_dyn()),
        }
    }

    pub fn learned(w: &Binding) -> Result<Self> {
        Ok(PositionalVars {
            spatial: w.get("pos.spatial")?,
            temporal: w.get("pos.temporal")?,
        })
    }
}

/// Batched positional step: `v` is `B × T × H × W × D_f`, `a` is `B × T × D_f`.
/// Returns `(ṽ, ã)` with last axis `D_f + D_t`.
pub fn apply_positional_vars(tape: &mut Tape, v: Var, a: Var, pos: PositionalVars) -> Result<(Var, Var)> {
    let vs = tape.shape(v).to_vec();
    let as_ = tape.shape(a).to_vec();
    let ss = tape.shape(pos.spatial).to_vec();
    let ts = tape.shape(pos.temporal).to_vec();
    if vs.len() != 5 || as_.len() != 3 {
        return Err(Error::ShapeMismatch("expected B × T × H × W × D_f visual and B × T × D_f audio".into()));
    }
    let (b, t, h, w, d_f) = (vs[0], vs[1], vs[2], vs[3], vs[4]);
    if ss != [h, w, d_f] {
        return Err(Error::config(
            MODULE,
            "spatial_dim",
            format!("spatial code {ss:?} must be {:?} (D_s = D_f)", [h, w, d_f]),
        ));
    }
    if as_ != [b, t, d_f] {
        return Err(Error::config(MODULE, "feature_dim", format!("audio {as_:?} vs visual {vs:?}")));
    }
    if ts.len() != 2 || ts[0] != t {
        return Err(Error::config(MODULE, "temporal_dim", format!("temporal code {ts:?} must have {t} rows")));
    }
    let d_t = ts[1];

    let spatial = tape.reshape(pos.spatial, &[1, 1, h, w, d_f]);
    let spatial = tape.broadcast_to(spatial, &vs);
    let v_pos = tape.add(v, spatial);
    let temporal_v = tape.reshape(pos.temporal, &[1, t, 1, 1, d_t]);
    let temporal_v = tape.broadcast_to(temporal_v, &[b, t, h, w, d_t]);
    let v_tilde = tape.concat(&[v_pos, temporal_v], 4);
    let temporal_a = tape.reshape(pos.temporal, &[1, t, d_t]);
    let temporal_a = tape.broadcast_to(temporal_a, &[b, t, d_t]);
    let a_tilde = tape.concat(&[a, temporal_a], 2);
    Ok((v_tilde, a_tilde))
}

/// `ṽ`: `T × H × W × D`, `ã`: `T × D`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPair {
    pub v_tilde: Array4<f64>,
    pub a_tilde: Array2<f64>,
}

impl EncodedPair {
    pub fn dim(&self) -> usize {
        self.a_tilde.ncols()
    }
}

/// Single-clip form of [`apply_positional_vars`].
pub fn apply_positional(v: &VisualFeatureMap, a: &AudioFeatureSeq, pos: &PositionalEncodings) -> Result<EncodedPair> {
    let mut tape = Tape::new();
    let vv = tape.constant(v.values.clone().insert_axis(Axis(0)).into_dyn());
    let av = tape.constant(a.values.clone().insert_axis(Axis(0)).into_dyn());
    let pv = PositionalVars::fixed(&mut tape, pos);
    let (vt, at) = apply_positional_vars(&mut tape, vv, av, pv)?;
    Ok(EncodedPair {
        v_tilde: tape
            .value(vt)
            .index_axis(Axis(0), 0)
            .to_owned()
            .into_dimensionality()
            .unwrap(),
        a_tilde: tape
            .value(at)
            .index_axis(Axis(0), 0)
            .to_owned()
            .into_dimensionality()
            .unwrap(),
    })
}

/// Strips the temporal channels from `ã`.
pub fn strip_temporal(pair: &EncodedPair, feature_dim: usize) -> Array2<f64> {
    pair.a_tilde.slice(s![.., ..feature_dim]).to_owned()
}
