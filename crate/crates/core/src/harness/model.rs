//! Encoders, positional codes, AST stack and objective wired together.

use ndarray::{s, Array2, Array3, Array4, ArrayD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ast_attention::{ast_forward_var, build_joint_var, init_weights, split_output_var, AstConfig, DropoutCtx};
use crate::autodiff::{Tape, Var};
use crate::encoders::{apply_positional_vars, AudioEncoder, PositionalEncodings, PositionalKind, PositionalVars, VisualEncoder};
use crate::error::{Error, Result};
use crate::objective::{localization_map, loss_on_tape, LocalizationMap, LossOutput};
use crate::params::{Binding, ParamStore};

use super::config::ModelConfig;
use super::data::ClipTensors;

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub visual: VisualEncoder,
    pub audio: AudioEncoder,
    pub ast: AstConfig,
    fixed_positional: PositionalEncodings,
}

/// Final representations: audio `B × T × D`, visual `B × T × H·W × D`.
pub struct ForwardVars {
    pub audio: Var,
    pub visual: Var,
}

impl Model {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (h, w) = cfg.grid();
        Ok(Model {
            cfg: cfg.clone(),
            visual: VisualEncoder::new(cfg.visual())?,
            audio: AudioEncoder::new(cfg.audio())?,
            ast: cfg.ast(),
            fixed_positional: PositionalEncodings::sinusoidal(cfg.frames, h, w, cfg.feature_dim, cfg.temporal_dim),
        })
    }

    pub fn init(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.visual.init(&mut store, &mut rng);
        self.audio.init(&mut store, &mut rng);
        init_weights(&mut store, &self.ast, self.cfg.dim(), &mut rng);
        if self.cfg.positional == PositionalKind::Learned {
            self.fixed_positional.init_learned(&mut store);
        }
        store
    }

    /// Checks that `store` holds exactly the weights this model expects.
    pub fn check_store(&self, store: &ParamStore) -> Result<()> {
        let reference = self.init(0);
        for (name, value) in reference.iter() {
            let got = store
                .get(name)
                .map_err(|_| Error::ShapeMismatch(format!("checkpoint lacks weight `{name}` required by the config")))?;
            if got.shape() != value.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "weight `{name}`: checkpoint {:?} vs config {:?}",
                    got.shape(),
                    value.shape()
                )));
            }
        }
        if store.len() != reference.len() {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint has {} weights, config expects {}",
                store.len(),
                reference.len()
            )));
        }
        Ok(())
    }

    /// `frames`: `B·T × H_v × W_v × 3`; `spectrograms`: `B × H_a × W_a`, normalized.
    pub fn forward(
        &self,
        tape: &mut Tape,
        w: &Binding,
        frames: Var,
        spectrograms: Var,
        drop: &mut DropoutCtx<'_>,
    ) -> Result<ForwardVars> {
        let b = tape.shape(spectrograms)[0];
        let t = self.cfg.frames;
        if tape.shape(frames)[0] != b * t {
            return Err(Error::ShapeMismatch(format!(
                "{} frames for {b} clips of {t} frames",
                tape.shape(frames)[0]
            )));
        }
        let (h, wd) = self.cfg.grid();
        let d_f = self.cfg.feature_dim;
        let v = self.visual.forward(tape, w, frames)?;
        let v = tape.reshape(v, &[b, t, h, wd, d_f]);
        let a = self.audio.forward(tape, w, spectrograms)?;
        let pos = match self.cfg.positional {
            PositionalKind::Sinusoidal => PositionalVars::fixed(tape, &self.fixed_positional),
            PositionalKind::Learned => PositionalVars::learned(w)?,
        };
        let (v_tilde, a_tilde) = apply_positional_vars(tape, v, a, pos)?;
        let z0 = build_joint_var(tape, a_tilde, v_tilde);
        let z = ast_forward_var(tape, w, &self.ast, z0, drop)?;
        let (audio, visual) = split_output_var(tape, z);
        Ok(ForwardVars { audio, visual })
    }

    /// Stacks clips into tape inputs.
    pub fn batch_inputs(&self, clips: &[&ClipTensors]) -> Result<(ArrayD<f64>, ArrayD<f64>)> {
        let t = self.cfg.frames;
        let (hv, wv) = (self.cfg.frame_height, self.cfg.frame_width);
        let (ha, wa) = (self.cfg.freq_bins, self.cfg.time_steps);
        let mut frames = ArrayD::zeros(IxDyn(&[clips.len() * t, hv, wv, 3]));
        let mut specs = ArrayD::zeros(IxDyn(&[clips.len(), ha, wa]));
        for (i, clip) in clips.iter().enumerate() {
            if clip.frames.dim() != (t, hv, wv, 3) || clip.spectrogram.dim() != (ha, wa) {
                return Err(Error::ShapeMismatch(format!(
                    "clip `{}` has frames {:?} and spectrogram {:?}; config expects ({t}, {hv}, {wv}, 3) and ({ha}, {wa})",
                    clip.clip_id,
                    clip.frames.dim(),
                    clip.spectrogram.dim()
                )));
            }
            frames
                .slice_mut(s![i * t..(i + 1) * t, .., .., ..])
                .assign(&clip.frames.mapv(|v| v as f64));
            specs.index_axis_mut(Axis(0), i).assign(&clip.spectrogram);
        }
        Ok((frames, specs))
    }

    /// One loss evaluation with gradients for every weight.
    pub fn loss_and_grads(
        &self,
        store: &ParamStore,
        clips: &[&ClipTensors],
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(LossOutput, std::collections::BTreeMap<String, ArrayD<f64>>)> {
        let (frames, specs) = self.batch_inputs(clips)?;
        let mut tape = Tape::new();
        let w = store.bind(&mut tape, true);
        let fv = tape.constant(frames);
        let sv = tape.constant(specs);
        let mut drop = DropoutCtx {
            rate: if dropout_rng.is_some() { self.ast.dropout } else { 0.0 },
            rng: dropout_rng,
        };
        let out = self.forward(&mut tape, &w, fv, sv, &mut drop)?;
        let (loss, details) = loss_on_tape(&mut tape, out.audio, out.visual, &self.cfg.loss())?;
        let mut grads = tape.backward(loss);
        Ok((details, w.gradients(store, &mut grads)))
    }

    /// Final representations of a batch without dropout:
    /// audio `B × T × D`, visual `B × T × H × W × D`.
    pub fn represent(&self, store: &ParamStore, clips: &[&ClipTensors]) -> Result<(Array3<f64>, ndarray::Array5<f64>)> {
        let (frames, specs) = self.batch_inputs(clips)?;
        let mut tape = Tape::new();
        let w = store.bind(&mut tape, false);
        let fv = tape.constant(frames);
        let sv = tape.constant(specs);
        let out = self.forward(&mut tape, &w, fv, sv, &mut DropoutCtx::eval())?;
        let (h, wd) = self.cfg.grid();
        let b = clips.len();
        let t = self.cfg.frames;
        let d = self.cfg.dim();
        let audio = tape.value(out.audio).clone().into_dimensionality().expect("3-D audio");
        let visual = tape
            .value(out.visual)
            .to_owned()
            .into_shape_with_order(IxDyn(&[b, t, h, wd, d]))
            .expect("contiguous")
            .into_dimensionality()
            .expect("5-D visual");
        Ok((audio, visual))
    }

    /// Batch loss without dropout or gradients.
    pub fn loss(&self, store: &ParamStore, clips: &[&ClipTensors]) -> Result<LossOutput> {
        let (audio, visual) = self.represent(store, clips)?;
        let (b, t, h, w, d) = visual.dim();
        let flat = visual.into_shape_with_order((b, t, h * w, d)).expect("contiguous");
        crate::objective::contrastive_loss(audio.view(), flat.view(), &self.cfg.loss())
    }

    /// Per-frame cosine maps for each clip.
    pub fn localize(&self, store: &ParamStore, clips: &[&ClipTensors]) -> Result<Vec<LocalizationMap>> {
        let (audio, visual) = self.represent(store, clips)?;
        (0..clips.len())
            .map(|i| {
                let a: Array2<f64> = audio.index_axis(Axis(0), i).to_owned();
                let v: Array4<f64> = visual.index_axis(Axis(0), i).to_owned();
                localization_map(a.view(), v.view())
            })
            .collect()
    }
}
