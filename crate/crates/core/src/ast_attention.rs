//! Audio-spatial-temporal attention blocks.
//!
//! The joint state is `T × (1 + H·W) × D`: per timestamp one audio token
//! followed by the row-major visual grid. Each layer runs pre-norm
//! self-attention and FFN across tokens within every timestamp (spatial),
//! transposes to token-major, runs the same sublayers across timestamps for
//! every token (temporal) and transposes back.

use ndarray::{s, Array2, Array3, Array4, ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoders::EncodedPair;
use crate::error::{Error, Result};
use crate::params::{normal, ones, zeros, Binding, ParamStore};

const MODULE: &str = "ast_attention";

/// Init scale of the attention-output and FFN-output projections relative
/// to a unit-variance init; keeps fresh blocks close to the identity.
const OUTPUT_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AstConfig {
    pub depth: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub dropout: f64,
    pub ln_eps: f64,
}

impl AstConfig {
    pub fn for_dim(dim: usize) -> Self {
        AstConfig {
            depth: 3,
            heads: 4,
            ffn_hidden: 4 * dim,
            dropout: 0.1,
            ln_eps: 1e-5,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config(MODULE, "depth", "must be at least 1"));
        }
        if self.heads == 0 || dim % self.heads != 0 {
            return Err(Error::config(
                MODULE,
                "heads",
                format!("{} heads do not divide D = {dim}", self.heads),
            ));
        }
        if self.ffn_hidden == 0 {
            return Err(Error::config(MODULE, "ffn_hidden", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(MODULE, "dropout", "must lie in [0, 1)"));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::config(MODULE, "ln_eps", "must be positive"));
        }
        Ok(())
    }
}

/// Axis order of a joint state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// `T × N × D`
    TimeMajor,
    /// `N × T × D`, what the temporal stage consumes.
    TokenMajor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointSequence {
    pub values: Array3<f64>,
    pub layout: Layout,
    /// Visual grid `(H, W)`; tokens per timestamp are `1 + H·W`.
    pub grid: (usize, usize),
}

impl JointSequence {
    pub fn time_major(&self) -> Array3<f64> {
        match self.layout {
            Layout::TimeMajor => self.values.clone(),
            Layout::TokenMajor => self.values.clone().permuted_axes([1, 0, 2]).as_standard_layout().into_owned(),
        }
    }

    pub fn transposed(&self) -> JointSequence {
        let values = self.values.clone().permuted_axes([1, 0, 2]).as_standard_layout().into_owned();
        let layout = match self.layout {
            Layout::TimeMajor => Layout::TokenMajor,
            Layout::TokenMajor => Layout::TimeMajor,
        };
        JointSequence {
            values,
            layout,
            grid: self.grid,
        }
    }
}

/// Row `t` is `[ã_t; ṽ_t flattened row-major]`.
pub fn build_joint(pair: &EncodedPair) -> Result<JointSequence> {
    let (t, h, w, d) = pair.v_tilde.dim();
    if pair.a_tilde.dim() != (t, d) {
        return Err(Error::ShapeMismatch(format!(
            "ã {:?} vs ṽ {:?}",
            pair.a_tilde.shape(),
            pair.v_tilde.shape()
        )));
    }
    let mut values = Array3::zeros((t, 1 + h * w, d));
    values.slice_mut(s![.., 0, ..]).assign(&pair.a_tilde);
    let flat = pair.v_tilde.view().into_shape_with_order((t, h * w, d)).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    values.slice_mut(s![.., 1.., ..]).assign(&flat);
    Ok(JointSequence {
        values,
        layout: Layout::TimeMajor,
        grid: (h, w),
    })
}

/// Audio token per row and the visual grid restored to `T × H × W × D`.
pub fn split_output(z: &JointSequence) -> Result<(Array2<f64>, Array4<f64>)> {
    let values = z.time_major();
    let (t, n, d) = values.dim();
    let (h, w) = z.grid;
    if n != 1 + h * w {
        return Err(Error::ShapeMismatch(format!("{n} tokens per row do not match grid {h}×{w}")));
    }
    let audio = values.slice(s![.., 0, ..]).to_owned();
    let visual = values
        .slice(s![.., 1.., ..])
        .to_owned()
        .into_shape_with_order((t, h, w, d))
        .expect("contiguous");
    Ok((audio, visual))
}

/// Batched join on a tape: `ã` is `B × T × D`, `ṽ` is `B × T × H × W × D`;
/// returns `B × T × (1 + H·W) × D`.
pub fn build_joint_var(tape: &mut Tape, a_tilde: Var, v_tilde: Var) -> Var {
    let vs = tape.shape(v_tilde).to_vec();
    let (b, t, hw, d) = (vs[0], vs[1], vs[2] * vs[3], vs[4]);
    let a = tape.reshape(a_tilde, &[b, t, 1, d]);
    let v = tape.reshape(v_tilde, &[b, t, hw, d]);
    tape.concat(&[a, v], 2)
}

/// Inverse of [`build_joint_var`]: `(B × T × D, B × T × H·W × D)`.
pub fn split_output_var(tape: &mut Tape, z: Var) -> (Var, Var) {
    let zs = tape.shape(z).to_vec();
    let audio = tape.slice_axis(z, 2, 0, 1);
    let audio = tape.reshape(audio, &[zs[0], zs[1], zs[3]]);
    let visual = tape.slice_axis(z, 2, 1, zs[2]);
    (audio, visual)
}

/// Which half of a layer a set of weights belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Spatial,
    Temporal,
}

impl Stage {
    fn name(self) -> &'static str {
        match self {
            Stage::Spatial => "spatial",
            Stage::Temporal => "temporal",
        }
    }
}

fn key(layer: usize, stage: Stage, name: &str) -> String {
    format!("ast.{layer}.{}.{name}", stage.name())
}

/// Adds the weights of `cfg.depth` layers for model width `dim`.
pub fn init_weights<R: Rng>(store: &mut ParamStore, cfg: &AstConfig, dim: usize, rng: &mut R) {
    let std = (1.0 / dim as f64).sqrt();
    for layer in 0..cfg.depth {
        for stage in [Stage::Spatial, Stage::Temporal] {
            let k = |n: &str| key(layer, stage, n);
            store.insert(k("ln1.g"), ones(&[dim]));
            store.insert(k("ln1.b"), zeros(&[dim]));
            for proj in ["wq", "wk", "wv"] {
                store.insert(k(proj), normal(rng, &[dim, dim], std));
            }
            for bias in ["bq", "bk", "bv", "bo"] {
                store.insert(k(bias), zeros(&[dim]));
            }
            store.insert(k("wo"), normal(rng, &[dim, dim], std * OUTPUT_INIT_SCALE));
            store.insert(k("ln2.g"), ones(&[dim]));
            store.insert(k("ln2.b"), zeros(&[dim]));
            store.insert(k("w1"), normal(rng, &[dim, cfg.ffn_hidden], std));
            store.insert(k("b1"), zeros(&[cfg.ffn_hidden]));
            store.insert(
                k("w2"),
                normal(rng, &[cfg.ffn_hidden, dim], (1.0 / cfg.ffn_hidden as f64).sqrt() * OUTPUT_INIT_SCALE),
            );
            store.insert(k("b2"), zeros(&[dim]));
        }
    }
}

/// Dropout source; `None` disables dropout (evaluation).
pub struct DropoutCtx<'a> {
    pub rate: f64,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl DropoutCtx<'_> {
    pub fn eval() -> DropoutCtx<'static> {
        DropoutCtx { rate: 0.0, rng: None }
    }

    fn apply(&mut self, tape: &mut Tape, x: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => {
                let keep = 1.0 / (1.0 - self.rate);
                let rate = self.rate;
                let mask = ArrayD::from_shape_simple_fn(IxDyn(tape.shape(x)), || {
                    if rng.gen::<f64>() < rate {
                        0.0
                    } else {
                        keep
                    }
                });
                tape.mul_const(x, mask)
            }
            _ => x,
        }
    }
}

/// Pre-norm attention + FFN over the second-to-last axis of `x`
/// (`G × S × D`): every one of the `G` sequences is processed on its own.
fn sublayers(
    tape: &mut Tape,
    w: &Binding,
    cfg: &AstConfig,
    layer: usize,
    stage: Stage,
    x: Var,
    drop: &mut DropoutCtx<'_>,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let seq = shape[shape.len() - 2];
    let groups: usize = shape[..shape.len() - 2].iter().product();
    let g = |n: &str| w.get(&key(layer, stage, n));

    let h = tape.layer_norm(x, g("ln1.g")?, g("ln1.b")?, cfg.ln_eps);
    let q = tape.linear(h, g("wq")?, Some(g("bq")?));
    let k = tape.linear(h, g("wk")?, Some(g("bk")?));
    let v = tape.linear(h, g("wv")?, Some(g("bv")?));
    let att = tape.attention(q, k, v, groups, seq, cfg.heads);
    let o = tape.linear(att, g("wo")?, Some(g("bo")?));
    let o = drop.apply(tape, o);
    let y = tape.add(x, o);

    let h = tape.layer_norm(y, g("ln2.g")?, g("ln2.b")?, cfg.ln_eps);
    let f = tape.linear(h, g("w1")?, Some(g("b1")?));
    let f = tape.gelu(f);
    let f = tape.linear(f, g("w2")?, Some(g("b2")?));
    let f = drop.apply(tape, f);
    let out = tape.add(y, f);
    check_finite(tape, out, layer, stage)?;
    Ok(out)
}

fn check_finite(tape: &Tape, x: Var, layer: usize, stage: Stage) -> Result<()> {
    if tape.value(x).iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numerical {
            location: format!("ast layer {layer} ({})", stage.name()),
            message: "non-finite activation".into(),
        })
    }
}

/// Swaps the time and token axes of a `B × X × Y × D` state.
fn swap_time_token(tape: &mut Tape, x: Var) -> Var {
    tape.permute(x, &[0, 2, 1, 3])
}

/// Spatial stage on `B × T × N × D`; returns the transposed `B × N × T × D`.
pub fn spatial_attention_var(
    tape: &mut Tape,
    w: &Binding,
    cfg: &AstConfig,
    layer: usize,
    z: Var,
    drop: &mut DropoutCtx<'_>,
) -> Result<Var> {
    let y = sublayers(tape, w, cfg, layer, Stage::Spatial, z, drop)?;
    Ok(swap_time_token(tape, y))
}

/// Temporal stage on `B × N × T × D`; returns `B × T × N × D`.
pub fn temporal_attention_var(
    tape: &mut Tape,
    w: &Binding,
    cfg: &AstConfig,
    layer: usize,
    y: Var,
    drop: &mut DropoutCtx<'_>,
) -> Result<Var> {
    let z = sublayers(tape, w, cfg, layer, Stage::Temporal, y, drop)?;
    Ok(swap_time_token(tape, z))
}

/// All `cfg.depth` layers on a `B × T × N × D` state.
pub fn ast_forward_var(tape: &mut Tape, w: &Binding, cfg: &AstConfig, z0: Var, drop: &mut DropoutCtx<'_>) -> Result<Var> {
    let mut z = z0;
    for layer in 0..cfg.depth {
        let y = spatial_attention_var(tape, w, cfg, layer, z, drop)?;
        z = temporal_attention_var(tape, w, cfg, layer, y, drop)?;
    }
    Ok(z)
}

fn run_single(
    z: &JointSequence,
    expected: Layout,
    f: impl FnOnce(&mut Tape, &Binding, Var) -> Result<Var>,
    store: &ParamStore,
) -> Result<Array3<f64>> {
    if z.layout != expected {
        return Err(Error::InvalidInput(format!("expected {expected:?} layout, got {:?}", z.layout)));
    }
    if !z.values.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical {
            location: "ast input".into(),
            message: "non-finite input".into(),
        });
    }
    let mut tape = Tape::new();
    let w = store.bind(&mut tape, false);
    let x = tape.constant(z.values.clone().insert_axis(Axis(0)).into_dyn());
    let out = f(&mut tape, &w, x)?;
    Ok(tape
        .value(out)
        .index_axis(Axis(0), 0)
        .to_owned()
        .into_dimensionality()
        .expect("3-D state"))
}

/// One spatial stage of layer `layer` (no dropout); output is token-major.
pub fn spatial_attention(z: &JointSequence, cfg: &AstConfig, layer: usize, store: &ParamStore) -> Result<JointSequence> {
    cfg.validate(z.values.shape()[2])?;
    let values = run_single(
        z,
        Layout::TimeMajor,
        |t, w, x| spatial_attention_var(t, w, cfg, layer, x, &mut DropoutCtx::eval()),
        store,
    )?;
    Ok(JointSequence {
        values,
        layout: Layout::TokenMajor,
        grid: z.grid,
    })
}

/// One temporal stage of layer `layer` (no dropout); output is time-major.
pub fn temporal_attention(y: &JointSequence, cfg: &AstConfig, layer: usize, store: &ParamStore) -> Result<JointSequence> {
    cfg.validate(y.values.shape()[2])?;
    let values = run_single(
        y,
        Layout::TokenMajor,
        |t, w, x| temporal_attention_var(t, w, cfg, layer, x, &mut DropoutCtx::eval()),
        store,
    )?;
    Ok(JointSequence {
        values,
        layout: Layout::TimeMajor,
        grid: y.grid,
    })
}

/// The full stack (no dropout).
pub fn ast_forward(z0: &JointSequence, cfg: &AstConfig, store: &ParamStore) -> Result<JointSequence> {
    cfg.validate(z0.values.shape()[2])?;
    let values = run_single(
        z0,
        Layout::TimeMajor,
        |t, w, x| ast_forward_var(t, w, cfg, x, &mut DropoutCtx::eval()),
        store,
    )?;
    Ok(JointSequence {
        values,
        layout: Layout::TimeMajor,
        grid: z0.grid,
    })
}

/// Attention probabilities of one stage, `[group][head]` → `S × S`; used to
/// check that every query's weights sum to one.
pub fn attention_weights(
    z: &JointSequence,
    cfg: &AstConfig,
    layer: usize,
    stage: Stage,
    store: &ParamStore,
) -> Result<Vec<Vec<Array2<f64>>>> {
    let x = z.values.view();
    let (groups, seq, d) = x.dim();
    let dh = d / cfg.heads;
    let mut tape = Tape::new();
    let w = store.bind(&mut tape, false);
    let g = |n: &str| w.get(&key(layer, stage, n));
    let xv = tape.constant(x.to_owned().into_dyn());
    let h = tape.layer_norm(xv, g("ln1.g")?, g("ln1.b")?, cfg.ln_eps);
    let q = tape.linear(h, g("wq")?, Some(g("bq")?));
    let k = tape.linear(h, g("wk")?, Some(g("bk")?));
    let q = tape.value(q).clone().into_shape_with_order((groups, seq, d)).unwrap();
    let k = tape.value(k).clone().into_shape_with_order((groups, seq, d)).unwrap();
    let mut out = Vec::with_capacity(groups);
    for gi in 0..groups {
        let mut per_head = Vec::with_capacity(cfg.heads);
        for hd in 0..cfg.heads {
            let qh = q.slice(s![gi, .., hd * dh..(hd + 1) * dh]);
            let kh = k.slice(s![gi, .., hd * dh..(hd + 1) * dh]);
            let mut p = qh.dot(&kh.t()) / (dh as f64).sqrt();
            crate::autodiff::softmax_rows(p.view_mut());
            per_head.push(p);
        }
        out.push(per_head);
    }
    Ok(out)
}
