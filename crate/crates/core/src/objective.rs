//! Temporal multiple-instance contrastive objective and the inference-time
//! localization map.
//!
//! For clip `i` at timestamp `t` the audio vector is compared with every
//! visual location of the same clip and timestamp (positive bag, max
//! pooled) and with every location of clip `j ≠ i` at the same timestamp
//! (negative bag, mean pooled). Zero-norm vectors have cosine 0 with every
//! other vector and are counted rather than turned into NaNs.

use ndarray::{s, Array1, Array2, Array3, Array4, Array5, ArrayView1, ArrayView2, ArrayView3, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// How a negative bag is summarised into one response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NegativePooling {
    /// Mean similarity over the bag.
    #[default]
    Mean,
    /// Max similarity over the bag (the EZ-VSL formulation, kept for ablation).
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossOptions {
    /// Logits are divided by this; 1 leaves cosines untouched.
    pub temperature: f64,
    pub negative_pooling: NegativePooling,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            temperature: 1.0,
            negative_pooling: NegativePooling::Mean,
        }
    }
}

/// A similarity aggregate plus the number of zero-norm pairs met on the way.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Response {
    pub value: f64,
    pub zero_norm: usize,
}

fn norm(v: ArrayView1<'_, f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Cosine similarity; `None` when either vector has zero norm.
pub fn cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Option<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(a.dot(&b) / (na * nb))
}

fn location_cosines(a_t: ArrayView1<'_, f64>, v_t: ArrayView3<'_, f64>) -> (Vec<f64>, usize) {
    let d = v_t.shape()[2];
    let flat = v_t.into_shape_with_order((v_t.len() / d.max(1), d));
    let mut zero = 0;
    let sims = match flat {
        Ok(flat) => flat
            .outer_iter()
            .map(|v| {
                cosine(a_t, v).unwrap_or_else(|| {
                    zero += 1;
                    0.0
                })
            })
            .collect(),
        Err(_) => v_t
            .lanes(Axis(2))
            .into_iter()
            .map(|v| {
                cosine(a_t, v).unwrap_or_else(|| {
                    zero += 1;
                    0.0
                })
            })
            .collect(),
    };
    (sims, zero)
}

/// Max cosine between `a_t` (D) and the locations of `v_t` (H × W × D).
pub fn positive_response(a_t: ArrayView1<'_, f64>, v_t: ArrayView3<'_, f64>) -> Response {
    let (sims, zero_norm) = location_cosines(a_t, v_t);
    Response {
        value: sims.into_iter().fold(f64::NEG_INFINITY, f64::max),
        zero_norm,
    }
}

/// Mean cosine between `a_t` and the locations of another clip's `v_t`.
pub fn negative_response(a_t: ArrayView1<'_, f64>, v_t_other: ArrayView3<'_, f64>) -> Response {
    let (sims, zero_norm) = location_cosines(a_t, v_t_other);
    let n = sims.len() as f64;
    Response {
        value: sims.into_iter().sum::<f64>() / n,
        zero_norm,
    }
}

/// Audio `B × T × D` and visual `B × T × H × W × D` outputs for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchRepresentations {
    pub audio: Array3<f64>,
    pub visual: Array5<f64>,
}

impl BatchRepresentations {
    pub fn new(audio: Array3<f64>, visual: Array5<f64>) -> Result<Self> {
        let (b, t, d) = audio.dim();
        let vs = visual.shape();
        if vs[0] != b || vs[1] != t || vs[4] != d {
            return Err(Error::ShapeMismatch(format!(
                "audio {:?} vs visual {:?}",
                audio.shape(),
                visual.shape()
            )));
        }
        if b == 0 || t == 0 || vs[2] * vs[3] == 0 {
            return Err(Error::InvalidInput("batch, time and grid must be non-empty".into()));
        }
        Ok(BatchRepresentations { audio, visual })
    }

    pub fn batch(&self) -> usize {
        self.audio.shape()[0]
    }

    fn flat_visual(&self) -> ArrayView4<'_, f64> {
        let s = self.visual.shape();
        self.visual
            .view()
            .into_shape_with_order((s[0], s[1], s[2] * s[3], s[4]))
            .expect("owned arrays are contiguous")
    }
}

/// Loss value, its two directions and gradients w.r.t. both inputs.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: f64,
    pub a2v: f64,
    pub v2a: f64,
    /// `B × T × D`
    pub grad_audio: Array3<f64>,
    /// `B × T × P × D` with `P = H · W`
    pub grad_visual: Array4<f64>,
    pub zero_norm: usize,
    /// Positive bags whose maximum is attained at more than one location.
    pub max_ties: usize,
}

fn normalize_rows(x: ArrayView2<'_, f64>) -> (Array2<f64>, Array1<f64>) {
    let norms: Array1<f64> = x.outer_iter().map(norm).collect();
    let mut unit = x.to_owned();
    for (mut row, &n) in unit.outer_iter_mut().zip(&norms) {
        if n > 0.0 {
            row /= n;
        } else {
            row.fill(0.0);
        }
    }
    (unit, norms)
}

/// Pulls a gradient on unit vectors back to the raw vectors.
fn unnormalize_grad(g_unit: &Array2<f64>, unit: &Array2<f64>, norms: &Array1<f64>) -> Array2<f64> {
    let mut g = g_unit.clone();
    for ((mut row, u), &n) in g.outer_iter_mut().zip(unit.outer_iter()).zip(norms) {
        if n > 0.0 {
            let proj = row.dot(&u);
            row.zip_mut_with(&u, |r, &uv| *r = (*r - proj * uv) / n);
        } else {
            row.fill(0.0);
        }
    }
    g
}

fn check_finite(audio: ArrayView3<'_, f64>, visual: ArrayView4<'_, f64>) -> Result<()> {
    for ((i, t, _), v) in audio.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::Numerical {
                location: format!("audio (i={i}, t={t})"),
                message: "non-finite representation".into(),
            });
        }
    }
    for ((i, t, _, _), v) in visual.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::Numerical {
                location: format!("visual (i={i}, t={t})"),
                message: "non-finite representation".into(),
            });
        }
    }
    Ok(())
}

/// `−log softmax_0` over `logits` and its gradient w.r.t. each logit.
fn neg_log_first(logits: &[f64]) -> (f64, Vec<f64>) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    let value = (m + z.ln()) - logits[0];
    let mut grad: Vec<f64> = exps.iter().map(|e| e / z).collect();
    grad[0] -= 1.0;
    (value, grad)
}

/// Full objective with gradients over flattened-grid inputs
/// (`audio`: B × T × D, `visual`: B × T × P × D).
pub fn contrastive_loss(audio: ArrayView3<'_, f64>, visual: ArrayView4<'_, f64>, opts: &LossOptions) -> Result<LossOutput> {
    let (b, t_len, d) = audio.dim();
    let p_len = visual.shape()[2];
    if visual.shape() != [b, t_len, p_len, d] {
        return Err(Error::ShapeMismatch(format!(
            "audio {:?} vs visual {:?}",
            audio.shape(),
            visual.shape()
        )));
    }
    if b == 0 || t_len == 0 || p_len == 0 {
        return Err(Error::InvalidInput("batch, time and grid must be non-empty".into()));
    }
    if !(opts.temperature > 0.0) {
        return Err(Error::config("objective", "temperature", "must be positive"));
    }
    check_finite(audio, visual)?;
    let inv_tau = 1.0 / opts.temperature;
    let pairs = (b * t_len) as f64;

    let mut grad_audio = Array3::zeros((b, t_len, d));
    let mut grad_visual = Array4::zeros((b, t_len, p_len, d));
    let (mut a2v, mut v2a) = (0.0, 0.0);
    let mut zero_norm = 0;
    let mut max_ties = 0;

    for t in 0..t_len {
        let (a_unit, a_norm) = normalize_rows(audio.slice(s![.., t, ..]));
        let v_t = visual.slice(s![.., t, .., ..]);
        let v_flat = v_t.to_shape((b * p_len, d)).expect("reshape");
        let (v_unit, v_norm) = normalize_rows(v_flat.view());
        zero_norm += a_norm.iter().filter(|&&n| n == 0.0).count() * b * p_len;
        zero_norm += v_norm.iter().filter(|&&n| n == 0.0).count() * b;

        // sims[[i, j * P + p]] = cos(A_i^t, V_j^t[p])
        let sims = a_unit.dot(&v_unit.t());
        let mut d_sims = Array2::<f64>::zeros(sims.raw_dim());

        let mut positive = vec![0.0; b];
        let mut positive_at = vec![0usize; b];
        for i in 0..b {
            let row = sims.slice(s![i, i * p_len..(i + 1) * p_len]);
            let (arg, best) = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc });
            if row.iter().filter(|&&v| v == best).count() > 1 {
                max_ties += 1;
            }
            positive[i] = best;
            positive_at[i] = arg;
        }
        // negative[i][j] pools clip j's bag against clip i's audio.
        let mut negative = Array2::<f64>::zeros((b, b));
        let mut negative_at = Array2::<usize>::zeros((b, b));
        for i in 0..b {
            for j in 0..b {
                if i == j {
                    continue;
                }
                let bag = sims.slice(s![i, j * p_len..(j + 1) * p_len]);
                match opts.negative_pooling {
                    NegativePooling::Mean => negative[[i, j]] = bag.sum() / p_len as f64,
                    NegativePooling::Max => {
                        let (arg, best) = bag
                            .iter()
                            .enumerate()
                            .fold((0, f64::NEG_INFINITY), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc });
                        negative[[i, j]] = best;
                        negative_at[[i, j]] = arg;
                    }
                }
            }
        }

        let add_negative_grad = |i: usize, j: usize, g: f64, d_sims: &mut Array2<f64>| match opts.negative_pooling {
            NegativePooling::Mean => {
                d_sims
                    .slice_mut(s![i, j * p_len..(j + 1) * p_len])
                    .mapv_inplace(|x| x + g / p_len as f64);
            }
            NegativePooling::Max => d_sims[[i, j * p_len + negative_at[[i, j]]]] += g,
        };

        for i in 0..b {
            // audio-to-visual: clip i's audio against other clips' bags
            let mut logits = vec![positive[i] * inv_tau];
            let others: Vec<usize> = (0..b).filter(|&j| j != i).collect();
            logits.extend(others.iter().map(|&j| negative[[i, j]] * inv_tau));
            let (value, grad) = neg_log_first(&logits);
            a2v += value;
            d_sims[[i, i * p_len + positive_at[i]]] += grad[0] * inv_tau / pairs;
            for (k, &j) in others.iter().enumerate() {
                add_negative_grad(i, j, grad[k + 1] * inv_tau / pairs, &mut d_sims);
            }

            // visual-to-audio: clip i's bag against other clips' audio
            let mut logits = vec![positive[i] * inv_tau];
            logits.extend(others.iter().map(|&j| negative[[j, i]] * inv_tau));
            let (value, grad) = neg_log_first(&logits);
            v2a += value;
            d_sims[[i, i * p_len + positive_at[i]]] += grad[0] * inv_tau / pairs;
            for (k, &j) in others.iter().enumerate() {
                add_negative_grad(j, i, grad[k + 1] * inv_tau / pairs, &mut d_sims);
            }
        }

        let d_a_unit = d_sims.dot(&v_unit);
        let d_v_unit = d_sims.t().dot(&a_unit);
        grad_audio
            .slice_mut(s![.., t, ..])
            .assign(&unnormalize_grad(&d_a_unit, &a_unit, &a_norm));
        let gv = unnormalize_grad(&d_v_unit, &v_unit, &v_norm);
        grad_visual
            .slice_mut(s![.., t, .., ..])
            .assign(&gv.into_shape_with_order((b, p_len, d)).unwrap());
    }

    let a2v = a2v / pairs;
    let v2a = v2a / pairs;
    Ok(LossOutput {
        total: a2v + v2a,
        a2v,
        v2a,
        grad_audio,
        grad_visual,
        zero_norm,
        max_ties,
    })
}

pub fn loss_a2v(batch: &BatchRepresentations) -> Result<f64> {
    Ok(contrastive_loss(batch.audio.view(), batch.flat_visual(), &LossOptions::default())?.a2v)
}

pub fn loss_total(batch: &BatchRepresentations) -> Result<f64> {
    Ok(contrastive_loss(batch.audio.view(), batch.flat_visual(), &LossOptions::default())?.total)
}

pub fn loss_with_options(batch: &BatchRepresentations, opts: &LossOptions) -> Result<LossOutput> {
    contrastive_loss(batch.audio.view(), batch.flat_visual(), opts)
}

/// Records the objective on a tape. `audio` is `B × T × D`, `visual` is
/// `B × T × P × D`; the returned node is a one-element tensor.
pub fn loss_on_tape(tape: &mut Tape, audio: Var, visual: Var, opts: &LossOptions) -> Result<(Var, LossOutput)> {
    let a = tape
        .value(audio)
        .view()
        .into_dimensionality()
        .map_err(|_| Error::ShapeMismatch("audio must be B × T × D".into()))?;
    let v = tape
        .value(visual)
        .view()
        .into_dimensionality()
        .map_err(|_| Error::ShapeMismatch("visual must be B × T × P × D".into()))?;
    let out = contrastive_loss(a, v, opts)?;
    let ga = out.grad_audio.clone().into_dyn();
    let gv = out.grad_visual.clone().into_dyn();
    let value = ndarray::ArrayD::from_elem(ndarray::IxDyn(&[1]), out.total);
    let node = tape.custom(&[audio, visual], value, move |g, _, _, needs| {
        let s = g[[0]];
        vec![needs[0].then(|| &ga * s), needs[1].then(|| &gv * s)]
    });
    Ok((node, out))
}

/// Per-frame cosine maps, `T × H × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationMap {
    pub scores: Array3<f64>,
    pub zero_norm: usize,
}

impl LocalizationMap {
    /// Bilinear upsampling of frame `t` to `out_h × out_w`.
    pub fn upsampled(&self, t: usize, out_h: usize, out_w: usize) -> Array2<f64> {
        upsample_bilinear(self.scores.index_axis(Axis(0), t), out_h, out_w)
    }
}

/// `a`: T × D, `v`: T × H × W × D.
pub fn localization_map(a: ArrayView2<'_, f64>, v: ArrayView4<'_, f64>) -> Result<LocalizationMap> {
    let (t_len, d) = a.dim();
    let (vt, h, w, vd) = v.dim();
    if vt != t_len || vd != d {
        return Err(Error::ShapeMismatch(format!("audio {:?} vs visual {:?}", a.shape(), v.shape())));
    }
    let mut scores = Array3::zeros((t_len, h, w));
    let mut zero_norm = 0;
    for t in 0..t_len {
        let at = a.row(t);
        for x in 0..h {
            for y in 0..w {
                scores[[t, x, y]] = cosine(at, v.slice(s![t, x, y, ..])).unwrap_or_else(|| {
                    zero_norm += 1;
                    0.0
                });
            }
        }
    }
    Ok(LocalizationMap { scores, zero_norm })
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn upsample_bilinear(map: ArrayView2<'_, f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let c = (o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
        let c = c.clamp(0.0, (n_in - 1) as f64);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, c - lo as f64)
    };
    let rows: Vec<_> = (0..out_h).map(|o| coord(o, h, out_h)).collect();
    let cols: Vec<_> = (0..out_w).map(|o| coord(o, w, out_w)).collect();
    Array2::from_shape_fn((out_h, out_w), |(oy, ox)| {
        let (y0, y1, fy) = rows[oy];
        let (x0, x1, fx) = cols[ox];
        let top = map[[y0, x0]] * (1.0 - fx) + map[[y0, x1]] * fx;
        let bottom = map[[y1, x0]] * (1.0 - fx) + map[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}
