//! One check per acceptance criterion. Each returns a verdict plus the
//! measurements behind it so the acceptance runner and the per-module tests
//! share exactly the same logic.

use std::time::Instant;

use ndarray::{s, Array2, Array3, Array4, ArrayD, Axis, IxDyn};
use rand::Rng;

use tavlo_core::ast_attention::{
    ast_forward, ast_forward_var, init_weights, spatial_attention, temporal_attention, AstConfig, DropoutCtx,
    JointSequence, Layout,
};
use tavlo_core::autodiff::Tape;
use tavlo_core::encoders::{audio_kernel_dims, AudioEncoder, AudioEncoderConfig};
use tavlo_core::evaluation::{
    binarize, ciou_auc, frame_iou, offscreen_tn, MetricsReport, ThresholdPolicy,
};
use tavlo_core::harness::{
    evaluate, evaluate_oracle, read_manifest, train, write_manifest, write_suite, Checkpoint, ClipTensors, Model,
    RunConfig, TrainOptions,
};
use tavlo_core::media_ingest::{
    compute_rms, laplacian_sharpness, laplacian_sharpness_gray, sample_clips, sample_frames, AudioEvent,
    FrameSequence, SamplingConfig, Spectrogram, Waveform,
};
use tavlo_core::objective::{
    contrastive_loss, localization_map, loss_a2v, loss_total, loss_with_options, negative_response,
    positive_response, BatchRepresentations, LossOptions, NegativePooling,
};
use tavlo_core::params::ParamStore;
use tavlo_core::synthetic::{make_suite, ScenarioCounts, Scenario, Split, SplitFractions};

use super::{oracles, randn, randn3, randn4, randn5, random_box, record, rel_err, rng, tiny_config, uniform2};

#[derive(Debug, Clone)]
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

pub const INSTANCES: usize = 100;

/// Largest error of one op over its randomized instances.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub op: &'static str,
    pub instances: usize,
    pub max_err: f64,
    pub tol: f64,
}

impl OpCheck {
    pub fn ok(&self) -> bool {
        self.instances >= INSTANCES && self.max_err <= self.tol
    }
}

fn check(op: &'static str, tol: f64, seed: u64, f: impl Fn(&mut rand_chacha::ChaCha8Rng) -> f64) -> OpCheck {
    let mut r = rng(seed);
    let mut max_err: f64 = 0.0;
    for _ in 0..INSTANCES {
        let e = f(&mut r);
        max_err = if e.is_nan() { f64::INFINITY } else { max_err.max(e) };
    }
    OpCheck {
        op,
        instances: INSTANCES,
        max_err,
        tol,
    }
}

fn random_batch(r: &mut rand_chacha::ChaCha8Rng, min_grid: usize) -> BatchRepresentations {
    let b = r.gen_range(1..=4);
    let t = r.gen_range(1..=3);
    let h = r.gen_range(min_grid..=3);
    let w = r.gen_range(min_grid..=3);
    let d = r.gen_range(2..=6);
    BatchRepresentations::new(randn3(r, (b, t, d)), randn5(r, (b, t, h, w, d))).unwrap()
}

pub fn loss_a2v_check() -> OpCheck {
    check("loss_a2v", 1e-7, 11, |r| {
        let batch = random_batch(r, 1);
        let (a2v, _) = oracles::loss(&batch.audio, &batch.visual, false);
        rel_err(loss_a2v(&batch).unwrap(), a2v, 1.0)
    })
}

pub fn loss_total_check() -> OpCheck {
    check("loss_total", 1e-7, 12, |r| {
        let batch = random_batch(r, 1);
        let (a2v, v2a) = oracles::loss(&batch.audio, &batch.visual, false);
        rel_err(loss_total(&batch).unwrap(), a2v + v2a, 1.0)
    })
}

fn random_bag(r: &mut rand_chacha::ChaCha8Rng) -> (Vec<f64>, Array3<f64>) {
    let d = r.gen_range(2..=8);
    let a = randn(r, &[d]).into_raw_vec_and_offset().0;
    let (h, w) = (r.gen_range(1..=4), r.gen_range(1..=4));
    let v = randn3(r, (h, w, d));
    (a, v)
}

pub fn positive_response_check() -> OpCheck {
    check("positive_response", 1e-9, 13, |r| {
        let (a, v) = random_bag(r);
        let got = positive_response(ndarray::ArrayView1::from(&a), v.view()).value;
        (got - oracles::positive(&a, &v)).abs()
    })
}

pub fn negative_response_check() -> OpCheck {
    check("negative_response", 1e-9, 14, |r| {
        let (a, v) = random_bag(r);
        let got = negative_response(ndarray::ArrayView1::from(&a), v.view()).value;
        (got - oracles::negative(&a, &v)).abs()
    })
}

pub fn localization_map_check() -> OpCheck {
    check("localization_map", 1e-9, 15, |r| {
        let t = r.gen_range(1..=4);
        let d = r.gen_range(2..=8);
        let a: Array2<f64> = randn(r, &[t, d]).into_dimensionality().unwrap();
        let (h, w) = (r.gen_range(1..=4), r.gen_range(1..=4));
        let v = randn4(r, (t, h, w, d));
        let got = localization_map(a.view(), v.view()).unwrap().scores;
        let want = oracles::localization(&a, &v);
        got.iter().zip(want.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    })
}

pub fn frame_iou_check() -> OpCheck {
    check("frame_iou", 1e-12, 16, |r| {
        let (h, w) = (r.gen_range(2..=10), r.gen_range(2..=10));
        let pred = Array2::from_shape_simple_fn((h, w), || r.gen_bool(0.4));
        let gt = random_box(r, h, w);
        (frame_iou(pred.view(), gt.view()).unwrap() - oracles::iou(&pred, &gt)).abs()
    })
}

fn random_records(r: &mut rand_chacha::ChaCha8Rng) -> Vec<tavlo_core::evaluation::EvalRecord> {
    let n = r.gen_range(5..=20);
    let mut out = Vec::new();
    for k in 0..n {
        let heat = uniform2(r, (6, 6));
        if k == 0 || r.gen_bool(0.6) {
            out.push(record(&format!("c{}", k / 3), k, heat, random_box(r, 6, 6), &[Scenario::Single], false));
        } else {
            out.push(record(&format!("c{}", k / 3), k, heat, Array2::from_elem((6, 6), false), &[Scenario::OffScreen], false));
        }
    }
    out
}

pub fn ciou_auc_check() -> OpCheck {
    check("ciou_auc", 1e-9, 17, |r| {
        let recs = random_records(r);
        let p = r.gen_range(5.0..50.0);
        let (c, a) = ciou_auc(&recs, ThresholdPolicy::GlobalTopPercent { percent: p }).unwrap();
        let (oc, oa) = oracles::ciou_auc(&recs, p);
        (c - oc).abs().max((a - oa).abs())
    })
}

pub fn offscreen_tn_check() -> OpCheck {
    check("offscreen_tn", 1e-9, 18, |r| {
        let mut recs = random_records(r);
        recs.push(record("z", 99, uniform2(r, (6, 6)), Array2::from_elem((6, 6), false), &[Scenario::OffScreen], false));
        let p = r.gen_range(1.0..60.0);
        let got = offscreen_tn(&recs, ThresholdPolicy::GlobalTopPercent { percent: p }).unwrap();
        (got - oracles::tn(&recs, p)).abs()
    })
}

pub fn compute_rms_check() -> OpCheck {
    check("compute_rms", 1e-9, 19, |r| {
        let sr = r.gen_range(20..=200u32);
        let interval = r.gen_range(0.5..2.0);
        let n = r.gen_range(1..=1000);
        let samples: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let per = (interval * sr as f64).round() as usize;
        let got = compute_rms(&Waveform::new(samples.clone(), sr).unwrap(), interval).unwrap();
        let want = oracles::rms(&samples, per);
        if got.len() != want.len() {
            return f64::INFINITY;
        }
        got.iter().zip(&want).map(|(a, b)| rel_err(*a, *b, 1e-300)).fold(0.0, f64::max)
    })
}

pub fn sample_clips_check() -> OpCheck {
    check("sample_clips", 0.0, 20, |r| {
        let sr = 50u32;
        let seconds = r.gen_range(10..=30usize);
        let extra = r.gen_range(0..sr as usize);
        let p_active = r.gen_range(0.1..0.9);
        let mut samples = Vec::new();
        for _ in 0..seconds {
            let amp = if r.gen_bool(p_active) { 0.1 } else { 0.001 };
            samples.extend((0..sr).map(|k| amp * if k % 2 == 0 { 1.0 } else { -1.0 }));
        }
        samples.extend(std::iter::repeat(0.0).take(extra));
        let cfg = SamplingConfig {
            min_active_intervals: r.gen_range(1..=10),
            ..SamplingConfig::default()
        };
        let got = sample_clips(&Waveform::new(samples.clone(), sr).unwrap(), &cfg).unwrap().starts;
        let want: Vec<f64> = oracles::clip_starts(&samples, sr as usize, 10, cfg.min_active_intervals, cfg.rms_threshold)
            .into_iter()
            .map(|s| s as f64 * cfg.rms_interval)
            .collect();
        if got == want {
            0.0
        } else {
            1.0
        }
    })
}

pub fn random_selection_instance(
    r: &mut rand_chacha::ChaCha8Rng,
    frames: usize,
    n_events: usize,
) -> (FrameSequence, Vec<AudioEvent>) {
    let fps = [5.0, 8.0, 10.0, 25.0][r.gen_range(0..4)];
    let data = ndarray::Array4::from_shape_simple_fn((frames, 5, 5, 3), || r.gen::<f32>());
    let fs = FrameSequence::from_frames(data, fps).unwrap();
    let duration = frames as f64 / fps;
    let mut events: Vec<AudioEvent> = (0..n_events)
        .map(|_| AudioEvent::at(r.gen_range(0.0..duration), r.gen_range(0.0..1.0)))
        .collect();
    events.sort_by(|a, b| a.peak_time.total_cmp(&b.peak_time));
    (fs, events)
}

pub fn selection_oracle(fs: &FrameSequence, events: &[AudioEvent], cfg: &SamplingConfig) -> Vec<usize> {
    let sharp: Vec<f64> = (0..fs.len())
        .map(|t| oracles::laplacian_gray(&oracles::gray_of(&fs.frames.index_axis(Axis(0), t).to_owned())))
        .collect();
    oracles::select(&fs.timestamps, &sharp, events, cfg.max_frames_per_clip, cfg.event_exclusion_radius)
}

pub fn sample_frames_check() -> OpCheck {
    check("sample_frames", 0.0, 21, |r| {
        let frames = r.gen_range(10..=60);
        let n_events = r.gen_range(1..=9);
        let (fs, events) = random_selection_instance(r, frames, n_events);
        let cfg = SamplingConfig::default();
        let got = sample_frames(&fs, &events, &cfg).unwrap().indices;
        if got == selection_oracle(&fs, &events, &cfg) {
            0.0
        } else {
            1.0
        }
    })
}

pub fn laplacian_check() -> OpCheck {
    check("laplacian_sharpness", 1e-9, 22, |r| {
        let (h, w) = (r.gen_range(3..=16), r.gen_range(3..=16));
        if r.gen_bool(0.5) {
            let frame = ndarray::Array3::from_shape_simple_fn((h, w, 3), || r.gen::<f32>());
            let got = laplacian_sharpness(frame.view()).unwrap();
            rel_err(got, oracles::laplacian_gray(&oracles::gray_of(&frame)), 1e-300)
        } else {
            let gray = uniform2(r, (h, w));
            rel_err(laplacian_sharpness_gray(gray.view()).unwrap(), oracles::laplacian_gray(&gray), 1e-300)
        }
    })
}

pub fn oracle_checks() -> Vec<OpCheck> {
    vec![
        loss_a2v_check(),
        loss_total_check(),
        positive_response_check(),
        negative_response_check(),
        localization_map_check(),
        frame_iou_check(),
        ciou_auc_check(),
        offscreen_tn_check(),
        compute_rms_check(),
        sample_clips_check(),
        sample_frames_check(),
        laplacian_check(),
    ]
}

/// 1. Oracle equivalence.
pub fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let checks = oracle_checks();
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.ok())
        .map(|c| format!("{} err {:.2e} > {:.0e}", c.op, c.max_err, c.tol))
        .collect();
    let worst = checks.iter().map(|c| c.max_err / c.tol.max(1e-300)).fold(0.0, f64::max);
    let pass = failed.is_empty() && secs < 120.0;
    let detail = if failed.is_empty() {
        format!(
            "{} ops x {} instances, worst err/tol {:.2e}, {:.1}s",
            checks.len(),
            INSTANCES,
            worst,
            secs
        )
    } else {
        format!("{}; {:.1}s", failed.join("; "), secs)
    };
    Outcome::new(pass, detail)
}

/// Relative-error summary of an analytic-vs-numeric gradient comparison.
#[derive(Debug, Clone, Copy)]
pub struct GradStats {
    pub entries: usize,
    pub skipped: usize,
    pub within_1e4: f64,
    pub worst: f64,
}

impl GradStats {
    pub fn ok(&self) -> bool {
        self.entries > 0 && self.within_1e4 >= 0.95 && self.worst <= 1e-3
    }

    fn from_errors(errs: &[f64], skipped: usize) -> Self {
        GradStats {
            entries: errs.len(),
            skipped,
            within_1e4: errs.iter().filter(|&&e| e <= 1e-4).count() as f64 / errs.len().max(1) as f64,
            worst: errs.iter().copied().fold(0.0, f64::max),
        }
    }
}

pub const FD_STEP: f64 = 1e-3;
/// Magnitude below which relative error is measured against this floor.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn ast_gradient_check() -> GradStats {
    ast_gradient_check_with(false)
}

/// Same comparison against the Richardson extrapolation
/// `(4·D(h/2) − D(h)) / 3`, which cancels the O(h²) truncation term.
pub fn ast_gradient_check_richardson() -> GradStats {
    ast_gradient_check_with(true)
}

fn ast_gradient_check_with(richardson: bool) -> GradStats {
    let estimate = |central: &mut dyn FnMut(f64) -> f64| {
        if richardson {
            (4.0 * central(FD_STEP / 2.0) - central(FD_STEP)) / 3.0
        } else {
            central(FD_STEP)
        }
    };
    let (t, h, w, d) = (3, 2, 2, 8);
    let n = 1 + h * w;
    let cfg = AstConfig {
        depth: 2,
        heads: 2,
        ffn_hidden: 4 * d,
        dropout: 0.0,
        ln_eps: 1e-5,
    };
    let mut r = rng(31);
    let mut store = ParamStore::new();
    init_weights(&mut store, &cfg, d, &mut r);
    for (_, v) in store.iter_mut() {
        let noise = randn(&mut r, v.shape());
        *v += &(noise * 0.2);
    }
    let z0 = randn(&mut r, &[1, t, n, d]);
    let weights_r = randn(&mut r, &[1, t, n, d]);

    let objective = |store: &ParamStore, z0: &ArrayD<f64>| -> f64 {
        let mut tape = Tape::new();
        let wb = store.bind(&mut tape, false);
        let x = tape.constant(z0.clone());
        let out = ast_forward_var(&mut tape, &wb, &cfg, x, &mut DropoutCtx::eval()).unwrap();
        (tape.value(out) * &weights_r).sum()
    };

    let mut tape = Tape::new();
    let wb = store.bind(&mut tape, true);
    let x = tape.leaf(z0.clone());
    let out = ast_forward_var(&mut tape, &wb, &cfg, x, &mut DropoutCtx::eval()).unwrap();
    let weighted = tape.mul_const(out, weights_r.clone());
    let loss = tape.sum(weighted);
    let mut grads = tape.backward(loss);
    let input_grad = grads.get(x).unwrap().clone();
    let analytic = wb.gradients(&store, &mut grads);

    let mut errs = Vec::new();
    let names: Vec<String> = store.iter().map(|(k, _)| k.clone()).collect();
    for name in names {
        let len = store.get(&name).unwrap().len();
        for e in 0..len {
            let orig = store.get(&name).unwrap().as_slice().unwrap()[e];
            let fd = estimate(&mut |h| {
                store.get_mut(&name).unwrap().as_slice_mut().unwrap()[e] = orig + h;
                let up = objective(&store, &z0);
                store.get_mut(&name).unwrap().as_slice_mut().unwrap()[e] = orig - h;
                let down = objective(&store, &z0);
                store.get_mut(&name).unwrap().as_slice_mut().unwrap()[e] = orig;
                (up - down) / (2.0 * h)
            });
            errs.push(rel_err(analytic[&name].as_slice().unwrap()[e], fd, GRAD_FLOOR));
        }
    }
    let mut z = z0.clone();
    for e in 0..z.len() {
        let orig = z.as_slice().unwrap()[e];
        let fd = estimate(&mut |h| {
            z.as_slice_mut().unwrap()[e] = orig + h;
            let up = objective(&store, &z);
            z.as_slice_mut().unwrap()[e] = orig - h;
            let down = objective(&store, &z);
            z.as_slice_mut().unwrap()[e] = orig;
            (up - down) / (2.0 * h)
        });
        errs.push(rel_err(input_grad.as_slice().unwrap()[e], fd, GRAD_FLOOR));
    }
    GradStats::from_errors(&errs, 0)
}

fn positive_argmaxes(audio: &Array3<f64>, visual: &Array4<f64>) -> Vec<usize> {
    let (b, t, p, _) = visual.dim();
    let mut out = Vec::new();
    for i in 0..b {
        for tt in 0..t {
            let a = audio.slice(s![i, tt, ..]).to_vec();
            let mut best = (0, f64::NEG_INFINITY);
            for k in 0..p {
                let c = oracles::cosine(&a, &visual.slice(s![i, tt, k, ..]).to_vec());
                if c > best.1 {
                    best = (k, c);
                }
            }
            out.push(best.0);
        }
    }
    out
}

pub fn loss_gradient_check() -> GradStats {
    let (b, t, p, d) = (2, 2, 4, 8);
    let opts = LossOptions::default();
    let mut errs = Vec::new();
    let mut skipped = 0;
    for seed in 0..5 {
        let mut r = rng(40 + seed);
        let mut audio = randn3(&mut r, (b, t, d));
        let mut visual = randn4(&mut r, (b, t, p, d));
        let out = contrastive_loss(audio.view(), visual.view(), &opts).unwrap();
        let base = positive_argmaxes(&audio, &visual);
        let f = |a: &Array3<f64>, v: &Array4<f64>| contrastive_loss(a.view(), v.view(), &opts).unwrap().total;

        for e in 0..audio.len() {
            let orig = audio.as_slice().unwrap()[e];
            audio.as_slice_mut().unwrap()[e] = orig + FD_STEP;
            let (up, am_up) = (f(&audio, &visual), positive_argmaxes(&audio, &visual));
            audio.as_slice_mut().unwrap()[e] = orig - FD_STEP;
            let (down, am_down) = (f(&audio, &visual), positive_argmaxes(&audio, &visual));
            audio.as_slice_mut().unwrap()[e] = orig;
            if am_up != base || am_down != base {
                skipped += 1;
                continue;
            }
            errs.push(rel_err(out.grad_audio.as_slice().unwrap()[e], (up - down) / (2.0 * FD_STEP), GRAD_FLOOR));
        }
        for e in 0..visual.len() {
            let orig = visual.as_slice().unwrap()[e];
            visual.as_slice_mut().unwrap()[e] = orig + FD_STEP;
            let (up, am_up) = (f(&audio, &visual), positive_argmaxes(&audio, &visual));
            visual.as_slice_mut().unwrap()[e] = orig - FD_STEP;
            let (down, am_down) = (f(&audio, &visual), positive_argmaxes(&audio, &visual));
            visual.as_slice_mut().unwrap()[e] = orig;
            if am_up != base || am_down != base {
                skipped += 1;
                continue;
            }
            errs.push(rel_err(out.grad_visual.as_slice().unwrap()[e], (up - down) / (2.0 * FD_STEP), GRAD_FLOOR));
        }
    }
    GradStats::from_errors(&errs, skipped)
}

/// 2. Gradient suite.
pub fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let ast = ast_gradient_check();
    let loss = loss_gradient_check();
    let secs = start.elapsed().as_secs_f64();
    let extrapolated = ast_gradient_check_richardson();
    let describe = |name: &str, g: &GradStats| {
        format!(
            "{name}: {} entries ({} skipped at max ties), {:.1}% within 1e-4, worst {:.2e}",
            g.entries,
            g.skipped,
            100.0 * g.within_1e4,
            g.worst
        )
    };
    Outcome::new(
        ast.ok() && loss.ok() && secs < 300.0,
        format!(
            "{}; {}; {:.1}s; ast worst after Richardson extrapolation {:.2e}",
            describe("ast", &ast),
            describe("loss_total", &loss),
            secs,
            extrapolated.worst
        ),
    )
}

pub fn small_ast(depth: usize, seed: u64) -> (AstConfig, ParamStore) {
    let d = 8;
    let cfg = AstConfig {
        depth,
        heads: 2,
        ffn_hidden: 16,
        dropout: 0.0,
        ln_eps: 1e-5,
    };
    let mut store = ParamStore::new();
    init_weights(&mut store, &cfg, d, &mut rng(seed));
    // Full-scale output projections so perturbations visibly propagate.
    for (k, v) in store.iter_mut() {
        if k.ends_with(".wo") || k.ends_with(".w2") {
            *v *= 10.0;
        }
    }
    (cfg, store)
}

pub fn joint(values: Array3<f64>, layout: Layout) -> JointSequence {
    JointSequence {
        values,
        layout,
        grid: (2, 2),
    }
}

pub fn zero_output_projections(store: &mut ParamStore) {
    for (k, v) in store.iter_mut() {
        if [".wo", ".bo", ".w2", ".b2"].iter().any(|s| k.ends_with(s)) {
            v.fill(0.0);
        }
    }
}

/// 3. Factorization invariants. Returns the individual verdicts.
pub fn factorization_checks() -> Vec<(&'static str, bool)> {
    let (t, n, d) = (4, 5, 8);
    let (cfg, store) = small_ast(1, 51);
    let mut r = rng(52);
    let mut results = Vec::new();

    // Spatial: output row t depends only on input row t.
    let z = randn3(&mut r, (t, n, d));
    let base = spatial_attention(&joint(z.clone(), Layout::TimeMajor), &cfg, 0, &store).unwrap().time_major();
    let mut z2 = z.clone();
    z2.index_axis_mut(Axis(0), 2).assign(&randn(&mut r, &[n, d]).into_dimensionality::<ndarray::Ix2>().unwrap());
    let pert = spatial_attention(&joint(z2, Layout::TimeMajor), &cfg, 0, &store).unwrap().time_major();
    let others_equal = (0..t).filter(|&k| k != 2).all(|k| base.index_axis(Axis(0), k) == pert.index_axis(Axis(0), k));
    let changed = base.index_axis(Axis(0), 2) != pert.index_axis(Axis(0), 2);
    results.push(("spatial cross-time locality", others_equal && changed));

    // Temporal: output token p depends only on input token column p.
    let y = randn3(&mut r, (n, t, d));
    let base = temporal_attention(&joint(y.clone(), Layout::TokenMajor), &cfg, 0, &store).unwrap().values;
    let mut y2 = y.clone();
    y2.index_axis_mut(Axis(0), 3).assign(&randn(&mut r, &[t, d]).into_dimensionality::<ndarray::Ix2>().unwrap());
    let pert = temporal_attention(&joint(y2, Layout::TokenMajor), &cfg, 0, &store).unwrap().values;
    let others_equal = (0..n).filter(|&p| p != 3).all(|p| base.index_axis(Axis(1), p) == pert.index_axis(Axis(1), p));
    let changed = base.index_axis(Axis(1), 3) != pert.index_axis(Axis(1), 3);
    results.push(("temporal cross-token locality", others_equal && changed));

    // Residual identity with zeroed output projections.
    let (cfg2, mut store2) = small_ast(2, 53);
    zero_output_projections(&mut store2);
    let z = randn3(&mut r, (t, n, d));
    let js = joint(z.clone(), Layout::TimeMajor);
    let sp = spatial_attention(&js, &cfg2, 0, &store2).unwrap();
    results.push(("spatial residual identity", sp.time_major() == z));
    let tm = temporal_attention(&js.transposed(), &cfg2, 1, &store2).unwrap();
    results.push(("temporal residual identity", tm.values == z));
    let full = ast_forward(&js, &cfg2, &store2).unwrap();
    results.push(("stacked residual identity", full.values == z));
    results
}

pub fn factorization() -> Outcome {
    let checks = factorization_checks();
    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    if failed.is_empty() {
        Outcome::new(true, format!("{} exact checks", checks.len()))
    } else {
        Outcome::new(false, format!("failed: {}", failed.join(", ")))
    }
}

/// 4. Analytic loss values.
pub fn analytic_losses() -> (f64, f64) {
    let mut r = rng(61);
    let single = BatchRepresentations::new(randn3(&mut r, (1, 3, 6)), randn5(&mut r, (1, 3, 2, 2, 6))).unwrap();
    let b1 = loss_total(&single).unwrap();
    let mut unit = Array3::zeros((2, 2, 8));
    unit.slice_mut(s![.., .., 0]).fill(1.0);
    let mut vis = ndarray::Array5::zeros((2, 2, 2, 2, 8));
    vis.slice_mut(s![.., .., .., .., 0]).fill(1.0);
    let b2 = loss_total(&BatchRepresentations::new(unit, vis).unwrap()).unwrap();
    (b1, b2)
}

pub fn analytic_loss() -> Outcome {
    let (b1, b2) = analytic_losses();
    let target = 2.0 * std::f64::consts::LN_2;
    Outcome::new(
        b1 == 0.0 && (b2 - target).abs() <= 1e-6,
        format!("B=1 loss {b1}; B=2 identical loss {b2:.9} (2 log 2 = {target:.9})"),
    )
}

/// Outcome of one `(W_a, T)` kernel-law trial: `true` when it behaved.
pub fn kernel_law_trial(w_a: usize, t: usize, h_a: usize, seed: u64) -> bool {
    let cfg = AudioEncoderConfig {
        freq_bins: h_a,
        time_steps: w_a,
        frames: t,
        channels: 4,
        feature_dim: 6,
    };
    let enc = AudioEncoder::new(cfg);
    if w_a < t {
        return enc.is_err() && audio_kernel_dims(w_a, h_a, t).is_err();
    }
    let Ok(enc) = enc else { return false };
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    enc.init(&mut store, &mut r);
    let spec = Spectrogram {
        values: Array2::from_shape_simple_fn((h_a, w_a), || r.gen_range(-8.0..0.0)),
        frame_hop_seconds: 0.01,
    };
    match enc.encode(&store, &spec) {
        Ok(out) => out.values.dim() == (t, 6) && enc.kernel == (w_a / t, h_a),
        Err(_) => false,
    }
}

/// 5. Kernel law over 200 random pairs.
pub fn kernel_law() -> Outcome {
    let mut r = rng(71);
    let mut bad = Vec::new();
    let mut degenerate = 0;
    for k in 0..200 {
        let t = r.gen_range(1..=64);
        let w_a = r.gen_range(1..=400);
        degenerate += (w_a < t) as usize;
        if !kernel_law_trial(w_a, t, r.gen_range(1..=6), k) {
            bad.push(format!("(W_a={w_a}, T={t})"));
        }
    }
    Outcome::new(
        bad.is_empty(),
        format!("200 pairs ({degenerate} with W_a < T), {} violations {}", bad.len(), bad.join(" ")),
    )
}

/// Measured cells of the behavioral run.
#[derive(Debug, Clone)]
pub struct BehavioralRun {
    pub train_clips: usize,
    pub test_clips: usize,
    pub steps: u64,
    pub first_loss: f64,
    pub final_loss: f64,
    pub report: MetricsReport,
    pub seconds: f64,
}

pub fn behavioral_run() -> BehavioralRun {
    let start = Instant::now();
    let cfg = RunConfig::default();
    let syn = &cfg.data.synthetic;
    let suite = make_suite(syn.seed, syn.counts, cfg.scene_geometry(), syn.splits).unwrap();
    let pick = |split: Split| -> Vec<ClipTensors> {
        suite
            .iter()
            .filter(|c| c.split == split)
            .map(|c| ClipTensors::from_labeled(c, &cfg).unwrap())
            .collect()
    };
    let (train_clips, test_clips) = (pick(Split::Train), pick(Split::Test));
    let ckpt = train(&cfg, &train_clips, &[], &TrainOptions::default()).unwrap();
    let report = evaluate(&ckpt, &test_clips, &cfg.eval).unwrap();
    BehavioralRun {
        train_clips: train_clips.len(),
        test_clips: test_clips.len(),
        steps: ckpt.step,
        first_loss: ckpt.history.first().map(|h| h.loss).unwrap_or(f64::NAN),
        final_loss: ckpt.history.last().map(|h| h.loss).unwrap_or(f64::NAN),
        report,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// 6. Behavioral reproduction on the synthetic task.
pub fn behavioral() -> Outcome {
    let run = behavioral_run();
    let single = run.report.value("single", "ciou").unwrap_or(f64::NAN);
    let delta = run.report.value("cross_event", "delta_ciou").unwrap_or(f64::NAN);
    let tn = run.report.value("off_screen", "tn").unwrap_or(f64::NAN);
    let checks = [
        single >= 70.0,
        delta.abs() <= 15.0,
        tn >= 85.0,
        run.seconds <= 1800.0,
    ];
    let mark = |ok: bool| if ok { "ok" } else { "FAIL" };
    Outcome::new(
        checks.iter().all(|&c| c),
        format!(
            "{} train / {} test clips, {} steps, loss {:.3} -> {:.3}; single CIoU {:.2} [{}], |delta CIoU| {:.2} [{}], off-screen TN {:.2} [{}], {:.0}s [{}]",
            run.train_clips,
            run.test_clips,
            run.steps,
            run.first_loss,
            run.final_loss,
            single,
            mark(checks[0]),
            delta.abs(),
            mark(checks[1]),
            tn,
            mark(checks[2]),
            run.seconds,
            mark(checks[3])
        ),
    )
}

/// Fraction of random batches on which mean and max negative pooling differ
/// by more than 1e-6.
pub fn ablation_fraction(batches: usize) -> f64 {
    let mut r = rng(81);
    let mut differ = 0;
    for _ in 0..batches {
        let mut batch = random_batch(&mut r, 2);
        while batch.batch() < 2 {
            batch = random_batch(&mut r, 2);
        }
        let mean = loss_with_options(&batch, &LossOptions::default()).unwrap().total;
        let max = loss_with_options(
            &batch,
            &LossOptions {
                negative_pooling: NegativePooling::Max,
                ..LossOptions::default()
            },
        )
        .unwrap()
        .total;
        differ += ((mean - max).abs() > 1e-6) as usize;
    }
    differ as f64 / batches as f64
}

/// 7. Ablation distinguishability.
pub fn ablation() -> Outcome {
    let frac = ablation_fraction(100);
    Outcome::new(frac >= 0.9, format!("{:.0}% of 100 random batches differ by > 1e-6", 100.0 * frac))
}

/// 8. Metric boundary pins.
pub fn metric_pin_checks() -> Vec<(&'static str, bool)> {
    let mut out = Vec::new();
    let mut r = rng(91);

    let mut perfect = Vec::new();
    for k in 0..12 {
        let gt = Array2::from_shape_fn((20, 20), |(y, x)| (k..k + 3).contains(&y) && (k..k + 3).contains(&x));
        perfect.push(record("p", k, gt.mapv(|g| g as u8 as f64), gt, &[Scenario::Single], false));
    }
    let (c, a) = ciou_auc(&perfect, ThresholdPolicy::default()).unwrap();
    out.push(("all-perfect predictions give (100, 100)", c == 100.0 && a == 100.0));

    let mut zero = perfect.clone();
    for rec in &mut zero {
        rec.heatmap = rec.gt.mapv(|g| if g { 0.0 } else { 1.0 });
    }
    let (c, a) = ciou_auc(&zero, ThresholdPolicy::FrameMinmaxFixed { cut: 0.5 }).unwrap();
    out.push(("all-miss predictions give (0, 100/21)", c == 0.0 && (a - 100.0 / 21.0).abs() < 1e-12));

    let frames: Vec<_> = (0..50)
        .map(|k| record("b", k, uniform2(&mut r, (8, 8)), Array2::from_elem((8, 8), false), &[], false))
        .collect();
    let masks = binarize(&frames, ThresholdPolicy::GlobalTopPercent { percent: 10.0 }).unwrap();
    let positives = masks.iter().map(|m| m.iter().filter(|&&b| b).count()).sum::<usize>() as f64;
    out.push(("global top-10% positive fraction within one pixel", (positives - 0.1 * 3200.0).abs() <= 1.0));

    let off = |heat: f64| record("o", 0, Array2::from_elem((4, 4), heat), Array2::from_elem((4, 4), false), &[Scenario::OffScreen], false);
    let on = |heat: f64| record("s", 0, Array2::from_elem((4, 4), heat), Array2::from_elem((4, 4), true), &[Scenario::Single], false);
    let mut below = vec![off(0.0)];
    below.extend((0..9).map(|_| on(1.0)));
    out.push((
        "all-zero off-screen maps under a positive cut give TN 100",
        offscreen_tn(&below, ThresholdPolicy::default()).unwrap() == 100.0,
    ));
    let mut above = vec![off(1.0)];
    above.extend((0..9).map(|_| on(0.0)));
    out.push((
        "off-screen maps entirely above the cut give TN 0",
        offscreen_tn(&above, ThresholdPolicy::GlobalTopPercent { percent: 50.0 }).unwrap() == 0.0,
    ));
    out
}

pub fn metric_pins() -> Outcome {
    let checks = metric_pin_checks();
    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    if failed.is_empty() {
        Outcome::new(true, format!("{} boundary pins exact", checks.len()))
    } else {
        Outcome::new(false, format!("failed: {}", failed.join(", ")))
    }
}

pub fn tiny_suite(cfg: &RunConfig, per_kind: usize, seed: u64) -> (Vec<tavlo_core::synthetic::LabeledClip>, Vec<ClipTensors>) {
    let suite = make_suite(
        seed,
        ScenarioCounts::uniform(per_kind),
        cfg.scene_geometry(),
        SplitFractions { val: 0.0, test: 0.0 },
    )
    .unwrap();
    let clips = suite.iter().map(|c| ClipTensors::from_labeled(c, cfg).unwrap()).collect();
    (suite, clips)
}

/// 9. Determinism and persistence. Returns the individual verdicts.
pub fn determinism_checks() -> Vec<(&'static str, bool)> {
    let mut out = Vec::new();
    let mut cfg = tiny_config();
    cfg.optimizer.max_steps = 6;
    let (suite, clips) = tiny_suite(&cfg, 2, 5);

    let a = train(&cfg, &clips, &[], &TrainOptions::default()).unwrap();
    let b = train(&cfg, &clips, &[], &TrainOptions::default()).unwrap();
    let curve = |c: &Checkpoint| c.history.iter().map(|h| h.loss.to_bits()).collect::<Vec<_>>();
    out.push(("same-seed loss curves identical", a.history.len() == 6 && curve(&a) == curve(&b) && a.weights == b.weights));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.ck");
    a.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let model = Model::new(&cfg.model).unwrap();
    let refs: Vec<&ClipTensors> = clips.iter().take(4).collect();
    let (a1, v1) = model.represent(&a.weights, &refs).unwrap();
    let (a2, v2) = model.represent(&loaded.weights, &refs).unwrap();
    let bits_eq = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits());
    out.push((
        "checkpoint round trip bit-exact",
        loaded == a
            && bits_eq(a1.as_slice().unwrap(), a2.as_slice().unwrap())
            && bits_eq(v1.as_slice().unwrap(), v2.as_slice().unwrap()),
    ));

    let manifests = write_suite(dir.path(), &suite).unwrap();
    let records = read_manifest(&manifests[0]).unwrap();
    let copy = dir.path().join("copy.jsonl");
    write_manifest(&copy, &records).unwrap();
    out.push((
        "manifest round trip",
        !records.is_empty() && read_manifest(&copy).unwrap() == records && std::fs::read(&copy).unwrap() == std::fs::read(&manifests[0]).unwrap(),
    ));

    let report = evaluate_oracle(&clips, &cfg.eval).unwrap();
    let rpath = dir.path().join("report.jsonl");
    report.save(&rpath).unwrap();
    out.push((
        "report round trip",
        MetricsReport::load(&rpath).unwrap() == report && MetricsReport::from_jsonl(&report.to_jsonl()).unwrap() == report,
    ));
    out
}

pub fn determinism() -> Outcome {
    let checks = determinism_checks();
    let failed: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    if failed.is_empty() {
        Outcome::new(true, checks.iter().map(|(n, _)| *n).collect::<Vec<_>>().join("; "))
    } else {
        Outcome::new(false, format!("failed: {}", failed.join(", ")))
    }
}

pub const CRITERIA: [(&str, fn() -> Outcome); 9] = [
    ("oracle equivalence", oracle_equivalence),
    ("gradient suite", gradient_suite),
    ("factorization invariants", factorization),
    ("analytic loss values", analytic_loss),
    ("audio kernel law", kernel_law),
    ("behavioral cross-event reproduction", behavioral),
    ("negative-pooling ablation", ablation),
    ("metric boundary pins", metric_pins),
    ("determinism and persistence", determinism),
];

pub fn unused_imports_guard() {
    let _ = IxDyn(&[1]);
}
