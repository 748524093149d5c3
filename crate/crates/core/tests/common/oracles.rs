//! Brute-force reference implementations written with explicit loops.

use ndarray::{Array2, Array3, Array4, Array5};

use tavlo_core::evaluation::EvalRecord;
use tavlo_core::media_ingest::AudioEvent;

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for k in 0..a.len() {
        dot += a[k] * b[k];
        na += a[k] * a[k];
        nb += b[k] * b[k];
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

fn audio_vec(audio: &Array3<f64>, i: usize, t: usize) -> Vec<f64> {
    (0..audio.shape()[2]).map(|k| audio[[i, t, k]]).collect()
}

fn visual_vec(visual: &Array5<f64>, i: usize, t: usize, x: usize, y: usize) -> Vec<f64> {
    (0..visual.shape()[4]).map(|k| visual[[i, t, x, y, k]]).collect()
}

/// Cosines of audio `(i, t)` against every location of clip `j` at `t`.
fn bag(audio: &Array3<f64>, visual: &Array5<f64>, i: usize, j: usize, t: usize) -> Vec<f64> {
    let a = audio_vec(audio, i, t);
    let mut out = Vec::new();
    for x in 0..visual.shape()[2] {
        for y in 0..visual.shape()[3] {
            out.push(cosine(&a, &visual_vec(visual, j, t, x, y)));
        }
    }
    out
}

fn max_of(v: &[f64]) -> f64 {
    let mut m = v[0];
    for &x in v {
        if x > m {
            m = x;
        }
    }
    m
}

fn mean_of(v: &[f64]) -> f64 {
    let mut s = 0.0;
    for &x in v {
        s += x;
    }
    s / v.len() as f64
}

/// `(L_a2v, L_v2a)` with mean (or max) pooled negative bags.
pub fn loss(audio: &Array3<f64>, visual: &Array5<f64>, max_negatives: bool) -> (f64, f64) {
    let (b, t_len, _) = audio.dim();
    let pool = |v: &[f64]| if max_negatives { max_of(v) } else { mean_of(v) };
    let mut a2v = 0.0;
    let mut v2a = 0.0;
    for t in 0..t_len {
        for i in 0..b {
            let p = max_of(&bag(audio, visual, i, i, t));
            let mut den_a = p.exp();
            let mut den_v = p.exp();
            for j in 0..b {
                if j != i {
                    den_a += pool(&bag(audio, visual, i, j, t)).exp();
                    den_v += pool(&bag(audio, visual, j, i, t)).exp();
                }
            }
            a2v += -(p.exp() / den_a).ln();
            v2a += -(p.exp() / den_v).ln();
        }
    }
    let n = (b * t_len) as f64;
    (a2v / n, v2a / n)
}

pub fn positive(a: &[f64], v: &Array3<f64>) -> f64 {
    let mut best = f64::NEG_INFINITY;
    for x in 0..v.shape()[0] {
        for y in 0..v.shape()[1] {
            let loc: Vec<f64> = (0..v.shape()[2]).map(|k| v[[x, y, k]]).collect();
            let c = cosine(a, &loc);
            if c > best {
                best = c;
            }
        }
    }
    best
}

pub fn negative(a: &[f64], v: &Array3<f64>) -> f64 {
    let mut sum = 0.0;
    for x in 0..v.shape()[0] {
        for y in 0..v.shape()[1] {
            let loc: Vec<f64> = (0..v.shape()[2]).map(|k| v[[x, y, k]]).collect();
            sum += cosine(a, &loc);
        }
    }
    sum / (v.shape()[0] * v.shape()[1]) as f64
}

pub fn localization(a: &Array2<f64>, v: &Array4<f64>) -> Array3<f64> {
    let (t_len, h, w, d) = v.dim();
    let mut out = Array3::zeros((t_len, h, w));
    for t in 0..t_len {
        let at: Vec<f64> = (0..d).map(|k| a[[t, k]]).collect();
        for x in 0..h {
            for y in 0..w {
                let loc: Vec<f64> = (0..d).map(|k| v[[t, x, y, k]]).collect();
                out[[t, x, y]] = cosine(&at, &loc);
            }
        }
    }
    out
}

pub fn iou(pred: &Array2<bool>, gt: &Array2<bool>) -> f64 {
    let mut inter = 0;
    let mut union = 0;
    for r in 0..gt.nrows() {
        for c in 0..gt.ncols() {
            if pred[[r, c]] && gt[[r, c]] {
                inter += 1;
            }
            if pred[[r, c]] || gt[[r, c]] {
                union += 1;
            }
        }
    }
    inter as f64 / union as f64
}

/// Global top-`p`% cut by full sort: the `floor((100 − p)/100 · N)`th
/// smallest pooled value, or −∞ when that rank is zero.
pub fn global_cut(records: &[EvalRecord], percent: f64) -> f64 {
    let mut all: Vec<f64> = records.iter().flat_map(|r| r.heatmap.iter().copied()).collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = ((100.0 - percent) / 100.0 * all.len() as f64).floor() as usize;
    if k == 0 {
        f64::NEG_INFINITY
    } else {
        all[k - 1]
    }
}

pub fn ciou_auc(records: &[EvalRecord], percent: f64) -> (f64, f64) {
    let cut = global_cut(records, percent);
    let mut ious = Vec::new();
    for r in records {
        if r.gt.iter().any(|&g| g) {
            ious.push(iou(&r.heatmap.mapv(|v| v > cut), &r.gt));
        }
    }
    let n = ious.len() as f64;
    let ciou = ious.iter().filter(|&&x| x >= 0.5).count() as f64 / n * 100.0;
    let mut auc = 0.0;
    for i in 0..21 {
        let tau = i as f64 / 20.0;
        auc += ious.iter().filter(|&&x| x >= tau).count() as f64 / n;
    }
    (ciou, auc / 21.0 * 100.0)
}

pub fn tn(records: &[EvalRecord], percent: f64) -> f64 {
    let cut = global_cut(records, percent);
    let mut below = 0usize;
    let mut total = 0usize;
    for r in records {
        let off = r.tags.contains(&tavlo_core::synthetic::Scenario::OffScreen) && !r.gt.iter().any(|&g| g);
        if !off {
            continue;
        }
        for &v in r.heatmap.iter() {
            total += 1;
            if v <= cut {
                below += 1;
            }
        }
    }
    100.0 * below as f64 / total as f64
}

pub fn rms(samples: &[f64], per_interval: usize) -> Vec<f64> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < samples.len() {
        let end = (start + per_interval).min(samples.len());
        let mut ss = 0.0;
        for &x in &samples[start..end] {
            ss += x * x;
        }
        out.push((ss / (end - start) as f64).sqrt());
        start = end;
    }
    out
}

/// Every window of `m` whole intervals that holds ≥ `min_active` intervals
/// with RMS above `threshold`; returns start indices.
pub fn clip_starts(samples: &[f64], per_interval: usize, m: usize, min_active: usize, threshold: f64) -> Vec<usize> {
    let full = samples.len() / per_interval;
    let r = rms(samples, per_interval);
    let mut out = Vec::new();
    let mut s = 0;
    while s + m <= full {
        let mut count = 0;
        for k in s..s + m {
            if r[k] > threshold {
                count += 1;
            }
        }
        if count >= min_active {
            out.push(s);
        }
        s += 1;
    }
    out
}

pub fn laplacian_gray(gray: &Array2<f64>) -> f64 {
    let (h, w) = gray.dim();
    let mut resp = Vec::new();
    for r in 1..h - 1 {
        for c in 1..w - 1 {
            resp.push(gray[[r - 1, c]] + gray[[r + 1, c]] + gray[[r, c - 1]] + gray[[r, c + 1]] - 4.0 * gray[[r, c]]);
        }
    }
    let mean = mean_of(&resp);
    let mut var = 0.0;
    for x in &resp {
        var += (x - mean) * (x - mean);
    }
    var / resp.len() as f64
}

pub fn gray_of(frame: &ndarray::Array3<f32>) -> Array2<f64> {
    let (h, w, c) = frame.dim();
    Array2::from_shape_fn((h, w), |(r, col)| {
        let mut s = 0.0;
        for k in 0..c {
            s += frame[[r, col, k]] as f64;
        }
        s / c as f64
    })
}

/// Greedy selection in descending intensity, with exclusion radius and cap,
/// by repeated maximum extraction.
pub fn select(timestamps: &[f64], sharpness: &[f64], events: &[AudioEvent], cap: usize, radius: f64) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..events.len()).collect();
    let mut kept_times: Vec<f64> = Vec::new();
    let mut frames = Vec::new();
    while !remaining.is_empty() && frames.len() < cap {
        let mut best = 0;
        for (pos, &e) in remaining.iter().enumerate() {
            if events[e].peak_rms > events[remaining[best]].peak_rms {
                best = pos;
            }
        }
        let e = remaining.remove(best);
        let ev = events[e];
        if kept_times.iter().any(|&t| (t - ev.peak_time).abs() <= radius) {
            continue;
        }
        let mut pick: Option<usize> = None;
        for (i, &ts) in timestamps.iter().enumerate() {
            if ts >= ev.peak_time - 0.1 && ts <= ev.peak_time + 0.1 {
                match pick {
                    Some(p) if sharpness[p] >= sharpness[i] => {}
                    _ => pick = Some(i),
                }
            }
        }
        if let Some(i) = pick {
            kept_times.push(ev.peak_time);
            frames.push(i);
        }
    }
    frames.sort();
    frames.dedup();
    frames
}
