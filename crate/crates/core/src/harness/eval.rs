//! Inference over labeled clips, metric reports and heatmap export.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::evaluation::{load_heatmap_png16, load_heatmaps_t4, scenario_report, EvalConfig, EvalRecord, MetricsReport};
use crate::objective::upsample_bilinear;
use crate::params::ParamStore;

use super::checkpoint::Checkpoint;
use super::config::ModelConfig;
use super::data::ClipTensors;
use super::model::Model;

/// Clips per inference batch; the AST treats every clip independently.
const INFERENCE_BATCH: usize = 8;

/// Lists the model fields that differ, as `field: a -> b`.
pub fn config_diff(a: &ModelConfig, b: &ModelConfig) -> Vec<String> {
    let (va, vb) = (serde_json::to_value(a).expect("serializes"), serde_json::to_value(b).expect("serializes"));
    let (Some(ma), Some(mb)) = (va.as_object(), vb.as_object()) else {
        return Vec::new();
    };
    ma.iter()
        .filter(|(k, v)| mb.get(*k) != Some(*v))
        .map(|(k, v)| format!("model.{k}: {v} -> {}", mb.get(k).cloned().unwrap_or_default()))
        .collect()
}

pub fn model_records(model: &Model, weights: &ParamStore, clips: &[ClipTensors]) -> Result<Vec<EvalRecord>> {
    let mut records = Vec::new();
    for chunk in clips.chunks(INFERENCE_BATCH) {
        let refs: Vec<&ClipTensors> = chunk.iter().collect();
        let maps = model.localize(weights, &refs)?;
        for (clip, map) in chunk.iter().zip(maps) {
            records.extend(clip.eval_records(&map.scores)?);
        }
    }
    Ok(records)
}

pub fn evaluate_clips(model: &Model, weights: &ParamStore, clips: &[ClipTensors], eval: &EvalConfig) -> Result<MetricsReport> {
    if clips.is_empty() {
        return Err(Error::EmptySet("no clips to evaluate".into()));
    }
    scenario_report(&model_records(model, weights, clips)?, eval)
}

pub fn evaluate(ckpt: &Checkpoint, clips: &[ClipTensors], eval: &EvalConfig) -> Result<MetricsReport> {
    let model = Model::new(&ckpt.config.model)?;
    model.check_store(&ckpt.weights)?;
    evaluate_clips(&model, &ckpt.weights, clips, eval)
}

/// Records whose heatmaps are the ground-truth masks themselves (1 inside,
/// 0 outside); exercises the evaluation plumbing without a model.
pub fn oracle_records(clips: &[ClipTensors]) -> Result<Vec<EvalRecord>> {
    let mut records = Vec::new();
    for clip in clips {
        let (t, h, w, _) = clip.frames.dim();
        let labels = clip
            .labels
            .as_ref()
            .ok_or_else(|| Error::InvalidInput(format!("clip `{}` has no ground truth", clip.clip_id)))?;
        let mut scores = ndarray::Array3::zeros((t, h, w));
        for (k, label) in labels.iter().enumerate().take(t) {
            let union = label.sounding_union(h, w);
            scores
                .index_axis_mut(ndarray::Axis(0), k)
                .assign(&union.mapv(|m| if m { 1.0 } else { 0.0 }));
        }
        records.extend(clip.eval_records(&scores)?);
    }
    Ok(records)
}

pub fn evaluate_oracle(clips: &[ClipTensors], eval: &EvalConfig) -> Result<MetricsReport> {
    if clips.is_empty() {
        return Err(Error::EmptySet("no clips to evaluate".into()));
    }
    scenario_report(&oracle_records(clips)?, eval)
}

/// Records built from externally produced heatmaps: `{clip_id}.t4` holding
/// `T` maps, or `{clip_id}_{frame}.png` 16-bit images whose codes span
/// `png_range`. Maps are resized to frame size bilinearly when needed.
pub fn external_records(clips: &[ClipTensors], dir: &Path, png_range: (f64, f64)) -> Result<Vec<EvalRecord>> {
    let mut records = Vec::new();
    for clip in clips {
        let (t, h, w, _) = clip.frames.dim();
        let t4 = dir.join(format!("{}.t4", clip.clip_id));
        let mut scores = ndarray::Array3::zeros((t, h, w));
        if t4.exists() {
            let maps = load_heatmaps_t4(&t4)?;
            if maps.len() != t {
                return Err(Error::ShapeMismatch(format!("{} holds {} maps for {t} frames", t4.display(), maps.len())));
            }
            for (k, m) in maps.iter().enumerate() {
                scores.index_axis_mut(ndarray::Axis(0), k).assign(&upsample_bilinear(m.view(), h, w));
            }
        } else {
            for &k in &clip.labeled_frames {
                let png = dir.join(format!("{}_{}.png", clip.clip_id, k));
                let m = load_heatmap_png16(&png, png_range.0, png_range.1)?;
                scores.index_axis_mut(ndarray::Axis(0), k).assign(&upsample_bilinear(m.view(), h, w));
            }
        }
        records.extend(clip.eval_records(&scores)?);
    }
    Ok(records)
}

/// Maps a cosine score in [-1, 1] to 0..=255.
fn gray(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) / 2.0) * 255.0).round() as u8
}

fn heatmap_image(map: &Array2<f64>) -> GrayImage {
    let (h, w) = map.dim();
    GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([gray(map[[y as usize, x as usize]])]))
}

fn overlay_image(frame: ndarray::ArrayView3<'_, f32>, map: &Array2<f64>, boxes: &[[usize; 4]]) -> RgbImage {
    let (h, w) = map.dim();
    let mut img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let heat = gray(map[[y, x]]) as f32 / 255.0;
        let tint = [heat, 0.0, 1.0 - heat];
        Rgb([0, 1, 2].map(|c| ((0.6 * frame[[y, x, c]] + 0.4 * tint[c]).clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    let green = Rgb([0, 255, 0]);
    for &[r0, c0, r1, c1] in boxes {
        if r1 <= r0 || c1 <= c0 {
            continue;
        }
        for x in c0..c1 {
            img.put_pixel(x as u32, r0 as u32, green);
            img.put_pixel(x as u32, (r1 - 1) as u32, green);
        }
        for y in r0..r1 {
            img.put_pixel(c0 as u32, y as u32, green);
            img.put_pixel((c1 - 1) as u32, y as u32, green);
        }
    }
    img
}

/// Writes `heatmap/{clip_id}_{frame}.png` and `overlay/{clip_id}_{frame}.png`
/// for every labeled frame; returns the number of frames written.
pub fn export_heatmaps(ckpt: &Checkpoint, clips: &[ClipTensors], out_dir: &Path) -> Result<usize> {
    let model = Model::new(&ckpt.config.model)?;
    model.check_store(&ckpt.weights)?;
    let heat_dir = out_dir.join("heatmap");
    let over_dir = out_dir.join("overlay");
    for d in [&heat_dir, &over_dir] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut written = 0;
    for chunk in clips.chunks(INFERENCE_BATCH) {
        let refs: Vec<&ClipTensors> = chunk.iter().collect();
        let maps = model.localize(&ckpt.weights, &refs)?;
        for (clip, map) in chunk.iter().zip(maps) {
            let (_, hv, wv, _) = clip.frames.dim();
            for &t in &clip.labeled_frames {
                let up = map.upsampled(t, hv, wv);
                let boxes: Vec<[usize; 4]> = clip
                    .labels
                    .as_ref()
                    .and_then(|l| l.get(t))
                    .map(|l| l.instances.iter().filter(|i| i.is_sounding).map(|i| i.bbox).collect())
                    .unwrap_or_default();
                let name = format!("{}_{}.png", clip.clip_id, t);
                let save_err = |p: &Path, e: image::ImageError| Error::format(p.display().to_string(), e.to_string());
                let hp = heat_dir.join(&name);
                heatmap_image(&up).save(&hp).map_err(|e| save_err(&hp, e))?;
                let op = over_dir.join(&name);
                overlay_image(clip.frames.index_axis(ndarray::Axis(0), t), &up, &boxes)
                    .save(&op)
                    .map_err(|e| save_err(&op, e))?;
                written += 1;
            }
        }
    }
    Ok(written)
}
