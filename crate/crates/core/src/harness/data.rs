//! Manifests, on-disk clip layout and model-ready clip tensors.
//!
//! A clip directory holds `frames.t4` (or numbered images under `frames/`),
//! `audio.wav` and optionally `gt.jsonl`. Manifest paths resolve against the
//! manifest's own directory.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::AudioEncoder;
use crate::error::{Error, Result};
use crate::evaluation::EvalRecord;
use crate::media_ingest::{
    compute_spectrogram, detect_audio_events, sample_clips, sample_frames, AudioEvent, FrameSequence, Waveform,
};
use crate::objective::upsample_bilinear;
use crate::synthetic::{read_ground_truth, write_ground_truth, FrameLabel, LabeledClip, Split};

use super::config::RunConfig;

pub const FRAMES_FILE: &str = "frames.t4";
pub const FRAMES_DIR: &str = "frames";
pub const AUDIO_FILE: &str = "audio.wav";
pub const GT_FILE: &str = "gt.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub clip_id: String,
    pub media_path: PathBuf,
    pub start_seconds: f64,
    pub selected_frame_indices: Vec<usize>,
    pub event_peak_times: Vec<f64>,
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::format("manifest", e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line).map_err(|e| Error::format(format!("{}:{}", path.display(), n + 1), e.to_string()))?;
        records.push(r);
    }
    Ok(records)
}

/// A clip ready for the model: raw frames, a normalized spectrogram cropped
/// or padded to `W_a` columns, and labels when available.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipTensors {
    pub clip_id: String,
    /// `T × H_v × W_v × 3` in [0, 1].
    pub frames: Array4<f32>,
    /// `H_a × W_a`.
    pub spectrogram: Array2<f64>,
    pub labels: Option<Vec<FrameLabel>>,
    /// Clip-relative indices of frames that enter evaluation.
    pub labeled_frames: Vec<usize>,
    pub cross_event: bool,
}

fn fit_columns(values: Array2<f64>, width: usize) -> Array2<f64> {
    let (h, w) = values.dim();
    if w == width {
        return values;
    }
    let mut out = Array2::zeros((h, width));
    let keep = w.min(width);
    out.slice_mut(s![.., ..keep]).assign(&values.slice(s![.., ..keep]));
    out
}

pub fn spectrogram_input(waveform: &Waveform, cfg: &RunConfig) -> Result<Array2<f64>> {
    let spec = compute_spectrogram(waveform, cfg.model.freq_bins, cfg.spectrogram_hop_seconds())?;
    let normalized = spec.values.mapv(AudioEncoder::normalize_input);
    Ok(fit_columns(normalized, cfg.model.time_steps))
}

impl ClipTensors {
    pub fn from_labeled(clip: &LabeledClip, cfg: &RunConfig) -> Result<Self> {
        if clip.waveform.sample_rate() != cfg.data.sample_rate {
            return Err(Error::config(
                "harness",
                "sample_rate",
                format!("clip `{}` is at {} Hz", clip.clip_id, clip.waveform.sample_rate()),
            ));
        }
        Ok(ClipTensors {
            clip_id: clip.clip_id.clone(),
            frames: clip.frames.frames.clone(),
            spectrogram: spectrogram_input(&clip.waveform, cfg)?,
            labels: Some(clip.labels.clone()),
            labeled_frames: (0..clip.labels.len()).collect(),
            cross_event: clip.cross_event,
        })
    }

    /// Evaluation records for the labeled frames, heatmaps upsampled to frame size.
    pub fn eval_records(&self, scores: &ndarray::Array3<f64>) -> Result<Vec<EvalRecord>> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::InvalidInput(format!("clip `{}` has no ground truth", self.clip_id)))?;
        let (_, hv, wv, _) = self.frames.dim();
        self.labeled_frames
            .iter()
            .map(|&t| {
                let label = labels
                    .get(t)
                    .ok_or_else(|| Error::InvalidInput(format!("clip `{}` lacks labels for frame {t}", self.clip_id)))?;
                Ok(EvalRecord {
                    clip_id: self.clip_id.clone(),
                    frame_index: t,
                    heatmap: upsample_bilinear(scores.index_axis(Axis(0), t), hv, wv),
                    gt: label.sounding_union(hv, wv),
                    tags: label.tags.clone(),
                    cross_event: self.cross_event,
                })
            })
            .collect()
    }
}

fn load_frames(dir: &Path, fps: f64) -> Result<FrameSequence> {
    let t4 = dir.join(FRAMES_FILE);
    if t4.exists() {
        FrameSequence::load_t4(&t4, fps)
    } else {
        FrameSequence::load_image_dir(&dir.join(FRAMES_DIR), fps)
    }
}

/// `n` indices spread evenly over `0..len`.
fn spread(len: usize, n: usize) -> Vec<usize> {
    (0..n).map(|k| ((k as f64 + 0.5) * len as f64 / n as f64).floor() as usize).collect()
}

/// Loads one manifest entry as a `T`-frame clip starting at `start_seconds`.
pub fn load_clip(record: &ManifestRecord, manifest_dir: &Path, cfg: &RunConfig) -> Result<ClipTensors> {
    let dir = if record.media_path.is_absolute() {
        record.media_path.clone()
    } else {
        manifest_dir.join(&record.media_path)
    };
    let fs = load_frames(&dir, cfg.data.fps)?;
    let (hv, wv) = (fs.height(), fs.width());
    if (hv, wv) != (cfg.model.frame_height, cfg.model.frame_width) {
        return Err(Error::config(
            "encoders",
            "frame_height",
            format!("clip `{}` frames are {hv}×{wv}", record.clip_id),
        ));
    }
    let length = cfg.clip_seconds();
    let start = record.start_seconds;
    let in_window: Vec<usize> = (0..fs.len())
        .filter(|&i| fs.timestamps[i] >= start - 1e-9 && fs.timestamps[i] < start + length - 1e-9)
        .collect();
    if in_window.is_empty() {
        return Err(Error::InvalidInput(format!("clip `{}` has no frames in its window", record.clip_id)));
    }
    let t = cfg.model.frames;
    let source: Vec<usize> = if in_window.len() == t {
        in_window
    } else {
        spread(in_window.len(), t).into_iter().map(|k| in_window[k]).collect()
    };
    let mut frames = Array4::zeros((t, hv, wv, 3));
    for (k, &i) in source.iter().enumerate() {
        frames.index_axis_mut(Axis(0), k).assign(&fs.frame(i));
    }

    let waveform = Waveform::load_wav(&dir.join(AUDIO_FILE))?;
    let waveform = waveform.slice_seconds(start, length)?;
    let spectrogram = spectrogram_input(&waveform, cfg)?;

    let gt_path = dir.join(GT_FILE);
    let (labels, cross_event) = if gt_path.exists() {
        let (all, cross) = read_ground_truth(&gt_path, fs.len(), hv, wv)?;
        (Some(source.iter().map(|&i| all[i].clone()).collect::<Vec<_>>()), cross)
    } else {
        (None, false)
    };
    let selected: BTreeSet<usize> = record.selected_frame_indices.iter().copied().collect();
    let labeled_frames = (0..t).filter(|&k| selected.contains(&source[k])).collect();
    Ok(ClipTensors {
        clip_id: record.clip_id.clone(),
        frames,
        spectrogram,
        labels,
        labeled_frames,
        cross_event,
    })
}

pub fn load_manifest_clips(path: &Path, cfg: &RunConfig) -> Result<Vec<ClipTensors>> {
    let dir = path.parent().unwrap_or(Path::new("."));
    read_manifest(path)?.iter().map(|r| load_clip(r, dir, cfg)).collect()
}

/// Writes every clip under `out/clips/<clip_id>/` plus one manifest per split
/// (`manifest_train.jsonl`, ...). Returns the manifest paths in split order.
pub fn write_suite(out: &Path, clips: &[LabeledClip]) -> Result<Vec<PathBuf>> {
    let clips_dir = out.join("clips");
    std::fs::create_dir_all(&clips_dir).map_err(|e| Error::io(&clips_dir, e))?;
    let mut per_split: Vec<(Split, Vec<ManifestRecord>)> =
        [Split::Train, Split::Val, Split::Test].into_iter().map(|s| (s, Vec::new())).collect();
    for clip in clips {
        let dir = clips_dir.join(&clip.clip_id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        clip.frames.save_t4(&dir.join(FRAMES_FILE))?;
        clip.waveform.save_wav(&dir.join(AUDIO_FILE))?;
        write_ground_truth(&dir.join(GT_FILE), clip)?;
        let record = ManifestRecord {
            clip_id: clip.clip_id.clone(),
            media_path: PathBuf::from("clips").join(&clip.clip_id),
            start_seconds: 0.0,
            selected_frame_indices: (0..clip.labels.len()).collect(),
            event_peak_times: Vec::new(),
        };
        per_split
            .iter_mut()
            .find(|(s, _)| *s == clip.split)
            .expect("all splits listed")
            .1
            .push(record);
    }
    let mut paths = Vec::new();
    for (split, records) in per_split {
        let path = out.join(format!("manifest_{}.jsonl", split.name()));
        write_manifest(&path, &records)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Runs clip and frame sampling over the clip-layout media in `media_dir`
/// and returns up to `n_clips` manifest records, picked at random (seeded)
/// among the candidate windows and listed by start time.
pub fn sample_media(media_dir: &Path, cfg: &RunConfig, n_clips: usize, seed: u64) -> Result<(Vec<ManifestRecord>, Vec<String>)> {
    let sampling = &cfg.data.sampling;
    sampling.validate()?;
    let waveform = Waveform::load_wav(&media_dir.join(AUDIO_FILE))?;
    let fs = load_frames(media_dir, cfg.data.fps)?;
    let candidates = sample_clips(&waveform, sampling)?;
    let mut warnings: Vec<String> = candidates.warning.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts: Vec<f64> = candidates.starts.choose_multiple(&mut rng, n_clips).copied().collect();
    starts.sort_by(f64::total_cmp);
    let stem = media_dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "media".into());
    let mut records = Vec::new();
    for (k, &start) in starts.iter().enumerate() {
        let window = waveform.slice_seconds(start, sampling.window_length)?;
        let events: Vec<AudioEvent> = detect_audio_events(&window, sampling)?
            .into_iter()
            .map(|e| AudioEvent::at(e.peak_time + start, e.peak_rms))
            .collect();
        let end = start + sampling.window_length;
        let inside: Vec<usize> = (0..fs.len())
            .filter(|&i| fs.timestamps[i] >= start && fs.timestamps[i] < end)
            .collect();
        if inside.is_empty() {
            warnings.push(format!("window at {start:.2}s has no frames"));
            continue;
        }
        let sub = FrameSequence::with_timestamps(
            fs.frames.select(Axis(0), &inside),
            fs.fps,
            inside.iter().map(|&i| fs.timestamps[i]).collect(),
        )?;
        let selection = sample_frames(&sub, &events, sampling)?;
        warnings.extend(selection.warnings);
        records.push(ManifestRecord {
            clip_id: format!("{stem}_{k:03}"),
            media_path: media_dir.to_path_buf(),
            start_seconds: start,
            selected_frame_indices: selection.indices.iter().map(|&i| inside[i]).collect(),
            event_peak_times: selection.event_peak_times,
        });
    }
    Ok((records, warnings))
}
