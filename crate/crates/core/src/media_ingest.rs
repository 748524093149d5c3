//! Clip media loading, RMS energy, clip and frame sampling, Laplacian
//! sharpness and log-magnitude spectrograms.

use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array2, Array4, ArrayView2, ArrayView3, Axis};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_io::{self, RawTensor, TensorData};

/// Natural-log floor applied to spectrogram magnitudes.
pub const LOG_FLOOR: f64 = 1e-5;

/// Half-width of the window wrapped around an RMS peak.
pub const EVENT_HALF_WIDTH: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample_rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::InvalidInput("waveform is empty".into()));
        }
        Ok(Waveform { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Reads a mono WAV file (integer PCM or float).
    pub fn load_wav(path: &Path) -> Result<Self> {
        let mut reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(Error::InvalidInput(format!(
                "{}: expected single-channel audio, found {} channels",
                path.display(),
                spec.channels
            )));
        }
        let samples: Vec<f64> = match spec.sample_format {
            hound::SampleFormat::Float => reader
                .samples::<f32>()
                .map(|s| s.map(|x| x as f64))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| wav_error(path, e))?,
            hound::SampleFormat::Int => {
                let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
                reader
                    .samples::<i32>()
                    .map(|s| s.map(|x| x as f64 / scale))
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| wav_error(path, e))?
            }
        };
        Waveform::new(samples, spec.sample_rate)
    }

    /// Writes 32-bit float mono WAV.
    pub fn save_wav(&self, path: &Path) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
        for &s in &self.samples {
            writer.write_sample(s as f32).map_err(|e| wav_error(path, e))?;
        }
        writer.finalize().map_err(|e| wav_error(path, e))
    }

    /// Reads a headerless little-endian f32 sample file.
    pub fn load_raw_f32(path: &Path, sample_rate: u32) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::format(path.display().to_string(), "raw f32 file length is not a multiple of 4"));
        }
        let samples = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Waveform::new(samples, sample_rate)
    }

    /// Dispatches on extension: `.wav` is parsed, anything else is raw f32.
    pub fn load(path: &Path, raw_sample_rate: u32) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("wav") => Self::load_wav(path),
            _ => Self::load_raw_f32(path, raw_sample_rate),
        }
    }

    pub fn slice_seconds(&self, start: f64, length: f64) -> Result<Waveform> {
        let sr = self.sample_rate as f64;
        let a = (start * sr).round().max(0.0) as usize;
        let b = ((start + length) * sr).round() as usize;
        let b = b.min(self.samples.len());
        if a >= b {
            return Err(Error::InvalidInput(format!("empty slice [{start}, {})", start + length)));
        }
        Waveform::new(self.samples[a..b].to_vec(), self.sample_rate)
    }
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::format(path.display().to_string(), other.to_string()),
    }
}

/// Frequency bins × time steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub values: Array2<f64>,
    pub frame_hop_seconds: f64,
}

impl Spectrogram {
    pub fn freq_bins(&self) -> usize {
        self.values.nrows()
    }

    pub fn time_steps(&self) -> usize {
        self.values.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    /// T × H × W × 3, channels in [0, 1].
    pub frames: Array4<f32>,
    pub fps: f64,
    pub timestamps: Vec<f64>,
}

impl FrameSequence {
    /// Frames at `t / fps` starting from zero.
    pub fn from_frames(frames: Array4<f32>, fps: f64) -> Result<Self> {
        if !(fps > 0.0) {
            return Err(Error::InvalidInput("fps must be positive".into()));
        }
        let t = frames.shape()[0];
        if t == 0 {
            return Err(Error::InvalidInput("frame sequence is empty".into()));
        }
        if frames.shape()[3] != 3 {
            return Err(Error::InvalidInput(format!("expected 3 channels, got {}", frames.shape()[3])));
        }
        let timestamps = (0..t).map(|i| i as f64 / fps).collect();
        Ok(FrameSequence { frames, fps, timestamps })
    }

    /// Explicit timestamps; they must increase strictly.
    pub fn with_timestamps(frames: Array4<f32>, fps: f64, timestamps: Vec<f64>) -> Result<Self> {
        let seq = Self::from_frames(frames, fps)?;
        if timestamps.len() != seq.len() {
            return Err(Error::InvalidInput("one timestamp per frame required".into()));
        }
        if timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput("timestamps must be strictly increasing".into()));
        }
        Ok(FrameSequence { timestamps, ..seq })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn frame(&self, t: usize) -> ArrayView3<'_, f32> {
        self.frames.index_axis(Axis(0), t)
    }

    pub fn save_t4(&self, path: &Path) -> Result<()> {
        let dims = [self.len(), self.height(), self.width(), 3];
        let data = self.frames.iter().copied().collect();
        tensor_io::save_tensor(path, &RawTensor::new(dims, TensorData::F32(data))?)
    }

    pub fn load_t4(path: &Path, fps: f64) -> Result<Self> {
        let raw = tensor_io::load_tensor(path)?;
        Self::from_frames(raw.to_array4_f32(), fps)
    }

    /// Loads a directory of numbered PNG/JPEG frames, ordered by the number
    /// embedded in each file stem.
    pub fn load_image_dir(dir: &Path, fps: f64) -> Result<Self> {
        let mut numbered = Vec::new();
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            let digits: String = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("")
                .chars()
                .filter(|c| c.is_ascii_digit())
                .collect();
            if let Ok(n) = digits.parse::<u64>() {
                numbered.push((n, path));
            }
        }
        numbered.sort();
        if numbered.is_empty() {
            return Err(Error::InvalidInput(format!("{}: no numbered frames", dir.display())));
        }
        let mut frames: Option<Array4<f32>> = None;
        for (t, (_, path)) in numbered.iter().enumerate() {
            let img = image::open(path)
                .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?
                .to_rgb32f();
            let (w, h) = img.dimensions();
            let buf = frames.get_or_insert_with(|| Array4::zeros((numbered.len(), h as usize, w as usize, 3)));
            if buf.shape()[1] != h as usize || buf.shape()[2] != w as usize {
                return Err(Error::ShapeMismatch(format!("{}: frame size differs", path.display())));
            }
            for (x, y, px) in img.enumerate_pixels() {
                for c in 0..3 {
                    buf[[t, y as usize, x as usize, c]] = px[c];
                }
            }
        }
        Self::from_frames(frames.expect("non-empty"), fps)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AudioEvent {
    pub peak_time: f64,
    pub window: (f64, f64),
    pub peak_rms: f64,
}

impl AudioEvent {
    pub fn at(peak_time: f64, peak_rms: f64) -> Self {
        AudioEvent {
            peak_time,
            window: (peak_time - EVENT_HALF_WIDTH, peak_time + EVENT_HALF_WIDTH),
            peak_rms,
        }
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.window.0 && t <= self.window.1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub rms_threshold: f64,
    pub rms_interval: f64,
    pub window_length: f64,
    pub min_active_intervals: usize,
    pub max_frames_per_clip: usize,
    pub event_exclusion_radius: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            rms_threshold: 0.01,
            rms_interval: 1.0,
            window_length: 10.0,
            min_active_intervals: 5,
            max_frames_per_clip: 5,
            event_exclusion_radius: 0.7,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        const M: &str = "media_ingest";
        if !(self.rms_threshold > 0.0) {
            return Err(Error::config(M, "rms_threshold", "must be positive"));
        }
        if !(self.rms_interval > 0.0) {
            return Err(Error::config(M, "rms_interval", "must be positive"));
        }
        if !(self.window_length > 0.0) {
            return Err(Error::config(M, "window_length", "must be positive"));
        }
        if self.min_active_intervals == 0 {
            return Err(Error::config(M, "min_active_intervals", "must be positive"));
        }
        if self.max_frames_per_clip == 0 {
            return Err(Error::config(M, "max_frames_per_clip", "must be positive"));
        }
        if !(self.event_exclusion_radius > 0.0) {
            return Err(Error::config(M, "event_exclusion_radius", "must be positive"));
        }
        if self.min_active_intervals as f64 > self.window_length / self.rms_interval + 1e-9 {
            return Err(Error::config(
                M,
                "min_active_intervals",
                "cannot exceed window_length / rms_interval",
            ));
        }
        Ok(())
    }

    fn intervals_per_window(&self) -> usize {
        (self.window_length / self.rms_interval).round() as usize
    }
}

fn interval_samples(sample_rate: u32, interval_seconds: f64) -> Result<usize> {
    let n = (interval_seconds * sample_rate as f64).round();
    if !(n >= 1.0) {
        return Err(Error::InvalidInput(format!(
            "interval of {interval_seconds}s holds no samples at {sample_rate} Hz"
        )));
    }
    Ok(n as usize)
}

/// One RMS value per non-overlapping interval; a trailing partial interval
/// is kept.
pub fn compute_rms(w: &Waveform, interval_seconds: f64) -> Result<Vec<f64>> {
    if w.is_empty() {
        return Err(Error::InvalidInput("waveform is empty".into()));
    }
    let n = interval_samples(w.sample_rate, interval_seconds)?;
    Ok(w.samples
        .chunks(n)
        .map(|chunk| (chunk.iter().map(|x| x * x).sum::<f64>() / chunk.len() as f64).sqrt())
        .collect())
}

/// Candidate clip start times plus a warning when nothing could be scanned.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClipCandidates {
    pub starts: Vec<f64>,
    pub warning: Option<String>,
}

pub fn sample_clips(w: &Waveform, cfg: &SamplingConfig) -> Result<ClipCandidates> {
    cfg.validate()?;
    if w.duration() + 1e-9 < cfg.window_length {
        return Ok(ClipCandidates {
            starts: Vec::new(),
            warning: Some(format!(
                "waveform lasts {:.3}s, shorter than the {:.3}s window",
                w.duration(),
                cfg.window_length
            )),
        });
    }
    let rms = compute_rms(w, cfg.rms_interval)?;
    let per_interval = interval_samples(w.sample_rate, cfg.rms_interval)?;
    let full_intervals = w.len() / per_interval;
    let m = cfg.intervals_per_window();
    let active: Vec<bool> = rms.iter().map(|&r| r > cfg.rms_threshold).collect();

    let mut starts = Vec::new();
    if full_intervals >= m {
        let mut count = active[..m].iter().filter(|&&a| a).count();
        for k in 0..=(full_intervals - m) {
            if k > 0 {
                count = count + active[k + m - 1] as usize - active[k - 1] as usize;
            }
            if count >= cfg.min_active_intervals {
                starts.push(k as f64 * cfg.rms_interval);
            }
        }
    }
    Ok(ClipCandidates { starts, warning: None })
}

/// Strict local maxima of an RMS sequence above `threshold`. A run of equal
/// values counts as one maximum, reported at its first index.
pub fn rms_peaks(rms: &[f64], threshold: f64) -> Vec<usize> {
    let mut peaks = Vec::new();
    let mut k = 0;
    while k < rms.len() {
        let mut end = k;
        while end + 1 < rms.len() && rms[end + 1] == rms[k] {
            end += 1;
        }
        let left_lower = k == 0 || rms[k - 1] < rms[k];
        let right_lower = end + 1 == rms.len() || rms[end + 1] < rms[k];
        if left_lower && right_lower && rms[k] > threshold {
            peaks.push(k);
        }
        k = end + 1;
    }
    peaks
}

pub fn detect_audio_events(w: &Waveform, cfg: &SamplingConfig) -> Result<Vec<AudioEvent>> {
    let rms = compute_rms(w, cfg.rms_interval)?;
    let duration = w.duration();
    Ok(rms_peaks(&rms, cfg.rms_threshold)
        .into_iter()
        .map(|k| {
            let start = k as f64 * cfg.rms_interval;
            let end = ((k + 1) as f64 * cfg.rms_interval).min(duration);
            AudioEvent::at(0.5 * (start + end), rms[k])
        })
        .collect())
}

/// Variance of the 4-neighbour Laplacian over the valid interior of a
/// grayscale image.
pub fn laplacian_sharpness_gray(gray: ArrayView2<'_, f64>) -> Result<f64> {
    let (h, w) = gray.dim();
    if h < 3 || w < 3 {
        return Err(Error::InvalidInput(format!("frame {h}×{w} is smaller than 3×3")));
    }
    let center = gray.slice(s![1..h - 1, 1..w - 1]);
    let up = gray.slice(s![0..h - 2, 1..w - 1]);
    let down = gray.slice(s![2..h, 1..w - 1]);
    let left = gray.slice(s![1..h - 1, 0..w - 2]);
    let right = gray.slice(s![1..h - 1, 2..w]);
    let response = &up + &down + &left + &right - &center * 4.0;
    let n = response.len() as f64;
    let mean = response.sum() / n;
    Ok(response.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n)
}

/// Sharpness of an H × W × C frame after averaging channels.
pub fn laplacian_sharpness(frame: ArrayView3<'_, f32>) -> Result<f64> {
    let c = frame.shape()[2].max(1) as f64;
    let gray = frame.mapv(|x| x as f64).sum_axis(Axis(2)) / c;
    laplacian_sharpness_gray(gray.view())
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameSelection {
    /// Selected frame indices, ascending.
    pub indices: Vec<usize>,
    /// Peak time of the event behind each entry of `indices`.
    pub event_peak_times: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Sharpest in-window frame per audio event, strongest events first, with
/// temporal exclusion and a per-clip cap.
pub fn sample_frames(fs: &FrameSequence, events: &[AudioEvent], cfg: &SamplingConfig) -> Result<FrameSelection> {
    let sharpness = (0..fs.len())
        .map(|t| laplacian_sharpness(fs.frame(t)))
        .collect::<Result<Vec<_>>>()?;
    Ok(select_frames(&fs.timestamps, &sharpness, events, cfg))
}

/// Selection core of [`sample_frames`] over precomputed sharpness values.
pub fn select_frames(
    timestamps: &[f64],
    sharpness: &[f64],
    events: &[AudioEvent],
    cfg: &SamplingConfig,
) -> FrameSelection {
    let mut order: Vec<usize> = (0..events.len()).collect();
    // Stable sort keeps the earlier event first among equal intensities.
    order.sort_by(|&a, &b| events[b].peak_rms.total_cmp(&events[a].peak_rms));

    let mut chosen: Vec<(usize, f64)> = Vec::new();
    let mut warnings = Vec::new();
    for &e in &order {
        if chosen.len() >= cfg.max_frames_per_clip {
            break;
        }
        let event = &events[e];
        if chosen
            .iter()
            .any(|&(_, t)| (t - event.peak_time).abs() <= cfg.event_exclusion_radius)
        {
            continue;
        }
        let best = timestamps
            .iter()
            .enumerate()
            .filter(|(_, &ts)| event.contains(ts))
            .fold(None::<(usize, f64)>, |best, (i, _)| match best {
                Some((_, s)) if s >= sharpness[i] => best,
                _ => Some((i, sharpness[i])),
            });
        match best {
            Some((i, _)) => chosen.push((i, event.peak_time)),
            None => warnings.push(format!("event at {:.3}s has no frame inside its window", event.peak_time)),
        }
    }
    chosen.sort_by_key(|&(i, _)| i);
    chosen.dedup_by_key(|&mut (i, _)| i);
    FrameSelection {
        indices: chosen.iter().map(|&(i, _)| i).collect(),
        event_peak_times: chosen.iter().map(|&(_, t)| t).collect(),
        warnings,
    }
}

/// Hann-windowed short-time log-magnitude spectrum.
///
/// The analysis window spans `2 · n_freq_bins` samples centred on each hop
/// (zero padded at the edges); the Nyquist bin is dropped so exactly
/// `n_freq_bins` rows remain. Magnitudes are scaled so a unit sine reads
/// about 1 at its peak bin.
pub fn compute_spectrogram(w: &Waveform, n_freq_bins: usize, hop_seconds: f64) -> Result<Spectrogram> {
    if w.is_empty() {
        return Err(Error::InvalidInput("waveform is empty".into()));
    }
    if n_freq_bins == 0 {
        return Err(Error::InvalidInput("n_freq_bins must be positive".into()));
    }
    let hop = interval_samples(w.sample_rate, hop_seconds)?;
    let win = 2 * n_freq_bins;
    let steps = w.len().div_ceil(hop);
    let window: Vec<f64> = (0..win)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / win as f64).cos())
        .collect();
    let norm = 2.0 / window.iter().sum::<f64>();
    let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(win);

    let mut values = Array2::zeros((n_freq_bins, steps));
    let mut buf = vec![Complex::new(0.0, 0.0); win];
    let offset = (win as isize - hop as isize) / 2;
    for k in 0..steps {
        let origin = (k * hop) as isize - offset;
        for (i, slot) in buf.iter_mut().enumerate() {
            let idx = origin + i as isize;
            let x = if idx >= 0 && (idx as usize) < w.len() {
                w.samples[idx as usize]
            } else {
                0.0
            };
            *slot = Complex::new(x * window[i], 0.0);
        }
        fft.process(&mut buf);
        for f in 0..n_freq_bins {
            values[[f, k]] = (buf[f].norm() * norm).max(LOG_FLOOR).ln();
        }
    }
    Ok(Spectrogram {
        values,
        frame_hop_seconds: hop as f64 / w.sample_rate as f64,
    })
}
