//! Fully labeled toy audio-visual scenes.
//!
//! Entities are flat-colored discs drifting over a textured background; each
//! one owns a sine tone that plays while the entity is sound-active. A fixed
//! palette ties color to tone frequency, so the only way to tell which disc
//! is sounding is to listen. Look-alike scenes reuse one color for every
//! disc, and off-screen scenes play a tone whose color never appears.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::media_ingest::{FrameSequence, Waveform};

/// Disc colors, indexed by category.
pub const PALETTE: [[f32; 3]; 8] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.80, 0.20],
    [0.20, 0.30, 0.95],
    [0.95, 0.85, 0.10],
    [0.85, 0.20, 0.85],
    [0.10, 0.85, 0.85],
    [0.95, 0.55, 0.10],
    [0.55, 0.25, 0.90],
];

/// Tone of each visible category (Hz).
pub const CATEGORY_TONES: [f64; 8] = [400.0, 700.0, 1000.0, 1300.0, 1600.0, 1900.0, 2200.0, 2500.0];

/// Tones reserved for sources that are never on screen.
pub const OFFSCREEN_TONES: [f64; 4] = [3000.0, 3400.0, 3800.0, 4200.0];

/// Look-alike silent discs get a tone this far above their sounding twin's
/// so tone frequencies stay distinct per entity.
const LOOKALIKE_TONE_SHIFT: f64 = 150.0;

const TONE_AMPLITUDE: f64 = 0.25;
const NOISE_AMPLITUDE: f64 = 0.002;
const RAMP_SECONDS: f64 = 0.004;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Single,
    Mixed,
    MultiEntity,
    OffScreen,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::Single, Scenario::Mixed, Scenario::MultiEntity, Scenario::OffScreen];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Single => "single",
            Scenario::Mixed => "mixed",
            Scenario::MultiEntity => "multi_entity",
            Scenario::OffScreen => "off_screen",
        }
    }
}

/// What a generated clip was built to exercise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    Single,
    Mixed,
    MultiEntity,
    OffScreen,
    CrossEvent,
}

impl SceneKind {
    pub const ALL: [SceneKind; 5] = [
        SceneKind::Single,
        SceneKind::Mixed,
        SceneKind::MultiEntity,
        SceneKind::OffScreen,
        SceneKind::CrossEvent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SceneKind::Single => "single",
            SceneKind::Mixed => "mixed",
            SceneKind::MultiEntity => "multi_entity",
            SceneKind::OffScreen => "off_screen",
            SceneKind::CrossEvent => "cross_event",
        }
    }
}

/// Frame spans `[start, end)`.
pub type Spans = Vec<(usize, usize)>;

fn in_spans(spans: &[(usize, usize)], t: usize) -> bool {
    spans.iter().any(|&(a, b)| t >= a && t < b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityTrack {
    pub entity_id: usize,
    pub category: usize,
    pub color: [f32; 3],
    pub radius: f64,
    pub tone_hz: f64,
    /// Disc center `(row, col)` in pixels, one per frame.
    pub centers: Vec<(f64, f64)>,
    pub active: Spans,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffscreenSource {
    pub category: usize,
    pub tone_hz: f64,
    pub active: Spans,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneGeometry {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: f64,
    pub sample_rate: u32,
}

impl Default for SceneGeometry {
    fn default() -> Self {
        SceneGeometry {
            frames: 16,
            height: 64,
            width: 64,
            fps: 8.0,
            sample_rate: 16_000,
        }
    }
}

impl SceneGeometry {
    pub fn duration(&self) -> f64 {
        self.frames as f64 / self.fps
    }

    pub fn samples(&self) -> usize {
        (self.duration() * self.sample_rate as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub geometry: SceneGeometry,
    pub entities: Vec<EntityTrack>,
    pub offscreen: Vec<OffscreenSource>,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        if g.frames == 0 || g.height == 0 || g.width == 0 || !(g.fps > 0.0) || g.sample_rate == 0 {
            return Err(Error::InvalidInput("scene geometry must be non-degenerate".into()));
        }
        let mut tones = BTreeSet::new();
        for e in &self.entities {
            if e.centers.len() != g.frames {
                return Err(Error::InvalidInput(format!("entity {} needs one center per frame", e.entity_id)));
            }
            if e.active.iter().any(|&(a, b)| a >= b || b > g.frames) {
                return Err(Error::InvalidInput(format!("entity {} has a span outside [0, T)", e.entity_id)));
            }
            for &(r, c) in &e.centers {
                let inside = r + e.radius > 0.0
                    && r - e.radius < g.height as f64
                    && c + e.radius > 0.0
                    && c - e.radius < g.width as f64;
                if !inside {
                    return Err(Error::InvalidInput(format!("entity {} leaves the frame", e.entity_id)));
                }
            }
            if !tones.insert(e.tone_hz.to_bits()) {
                return Err(Error::InvalidInput("entities must have distinct tones".into()));
            }
        }
        for o in &self.offscreen {
            if o.active.iter().any(|&(a, b)| a >= b || b > g.frames) {
                return Err(Error::InvalidInput("off-screen span outside [0, T)".into()));
            }
            if !tones.insert(o.tone_hz.to_bits()) {
                return Err(Error::InvalidInput("off-screen tone collides with an entity tone".into()));
            }
        }
        Ok(())
    }

    fn look(e: &EntityTrack) -> ([u32; 3], u64) {
        (e.color.map(f32::to_bits), e.radius.to_bits())
    }

    /// Scenario tags of frame `t` from the schedules alone.
    pub fn frame_tags(&self, t: usize) -> BTreeSet<Scenario> {
        let sounding: Vec<&EntityTrack> = self.entities.iter().filter(|e| in_spans(&e.active, t)).collect();
        let looks: BTreeSet<_> = sounding.iter().map(|e| Self::look(e)).collect();
        let silent_lookalikes = self
            .entities
            .iter()
            .filter(|e| !in_spans(&e.active, t) && looks.contains(&Self::look(e)))
            .count();
        let offscreen = self.offscreen.iter().any(|o| in_spans(&o.active, t));
        derive_tags(sounding.len(), silent_lookalikes, offscreen)
    }

    /// Sounding categories (visible or not) at frame `t`.
    pub fn active_categories(&self, t: usize) -> BTreeSet<(bool, usize)> {
        let visible = self
            .entities
            .iter()
            .filter(|e| in_spans(&e.active, t))
            .map(|e| (true, e.category));
        let hidden = self
            .offscreen
            .iter()
            .filter(|o| in_spans(&o.active, t))
            .map(|o| (false, o.category));
        visible.chain(hidden).collect()
    }

    /// True iff the set of sounding categories changes over the clip.
    pub fn is_cross_event(&self) -> bool {
        let first = self.active_categories(0);
        (1..self.geometry.frames).any(|t| self.active_categories(t) != first)
    }
}

/// Tag rule shared by rendering and evaluation.
pub fn derive_tags(visible_sounding: usize, silent_lookalikes: usize, offscreen_active: bool) -> BTreeSet<Scenario> {
    let mut tags = BTreeSet::new();
    if visible_sounding == 1 && silent_lookalikes == 0 {
        tags.insert(Scenario::Single);
    }
    if visible_sounding >= 2 {
        tags.insert(Scenario::Mixed);
    }
    if visible_sounding >= 1 && silent_lookalikes >= 1 {
        tags.insert(Scenario::MultiEntity);
    }
    if offscreen_active && visible_sounding == 0 {
        tags.insert(Scenario::OffScreen);
    }
    tags
}

/// Pixel box `[row0, col0, row1, col1)`.
pub type BBox = [usize; 4];

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub entity_id: usize,
    pub bbox: BBox,
    pub mask: Array2<bool>,
    pub is_sounding: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameLabel {
    pub instances: Vec<Instance>,
    pub tags: BTreeSet<Scenario>,
}

impl FrameLabel {
    /// Union of the sounding instances' masks (`None` when nothing visible sounds).
    pub fn sounding_union(&self, height: usize, width: usize) -> Array2<bool> {
        let mut union = Array2::from_elem((height, width), false);
        for inst in self.instances.iter().filter(|i| i.is_sounding) {
            union.zip_mut_with(&inst.mask, |u, &m| *u |= m);
        }
        union
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledClip {
    pub clip_id: String,
    pub kind: SceneKind,
    pub split: Split,
    pub frames: FrameSequence,
    pub waveform: Waveform,
    pub labels: Vec<FrameLabel>,
    pub cross_event: bool,
    pub spec: Option<SceneSpec>,
}

fn disc_mask(height: usize, width: usize, center: (f64, f64), radius: f64) -> (Array2<bool>, BBox) {
    let (cr, cc) = center;
    let r2 = radius * radius;
    let mask = Array2::from_shape_fn((height, width), |(y, x)| {
        let dy = y as f64 + 0.5 - cr;
        let dx = x as f64 + 0.5 - cc;
        dy * dy + dx * dx <= r2
    });
    let mut bbox = [height, width, 0, 0];
    for ((y, x), &m) in mask.indexed_iter() {
        if m {
            bbox[0] = bbox[0].min(y);
            bbox[1] = bbox[1].min(x);
            bbox[2] = bbox[2].max(y + 1);
            bbox[3] = bbox[3].max(x + 1);
        }
    }
    if bbox[0] >= bbox[2] {
        bbox = [0, 0, 0, 0];
    }
    (mask, bbox)
}

fn envelope(t: f64, start: f64, end: f64, duration: f64) -> f64 {
    if t < start || t >= end {
        return 0.0;
    }
    let on = if start <= 0.0 { 1.0 } else { ((t - start) / RAMP_SECONDS).min(1.0) };
    let off = if end >= duration { 1.0 } else { ((end - t) / RAMP_SECONDS).min(1.0) };
    on * off
}

/// Renders frames, waveform and per-frame labels. Deterministic in `spec.seed`.
pub fn render_scene(spec: &SceneSpec, clip_id: impl Into<String>) -> Result<LabeledClip> {
    spec.validate()?;
    let g = spec.geometry;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Static per-clip texture: gray base, a few smooth ripples, pixel grain.
    let base: f32 = rng.gen_range(0.35..0.55);
    let tint: [f32; 3] = [rng.gen_range(-0.04..0.04), rng.gen_range(-0.04..0.04), rng.gen_range(-0.04..0.04)];
    let ripples: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.05..0.35),
                rng.gen_range(0.05..0.35),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.02..0.06),
            )
        })
        .collect();
    let grain = Array2::from_shape_fn((g.height, g.width), |_| rng.gen_range(-0.03f32..0.03));
    let background = Array2::from_shape_fn((g.height, g.width), |(y, x)| {
        let ripple: f64 = ripples
            .iter()
            .map(|&(fy, fx, ph, amp)| amp * (fy * y as f64 + fx * x as f64 + ph).sin())
            .sum();
        base + ripple as f32 + grain[[y, x]]
    });

    let mut frames = Array4::<f32>::zeros((g.frames, g.height, g.width, 3));
    let mut labels = Vec::with_capacity(g.frames);
    for t in 0..g.frames {
        for y in 0..g.height {
            for x in 0..g.width {
                let jitter: f32 = rng.gen_range(-0.01..0.01);
                for c in 0..3 {
                    frames[[t, y, x, c]] = (background[[y, x]] + tint[c] + jitter).clamp(0.0, 1.0);
                }
            }
        }
        let mut instances = Vec::with_capacity(spec.entities.len());
        for e in &spec.entities {
            let (mask, bbox) = disc_mask(g.height, g.width, e.centers[t], e.radius);
            for ((y, x), &m) in mask.indexed_iter() {
                if m {
                    for c in 0..3 {
                        frames[[t, y, x, c]] = e.color[c];
                    }
                }
            }
            instances.push(Instance {
                entity_id: e.entity_id,
                bbox,
                mask,
                is_sounding: in_spans(&e.active, t),
            });
        }
        labels.push(FrameLabel {
            instances,
            tags: spec.frame_tags(t),
        });
    }

    let n = g.samples();
    let sr = g.sample_rate as f64;
    let duration = g.duration();
    let mut samples: Vec<f64> = (0..n).map(|_| rng.gen_range(-NOISE_AMPLITUDE..NOISE_AMPLITUDE)).collect();
    let sources = spec
        .entities
        .iter()
        .map(|e| (e.tone_hz, &e.active))
        .chain(spec.offscreen.iter().map(|o| (o.tone_hz, &o.active)));
    for (tone, spans) in sources {
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        for &(a, b) in spans.iter() {
            let (start, end) = (a as f64 / g.fps, b as f64 / g.fps);
            let first = (start * sr).floor() as usize;
            let last = ((end * sr).ceil() as usize).min(n);
            for (i, s) in samples.iter_mut().enumerate().take(last).skip(first) {
                let time = i as f64 / sr;
                *s += TONE_AMPLITUDE
                    * envelope(time, start, end, duration)
                    * (std::f64::consts::TAU * tone * time + phase).sin();
            }
        }
    }

    Ok(LabeledClip {
        clip_id: clip_id.into(),
        kind: SceneKind::Single,
        split: Split::Train,
        frames: FrameSequence::from_frames(frames, g.fps)?,
        waveform: Waveform::new(samples, g.sample_rate)?,
        labels,
        cross_event: spec.is_cross_event(),
        spec: Some(spec.clone()),
    })
}

/// Number of clips per generated scene kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioCounts {
    pub single: usize,
    pub mixed: usize,
    pub multi_entity: usize,
    pub off_screen: usize,
    pub cross_event: usize,
}

impl ScenarioCounts {
    pub fn uniform(n: usize) -> Self {
        ScenarioCounts {
            single: n,
            mixed: n,
            multi_entity: n,
            off_screen: n,
            cross_event: n,
        }
    }

    pub fn get(&self, kind: SceneKind) -> usize {
        match kind {
            SceneKind::Single => self.single,
            SceneKind::Mixed => self.mixed,
            SceneKind::MultiEntity => self.multi_entity,
            SceneKind::OffScreen => self.off_screen,
            SceneKind::CrossEvent => self.cross_event,
        }
    }

    pub fn total(&self) -> usize {
        SceneKind::ALL.iter().map(|&k| self.get(k)).sum()
    }
}

/// Fractions of clips assigned to validation and test; the rest train.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions { val: 0.15, test: 0.15 }
    }
}

/// Straight-line motion with reflection inside `[lo, hi]` on both axes.
fn bouncing_path<R: Rng>(rng: &mut R, frames: usize, rows: (f64, f64), cols: (f64, f64)) -> Vec<(f64, f64)> {
    let mut pos = (rng.gen_range(rows.0..=rows.1), rng.gen_range(cols.0..=cols.1));
    let speed = |rng: &mut R| rng.gen_range(0.4..1.6) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let mut vel = (speed(rng), speed(rng));
    let mut path = Vec::with_capacity(frames);
    for _ in 0..frames {
        path.push(pos);
        let step = |p: &mut f64, v: &mut f64, lo: f64, hi: f64| {
            *p += *v;
            if *p < lo {
                *p = 2.0 * lo - *p;
                *v = -*v;
            }
            if *p > hi {
                *p = 2.0 * hi - *p;
                *v = -*v;
            }
            *p = p.clamp(lo, hi);
        };
        step(&mut pos.0, &mut vel.0, rows.0, rows.1);
        step(&mut pos.1, &mut vel.1, cols.0, cols.1);
    }
    path
}

/// Builds a randomized scene of the given kind. Entities occupy disjoint
/// vertical strips so discs never overlap.
pub fn random_scene(kind: SceneKind, geometry: SceneGeometry, seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = geometry.frames;
    let n_entities = match kind {
        SceneKind::Single => 1,
        SceneKind::Mixed | SceneKind::CrossEvent => 2,
        SceneKind::MultiEntity => rng.gen_range(2..=3),
        SceneKind::OffScreen => rng.gen_range(0..=2),
    };
    let mut categories: Vec<usize> = (0..PALETTE.len()).collect();
    categories.shuffle(&mut rng);
    let categories = &categories[..n_entities.max(1)];

    let scale = geometry.height.min(geometry.width) as f64 / 64.0;
    let radius_range = if n_entities >= 3 { (7.0, 9.0) } else { (8.0, 11.0) };
    let shared_radius = rng.gen_range(radius_range.0..radius_range.1) * scale;
    let strip = geometry.width as f64 / n_entities.max(1) as f64;
    let mut strips: Vec<usize> = (0..n_entities).collect();
    strips.shuffle(&mut rng);

    let mut entities = Vec::with_capacity(n_entities);
    for i in 0..n_entities {
        let radius = if kind == SceneKind::MultiEntity {
            shared_radius
        } else {
            rng.gen_range(radius_range.0..radius_range.1) * scale
        };
        let radius = radius.min(strip / 2.0 - 0.5).max(1.0);
        let col_lo = strips[i] as f64 * strip + radius;
        let col_hi = (strips[i] + 1) as f64 * strip - radius;
        let rows = (radius, geometry.height as f64 - radius);
        let centers = bouncing_path(&mut rng, t, rows, (col_lo, col_hi.max(col_lo)));
        let (category, tone_hz) = match kind {
            SceneKind::MultiEntity => (categories[0], CATEGORY_TONES[categories[0]] + i as f64 * LOOKALIKE_TONE_SHIFT),
            _ => (categories[i], CATEGORY_TONES[categories[i]]),
        };
        let active = match kind {
            SceneKind::Single | SceneKind::Mixed => vec![(0, t)],
            SceneKind::MultiEntity => {
                if i == 0 {
                    vec![(0, t)]
                } else {
                    Vec::new()
                }
            }
            SceneKind::OffScreen => Vec::new(),
            SceneKind::CrossEvent => Vec::new(),
        };
        entities.push(EntityTrack {
            entity_id: i,
            category,
            color: PALETTE[category],
            radius,
            tone_hz,
            centers,
            active,
        });
    }
    if kind == SceneKind::CrossEvent {
        let cut = if t >= 4 { rng.gen_range(t / 4..=(3 * t) / 4) } else { (t / 2).max(1) };
        let cut = cut.clamp(1, t.saturating_sub(1).max(1));
        entities[0].active = vec![(0, cut)];
        if cut < t {
            entities[1].active = vec![(cut, t)];
        }
    }
    let offscreen = if kind == SceneKind::OffScreen {
        let k = rng.gen_range(0..OFFSCREEN_TONES.len());
        vec![OffscreenSource {
            category: PALETTE.len() + k,
            tone_hz: OFFSCREEN_TONES[k],
            active: vec![(0, t)],
        }]
    } else {
        Vec::new()
    };
    SceneSpec {
        geometry,
        entities,
        offscreen,
        seed: rng.gen(),
    }
}

fn mix_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates `counts` clips per kind with a seed-derived split assignment.
pub fn make_suite(seed: u64, counts: ScenarioCounts, geometry: SceneGeometry, splits: SplitFractions) -> Result<Vec<LabeledClip>> {
    let mut clips = Vec::with_capacity(counts.total());
    let mut index = 0u64;
    for kind in SceneKind::ALL {
        for k in 0..counts.get(kind) {
            let clip_seed = mix_seed(seed, index);
            let spec = random_scene(kind, geometry, clip_seed);
            let mut clip = render_scene(&spec, format!("{}_{:04}", kind.name(), k))?;
            clip.kind = kind;
            let u = (mix_seed(clip_seed, 0x5EED) >> 11) as f64 / (1u64 << 53) as f64;
            clip.split = if u < splits.test {
                Split::Test
            } else if u < splits.test + splits.val {
                Split::Val
            } else {
                Split::Train
            };
            clips.push(clip);
            index += 1;
        }
    }
    Ok(clips)
}

/// Run-length encoding of a row-major mask: alternating run lengths, the
/// first counting `false` pixels (possibly zero).
pub fn rle_encode(mask: &Array2<bool>) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0;
    for &m in mask.iter() {
        if m == current {
            len += 1;
        } else {
            runs.push(len);
            current = m;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

pub fn rle_decode(runs: &[usize], height: usize, width: usize) -> Result<Array2<bool>> {
    let total: usize = runs.iter().sum();
    if total != height * width {
        return Err(Error::format("mask rle", format!("runs cover {total} pixels, expected {}", height * width)));
    }
    let mut flat = Vec::with_capacity(total);
    for (i, &r) in runs.iter().enumerate() {
        flat.extend(std::iter::repeat(i % 2 == 1).take(r));
    }
    Ok(Array2::from_shape_vec((height, width), flat).expect("length checked"))
}

/// One line of a ground-truth file. Frames without visible entities get a
/// record with `entity_id: null`. Tags carry `cross_event` on every frame of
/// a cross-event clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub frame_index: usize,
    pub entity_id: Option<usize>,
    #[serde(rename = "box")]
    pub bbox: Option<BBox>,
    pub mask_rle: Option<Vec<usize>>,
    pub is_sounding: bool,
    pub tags: Vec<String>,
}

pub const CROSS_EVENT_TAG: &str = "cross_event";

pub fn ground_truth_records(clip: &LabeledClip) -> Vec<GroundTruthRecord> {
    let mut out = Vec::new();
    for (t, label) in clip.labels.iter().enumerate() {
        let mut tags: Vec<String> = label.tags.iter().map(|s| s.name().to_string()).collect();
        if clip.cross_event {
            tags.push(CROSS_EVENT_TAG.to_string());
        }
        if label.instances.is_empty() {
            out.push(GroundTruthRecord {
                frame_index: t,
                entity_id: None,
                bbox: None,
                mask_rle: None,
                is_sounding: false,
                tags: tags.clone(),
            });
        }
        for inst in &label.instances {
            out.push(GroundTruthRecord {
                frame_index: t,
                entity_id: Some(inst.entity_id),
                bbox: Some(inst.bbox),
                mask_rle: Some(rle_encode(&inst.mask)),
                is_sounding: inst.is_sounding,
                tags: tags.clone(),
            });
        }
    }
    out
}

pub fn write_ground_truth(path: &Path, clip: &LabeledClip) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for rec in ground_truth_records(clip) {
        let line = serde_json::to_string(&rec).map_err(|e| Error::format("ground truth", e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Parses a ground-truth file back into per-frame labels plus the clip's
/// cross-event flag.
pub fn read_ground_truth(path: &Path, frames: usize, height: usize, width: usize) -> Result<(Vec<FrameLabel>, bool)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut labels = vec![FrameLabel::default(); frames];
    let mut cross_event = false;
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GroundTruthRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(format!("{}:{}", path.display(), n + 1), e.to_string()))?;
        let label = labels
            .get_mut(rec.frame_index)
            .ok_or_else(|| Error::format(path.display().to_string(), format!("frame {} out of range", rec.frame_index)))?;
        for tag in &rec.tags {
            match tag.as_str() {
                CROSS_EVENT_TAG => cross_event = true,
                other => {
                    let s: Scenario = serde_json::from_value(serde_json::Value::String(other.to_string()))
                        .map_err(|_| Error::format(path.display().to_string(), format!("unknown tag `{other}`")))?;
                    label.tags.insert(s);
                }
            }
        }
        if let (Some(id), Some(bbox), Some(rle)) = (rec.entity_id, rec.bbox, rec.mask_rle.as_ref()) {
            label.instances.push(Instance {
                entity_id: id,
                bbox,
                mask: rle_decode(rle, height, width)?,
                is_sounding: rec.is_sounding,
            });
        }
    }
    Ok((labels, cross_event))
}
