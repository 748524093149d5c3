mod common;

use std::collections::BTreeSet;
use std::path::Path;

use proptest::prelude::*;

use tavlo_core::harness::write_suite;
use tavlo_core::synthetic::{
    make_suite, random_scene, render_scene, LabeledClip, Scenario, SceneGeometry, SceneKind, SceneSpec,
    ScenarioCounts, SplitFractions,
};

fn geometry() -> SceneGeometry {
    SceneGeometry {
        frames: 8,
        height: 32,
        width: 32,
        fps: 8.0,
        sample_rate: 8000,
    }
}

fn active(spans: &[(usize, usize)], t: usize) -> bool {
    spans.iter().any(|&(a, b)| a <= t && t < b)
}

/// Tags recomputed straight from the schedules with the counting rule.
fn rederive(spec: &SceneSpec, t: usize) -> BTreeSet<Scenario> {
    let mut sounding = 0;
    let mut looks = Vec::new();
    for e in &spec.entities {
        if active(&e.active, t) {
            sounding += 1;
            looks.push((e.color, e.radius));
        }
    }
    let lookalikes = spec
        .entities
        .iter()
        .filter(|e| !active(&e.active, t) && looks.contains(&(e.color, e.radius)))
        .count();
    let offscreen = spec.offscreen.iter().any(|o| active(&o.active, t));
    let mut tags = BTreeSet::new();
    if sounding == 1 && lookalikes == 0 {
        tags.insert(Scenario::Single);
    }
    if sounding >= 2 {
        tags.insert(Scenario::Mixed);
    }
    if sounding >= 1 && lookalikes >= 1 {
        tags.insert(Scenario::MultiEntity);
    }
    if offscreen && sounding == 0 {
        tags.insert(Scenario::OffScreen);
    }
    tags
}

#[test]
fn uniform_four_suite_has_rederivable_tags() {
    let suite = make_suite(9, ScenarioCounts::uniform(4), geometry(), SplitFractions::default()).unwrap();
    assert_eq!(suite.len(), 20);
    for kind in SceneKind::ALL {
        assert_eq!(suite.iter().filter(|c| c.kind == kind).count(), 4);
    }
    for clip in &suite {
        let spec = clip.spec.as_ref().unwrap();
        for (t, label) in clip.labels.iter().enumerate() {
            assert_eq!(label.tags, rederive(spec, t), "{} frame {t}", clip.clip_id);
        }
    }
    let kind_tag = |k: SceneKind| match k {
        SceneKind::Single => Some(Scenario::Single),
        SceneKind::Mixed => Some(Scenario::Mixed),
        SceneKind::MultiEntity => Some(Scenario::MultiEntity),
        SceneKind::OffScreen => Some(Scenario::OffScreen),
        SceneKind::CrossEvent => None,
    };
    for clip in &suite {
        if let Some(tag) = kind_tag(clip.kind) {
            assert!(clip.labels.iter().any(|l| l.tags.contains(&tag)), "{}", clip.clip_id);
        } else {
            assert!(clip.cross_event);
        }
    }
}

#[test]
fn empty_counts_give_empty_suite() {
    assert!(make_suite(1, ScenarioCounts::default(), geometry(), SplitFractions::default()).unwrap().is_empty());
}

fn files_under(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn same_seed_suites_are_byte_identical() {
    let a = make_suite(77, ScenarioCounts::uniform(2), geometry(), SplitFractions::default()).unwrap();
    let b = make_suite(77, ScenarioCounts::uniform(2), geometry(), SplitFractions::default()).unwrap();
    assert_eq!(a, b);
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_suite(da.path(), &a).unwrap();
    write_suite(db.path(), &b).unwrap();
    let (fa, fb) = (files_under(da.path()), files_under(db.path()));
    assert!(fa.len() > 10);
    assert_eq!(fa, fb);
    let c = make_suite(78, ScenarioCounts::uniform(2), geometry(), SplitFractions::default()).unwrap();
    assert_ne!(a, c);
}

/// Hann-windowed single-frequency energy of `x`.
fn tone_energy(x: &[f64], freq: f64, sr: u32) -> f64 {
    let n = x.len();
    let (mut re, mut im) = (0.0, 0.0);
    for (i, &v) in x.iter().enumerate() {
        let hann = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos();
        let ang = 2.0 * std::f64::consts::PI * freq * i as f64 / sr as f64;
        re += v * hann * ang.cos();
        im -= v * hann * ang.sin();
    }
    (re * re + im * im) / n as f64
}

fn assert_tone_carries_identity(clip: &LabeledClip) {
    let spec = clip.spec.as_ref().unwrap();
    let g = spec.geometry;
    let per_frame = g.samples() / g.frames;
    let samples = clip.waveform.samples();
    let sources = spec
        .entities
        .iter()
        .map(|e| (e.tone_hz, &e.active))
        .chain(spec.offscreen.iter().map(|o| (o.tone_hz, &o.active)));
    for (tone, spans) in sources {
        let energy: Vec<(bool, f64)> = (0..g.frames)
            .map(|t| {
                let seg = &samples[t * per_frame..(t + 1) * per_frame];
                (active(spans, t), tone_energy(seg, tone, g.sample_rate))
            })
            .collect();
        let on = energy.iter().filter(|e| e.0).map(|e| e.1).fold(f64::INFINITY, f64::min);
        let off = energy.iter().filter(|e| !e.0).map(|e| e.1).fold(0.0, f64::max);
        if on.is_finite() && off > 0.0 {
            assert!(on > 10.0 * off, "{} tone {tone}: on {on:e} off {off:e}", clip.clip_id);
        }
    }
}

#[test]
fn tone_band_energy_tracks_activity() {
    let suite = make_suite(5, ScenarioCounts::uniform(3), geometry(), SplitFractions::default()).unwrap();
    for clip in &suite {
        assert_tone_carries_identity(clip);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_scenes_keep_labels_consistent(seed in any::<u64>(), kind in 0usize..5) {
        let kind = SceneKind::ALL[kind];
        let spec = random_scene(kind, geometry(), seed);
        let clip = render_scene(&spec, "p").unwrap();
        let g = spec.geometry;
        for (t, label) in clip.labels.iter().enumerate() {
            prop_assert_eq!(&label.tags, &rederive(&spec, t));
            for inst in &label.instances {
                let e = spec.entities.iter().find(|e| e.entity_id == inst.entity_id).unwrap();
                let (cr, cc) = e.centers[t];
                for y in 0..g.height {
                    for x in 0..g.width {
                        let (dy, dx) = (y as f64 + 0.5 - cr, x as f64 + 0.5 - cc);
                        prop_assert_eq!(inst.mask[[y, x]], dy * dy + dx * dx <= e.radius * e.radius);
                    }
                }
                prop_assert_eq!(inst.is_sounding, active(&e.active, t));
            }
        }
        assert_tone_carries_identity(&clip);
    }
}
