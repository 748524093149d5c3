//! Frame-level localization metrics and scenario-wise reports.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthetic::Scenario;
use crate::tensor_io::{load_tensor, save_tensor, RawTensor, TensorData};

pub const IOU_SUCCESS: f64 = 0.5;
pub const DEFAULT_AUC_POINTS: usize = 21;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub clip_id: String,
    pub frame_index: usize,
    pub heatmap: Array2<f64>,
    /// Union of the sounding instances' masks; empty when nothing visible sounds.
    pub gt: Array2<bool>,
    pub tags: BTreeSet<Scenario>,
    pub cross_event: bool,
}

impl EvalRecord {
    pub fn validate(&self) -> Result<()> {
        if self.heatmap.dim() != self.gt.dim() {
            return Err(Error::ShapeMismatch(format!(
                "{}#{}: heatmap {:?} vs mask {:?}",
                self.clip_id,
                self.frame_index,
                self.heatmap.dim(),
                self.gt.dim()
            )));
        }
        if self.heatmap.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("{}#{}: non-finite heatmap", self.clip_id, self.frame_index)));
        }
        Ok(())
    }

    pub fn has_gt(&self) -> bool {
        self.gt.iter().any(|&m| m)
    }

    pub fn is_offscreen(&self) -> bool {
        self.tags.contains(&Scenario::OffScreen) && !self.has_gt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThresholdPolicy {
    /// One cut for the whole record set: pixels strictly above the
    /// `(100 - percent)`th percentile of all pooled pixels are positive.
    GlobalTopPercent { percent: f64 },
    /// Per-frame min-max normalization, positive strictly above `cut`.
    FrameMinmaxFixed { cut: f64 },
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy::GlobalTopPercent { percent: 10.0 }
    }
}

impl ThresholdPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ThresholdPolicy::GlobalTopPercent { percent } if !(percent > 0.0 && percent < 100.0) => {
                Err(Error::config("evaluation", "percent", format!("must lie in (0, 100), got {percent}")))
            }
            ThresholdPolicy::FrameMinmaxFixed { cut } if !(0.0..=1.0).contains(&cut) => {
                Err(Error::config("evaluation", "cut", format!("must lie in [0, 1], got {cut}")))
            }
            _ => Ok(()),
        }
    }
}

/// `q`th percentile (0..100) of `values`, taking the lower value at the exact
/// rank: the `floor(q/100 · n)`th smallest. `None` when that rank is zero.
pub fn percentile_lower(values: &mut [f64], q: f64) -> Option<f64> {
    let k = ((q / 100.0) * values.len() as f64).floor() as usize;
    if k == 0 {
        return None;
    }
    let k = k.min(values.len());
    let (_, kth, _) = values.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
    Some(*kth)
}

/// Threshold resolved against a concrete record set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cut {
    Global(f64),
    FrameMinmax(f64),
}

impl Cut {
    pub fn resolve(records: &[&EvalRecord], policy: ThresholdPolicy) -> Result<Cut> {
        policy.validate()?;
        match policy {
            ThresholdPolicy::GlobalTopPercent { percent } => {
                let mut pooled: Vec<f64> = records.iter().flat_map(|r| r.heatmap.iter().copied()).collect();
                if pooled.is_empty() {
                    return Err(Error::EmptySet("no heatmap pixels to threshold".into()));
                }
                let cut = percentile_lower(&mut pooled, 100.0 - percent).unwrap_or(f64::NEG_INFINITY);
                Ok(Cut::Global(cut))
            }
            ThresholdPolicy::FrameMinmaxFixed { cut } => Ok(Cut::FrameMinmax(cut)),
        }
    }

    pub fn apply(&self, heatmap: ArrayView2<'_, f64>) -> Array2<bool> {
        match *self {
            Cut::Global(c) => heatmap.mapv(|v| v > c),
            Cut::FrameMinmax(c) => {
                let (lo, hi) = heatmap
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
                if !(hi > lo) {
                    log::warn!("constant heatmap under min-max normalization; prediction left empty");
                    return Array2::from_elem(heatmap.dim(), false);
                }
                heatmap.mapv(|v| (v - lo) / (hi - lo) > c)
            }
        }
    }
}

pub fn binarize(records: &[EvalRecord], policy: ThresholdPolicy) -> Result<Vec<Array2<bool>>> {
    if records.is_empty() {
        return Err(Error::EmptySet("binarize needs at least one record".into()));
    }
    for r in records {
        r.validate()?;
    }
    let refs: Vec<&EvalRecord> = records.iter().collect();
    let cut = Cut::resolve(&refs, policy)?;
    Ok(records.iter().map(|r| cut.apply(r.heatmap.view())).collect())
}

pub fn frame_iou(pred: ArrayView2<'_, bool>, gt: ArrayView2<'_, bool>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::ShapeMismatch(format!("prediction {:?} vs ground truth {:?}", pred.dim(), gt.dim())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    if union == 0 {
        return Err(Error::EmptySet("IoU of two empty masks is undefined".into()));
    }
    Ok(inter as f64 / union as f64)
}

/// IoU acceptance thresholds `0, 1/(n-1), ..., 1`.
pub fn auc_grid(points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![0.0],
        n => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

/// `(CIoU%, AUC%)` from per-frame IoUs. A frame succeeds at `τ` when IoU ≥ τ,
/// so `τ = 0` always succeeds.
pub fn ciou_auc_from_ious(ious: &[f64], points: usize) -> Result<(f64, f64)> {
    if ious.is_empty() {
        return Err(Error::EmptySet("no frames with ground truth".into()));
    }
    if points == 0 {
        return Err(Error::config("evaluation", "auc_points", "must be at least 1"));
    }
    let n = ious.len() as f64;
    let success = |tau: f64| ious.iter().filter(|&&iou| iou >= tau).count() as f64 / n;
    let grid = auc_grid(points);
    let auc = grid.iter().map(|&tau| success(tau)).sum::<f64>() / grid.len() as f64;
    Ok((100.0 * success(IOU_SUCCESS), 100.0 * auc))
}

fn ious_with(records: &[&EvalRecord], cut: Cut) -> Result<Vec<f64>> {
    records
        .iter()
        .filter(|r| r.has_gt())
        .map(|r| frame_iou(cut.apply(r.heatmap.view()).view(), r.gt.view()))
        .collect()
}

pub fn ciou_auc(records: &[EvalRecord], policy: ThresholdPolicy) -> Result<(f64, f64)> {
    ciou_auc_grid(records, policy, DEFAULT_AUC_POINTS)
}

pub fn ciou_auc_grid(records: &[EvalRecord], policy: ThresholdPolicy, points: usize) -> Result<(f64, f64)> {
    for r in records {
        r.validate()?;
    }
    let refs: Vec<&EvalRecord> = records.iter().collect();
    if !refs.iter().any(|r| r.has_gt()) {
        return Err(Error::EmptySet("no frames with ground truth".into()));
    }
    let cut = Cut::resolve(&refs, policy)?;
    ciou_auc_from_ious(&ious_with(&refs, cut)?, points)
}

fn tn_with(records: &[&EvalRecord], cut: Cut) -> Result<(f64, usize)> {
    let off: Vec<&&EvalRecord> = records.iter().filter(|r| r.is_offscreen()).collect();
    if off.is_empty() {
        return Err(Error::EmptySet("no off-screen frames".into()));
    }
    let (mut below, mut total) = (0usize, 0usize);
    for r in &off {
        let pred = cut.apply(r.heatmap.view());
        below += pred.iter().filter(|&&p| !p).count();
        total += pred.len();
    }
    Ok((100.0 * below as f64 / total as f64, off.len()))
}

/// Pixel-pooled true-negative rate over off-screen frames, with the cut
/// resolved over every record given.
pub fn offscreen_tn(records: &[EvalRecord], policy: ThresholdPolicy) -> Result<f64> {
    for r in records {
        r.validate()?;
    }
    let refs: Vec<&EvalRecord> = records.iter().collect();
    if !refs.iter().any(|r| r.is_offscreen()) {
        return Err(Error::EmptySet("no off-screen frames".into()));
    }
    let cut = Cut::resolve(&refs, policy)?;
    Ok(tn_with(&refs, cut)?.0)
}

/// The restricted variant: pool and threshold only clips that contain an
/// off-screen frame, at the given top percentage.
pub fn offscreen_tn_dagger(records: &[EvalRecord], percent: f64) -> Result<f64> {
    let clips: BTreeSet<&str> = records.iter().filter(|r| r.is_offscreen()).map(|r| r.clip_id.as_str()).collect();
    let subset: Vec<EvalRecord> = records.iter().filter(|r| clips.contains(r.clip_id.as_str())).cloned().collect();
    offscreen_tn(&subset, ThresholdPolicy::GlobalTopPercent { percent })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub policy: ThresholdPolicy,
    pub dagger_percent: f64,
    pub auc_points: usize,
    pub single: bool,
    pub mixed: bool,
    pub multi_entity: bool,
    pub off_screen: bool,
    pub cross_event: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            policy: ThresholdPolicy::default(),
            dagger_percent: 5.0,
            auc_points: DEFAULT_AUC_POINTS,
            single: true,
            mixed: true,
            multi_entity: true,
            off_screen: true,
            cross_event: true,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        self.policy.validate()?;
        if !(self.dagger_percent > 0.0 && self.dagger_percent < 100.0) {
            return Err(Error::config("evaluation", "dagger_percent", "must lie in (0, 100)"));
        }
        if self.auc_points < 2 {
            return Err(Error::config("evaluation", "auc_points", "must be at least 2"));
        }
        Ok(())
    }

    fn enabled(&self, s: Scenario) -> bool {
        match s {
            Scenario::Single => self.single,
            Scenario::Mixed => self.mixed,
            Scenario::MultiEntity => self.multi_entity,
            Scenario::OffScreen => self.off_screen,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub scenario: String,
    pub metric: String,
    pub value: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportHeader {
    pub policy: ThresholdPolicy,
    pub dagger_percent: f64,
    pub auc_points: usize,
    pub iou_success: f64,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub header: ReportHeader,
    pub cells: Vec<MetricCell>,
}

pub const TOTAL: &str = "total";
pub const CROSS_EVENT: &str = "cross_event";

impl MetricsReport {
    pub fn get(&self, scenario: &str, metric: &str) -> Option<&MetricCell> {
        self.cells.iter().find(|c| c.scenario == scenario && c.metric == metric)
    }

    pub fn value(&self, scenario: &str, metric: &str) -> Option<f64> {
        self.get(scenario, metric).map(|c| c.value)
    }

    /// Header line followed by one cell per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for cell in &self.cells {
            out.push_str(&serde_json::to_string(cell).expect("cell serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::format("report", "missing header line"))?;
        let header: ReportHeader = serde_json::from_str(header).map_err(|e| Error::format("report header", e.to_string()))?;
        let cells = lines
            .map(|l| serde_json::from_str(l).map_err(|e| Error::format("report cell", e.to_string())))
            .collect::<Result<_>>()?;
        Ok(MetricsReport { header, cells })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut text = String::new();
        for line in BufReader::new(file).lines() {
            text.push_str(&line.map_err(|e| Error::io(path, e))?);
            text.push('\n');
        }
        Self::from_jsonl(&text)
    }

    /// Aligned human-readable table.
    pub fn table(&self) -> String {
        let mut rows = vec![["scenario".to_string(), "metric".to_string(), "value".to_string(), "count".to_string()]];
        for c in &self.cells {
            rows.push([c.scenario.clone(), c.metric.clone(), format!("{:.2}", c.value), c.count.to_string()]);
        }
        let widths: Vec<usize> = (0..4).map(|i| rows.iter().map(|r| r[i].len()).max().unwrap_or(0)).collect();
        let mut out = format!(
            "# policy={:?} dagger_percent={} auc_points={} records={}\n",
            self.header.policy, self.header.dagger_percent, self.header.auc_points, self.header.records
        );
        for row in rows {
            out.push_str(&format!(
                "{:<w0$}  {:<w1$}  {:>w2$}  {:>w3$}\n",
                row[0],
                row[1],
                row[2],
                row[3],
                w0 = widths[0],
                w1 = widths[1],
                w2 = widths[2],
                w3 = widths[3]
            ));
        }
        out
    }
}

fn push_ciou_auc(cells: &mut Vec<MetricCell>, scenario: &str, ious: &[f64], points: usize) -> Result<Option<(f64, f64)>> {
    if ious.is_empty() {
        return Ok(None);
    }
    let (ciou, auc) = ciou_auc_from_ious(ious, points)?;
    for (metric, value) in [("ciou", ciou), ("auc", auc)] {
        cells.push(MetricCell {
            scenario: scenario.into(),
            metric: metric.into(),
            value,
            count: ious.len(),
        });
    }
    Ok(Some((ciou, auc)))
}

/// Per-scenario CIoU/AUC, off-screen TN, Total, Cross-event and Δ. One cut is
/// resolved over all records and shared by every cell; empty cells are absent.
pub fn scenario_report(records: &[EvalRecord], cfg: &EvalConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::EmptySet("no records to evaluate".into()));
    }
    for r in records {
        r.validate()?;
    }
    let refs: Vec<&EvalRecord> = records.iter().collect();
    let cut = Cut::resolve(&refs, cfg.policy)?;
    let mut cells = Vec::new();

    for s in [Scenario::Single, Scenario::Mixed, Scenario::MultiEntity] {
        if !cfg.enabled(s) {
            continue;
        }
        let subset: Vec<&EvalRecord> = refs.iter().copied().filter(|r| r.tags.contains(&s)).collect();
        push_ciou_auc(&mut cells, s.name(), &ious_with(&subset, cut)?, cfg.auc_points)?;
    }
    if cfg.off_screen && refs.iter().any(|r| r.is_offscreen()) {
        let (tn, n) = tn_with(&refs, cut)?;
        cells.push(MetricCell {
            scenario: Scenario::OffScreen.name().into(),
            metric: "tn".into(),
            value: tn,
            count: n,
        });
        let dagger = offscreen_tn_dagger(records, cfg.dagger_percent)?;
        cells.push(MetricCell {
            scenario: Scenario::OffScreen.name().into(),
            metric: "tn_dagger".into(),
            value: dagger,
            count: n,
        });
    }
    let total = push_ciou_auc(&mut cells, TOTAL, &ious_with(&refs, cut)?, cfg.auc_points)?;
    if cfg.cross_event {
        let cross: Vec<&EvalRecord> = refs.iter().copied().filter(|r| r.cross_event).collect();
        let cross_ious = ious_with(&cross, cut)?;
        let crossed = push_ciou_auc(&mut cells, CROSS_EVENT, &cross_ious, cfg.auc_points)?;
        if let (Some((tc, ta)), Some((cc, ca))) = (total, crossed) {
            for (metric, value) in [("delta_ciou", cc - tc), ("delta_auc", ca - ta)] {
                cells.push(MetricCell {
                    scenario: CROSS_EVENT.into(),
                    metric: metric.into(),
                    value,
                    count: cross_ious.len(),
                });
            }
        }
    }
    Ok(MetricsReport {
        header: ReportHeader {
            policy: cfg.policy,
            dagger_percent: cfg.dagger_percent,
            auc_points: cfg.auc_points,
            iou_success: IOU_SUCCESS,
            records: records.len(),
        },
        cells,
    })
}

/// Heatmaps stored as a T4 tensor of shape `[1, T, H, W]` (or any shape
/// whose last two dims are the frame).
pub fn load_heatmaps_t4(path: &Path) -> Result<Vec<Array2<f64>>> {
    let raw = load_tensor(path)?;
    let [a, b, h, w] = raw.dims;
    let values = raw.to_f64(&[a * b, h, w])?;
    Ok(values
        .outer_iter()
        .map(|m| m.into_dimensionality::<ndarray::Ix2>().expect("rank 2").to_owned())
        .collect())
}

pub fn save_heatmaps_t4(path: &Path, maps: &[Array2<f64>]) -> Result<()> {
    let (h, w) = maps.first().map(|m| m.dim()).unwrap_or((0, 0));
    if maps.iter().any(|m| m.dim() != (h, w)) {
        return Err(Error::ShapeMismatch("heatmaps differ in size".into()));
    }
    let data: Vec<f64> = maps.iter().flat_map(|m| m.iter().copied()).collect();
    let raw = RawTensor::new([1, maps.len(), h, w], TensorData::F64(data))?;
    save_tensor(path, &raw)
}

/// 16-bit grayscale PNG whose code `0..=65535` maps linearly onto `[lo, hi]`.
pub fn load_heatmap_png16(path: &Path, lo: f64, hi: f64) -> Result<Array2<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))?
        .into_luma16();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        lo + (hi - lo) * img.get_pixel(x as u32, y as u32)[0] as f64 / 65535.0
    }))
}

pub fn save_heatmap_png16(path: &Path, map: ArrayView2<'_, f64>, lo: f64, hi: f64) -> Result<()> {
    let (h, w) = map.dim();
    let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_fn(w as u32, h as u32, |x, y| {
        let v = ((map[[y as usize, x as usize]] - lo) / (hi - lo)).clamp(0.0, 1.0);
        image::Luma([(v * 65535.0).round() as u16])
    });
    img.save(path).map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}
