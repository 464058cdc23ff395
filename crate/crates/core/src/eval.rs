//! Vessel-segmentation metrics inside the FOV, ROC-AUC, tiled whole-image
//! evaluation and the model-comparison protocols.

use std::fmt;
use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::arch::Model;
use crate::error::{Error, Result};
use crate::pipeline::{GrayImage, Mask, PreparedSample, RecomposeBuffer, TileGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        ConfusionCounts { tp, fp, tn, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        ConfusionCounts { tp: self.tp + o.tp, fp: self.fp + o.fp, tn: self.tn + o.tn, fn_: self.fn_ + o.fn_ }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

fn check_dims(a: &Mask, b: &Mask, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "{what}: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// Confusion counts over FOV pixels only; vessel is the positive class.
pub fn confusion_within_fov(pred: &Mask, gt: &Mask, fov: &Mask) -> Result<ConfusionCounts> {
    check_dims(pred, gt, "prediction vs groundtruth")?;
    check_dims(gt, fov, "groundtruth vs FOV")?;
    let mut c = ConfusionCounts::default();
    for ((&p, &g), &f) in pred.data().iter().zip(gt.data()).zip(fov.data()) {
        if !f {
            continue;
        }
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Metrics derived from confusion counts. A metric whose denominator is
/// zero is `None` and printed as "NA".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub counts: ConfusionCounts,
    pub se: Option<f64>,
    pub sp: Option<f64>,
    pub ac: Option<f64>,
    pub pr: Option<f64>,
    pub f1: Option<f64>,
    pub auc: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn compute_metrics(counts: ConfusionCounts) -> Result<MetricsReport> {
    let ConfusionCounts { tp, fp, tn, fn_ } = counts;
    if counts.total() == 0 {
        return Err(Error::Degenerate("no pixels to score (empty FOV?)".into()));
    }
    Ok(MetricsReport {
        counts,
        se: ratio(tp, tp + fn_),
        sp: ratio(tn, tn + fp),
        ac: ratio(tp + tn, counts.total()),
        pr: ratio(tp, tp + fp),
        f1: ratio(2 * tp, 2 * tp + fp + fn_),
        auc: None,
    })
}

/// One operating point; `threshold` is the lowest score still called positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f32,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// From (0, 0) at threshold +inf to (1, 1), one point per unique score.
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    /// The operating point of the rule "positive iff score >= t".
    pub fn at_threshold(&self, t: f32) -> RocPoint {
        // Thresholds decrease along the curve; take the last point still >= t.
        let i = self.points.partition_point(|p| p.threshold >= t);
        self.points[i.saturating_sub(1)]
    }
}

/// Area under the ROC curve by the trapezoid rule over grouped thresholds
/// (ties share one curve point, i.e. half credit). The area is accumulated
/// in integer units of 1/(2PN), so it is exact up to the final division.
pub fn roc_auc(scores: &[f32], labels: &[bool]) -> Result<(f64, RocCurve)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Degenerate(format!("ROC needs both classes, got {pos} positive and {neg} negative")));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Data(format!("score {s} is not a number")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint { threshold: f32::INFINITY, fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut twice_area: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        twice_area += u128::from(fp - fp0) * u128::from(tp + tp0);
        points.push(RocPoint { threshold: s, fpr: fp as f64 / neg as f64, tpr: tp as f64 / pos as f64 });
    }
    let auc = twice_area as f64 / (2.0 * pos as f64 * neg as f64);
    Ok((auc, RocCurve { points }))
}

/// Tiling and thresholding parameters for whole-image evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub patch_size: usize,
    pub stride: usize,
    pub batch_size: usize,
    pub threshold: f32,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { patch_size: 48, stride: 5, batch_size: 64, threshold: 0.5 }
    }
}

/// Soft vessel map of a whole image: stride tiling, eval-mode forward on the
/// final output, overlap averaging.
pub fn predict_map(model: &Model, image: &GrayImage, config: &EvalConfig) -> Result<GrayImage> {
    let grid = TileGrid::new("image", image.dims(), config.patch_size, config.stride)?;
    let mut buf = RecomposeBuffer::new(&grid.source);
    let n = grid.len();
    let step = config.batch_size.max(1);
    for start in (0..n).step_by(step) {
        let end = (start + step).min(n);
        let preds = model.predict_final(&grid.batch(image, start..end))?;
        for k in start..end {
            buf.add(grid.origin(k), config.patch_size, preds.item_slice(k - start));
        }
    }
    buf.finish()
}

/// Scores of one image.
#[derive(Debug, Clone)]
pub struct ImageResult {
    pub id: String,
    pub report: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct EvaluationReport {
    pub images: Vec<ImageResult>,
    /// Raw counts summed and scores concatenated over all images.
    pub pooled: MetricsReport,
    pub pooled_roc: RocCurve,
}

fn fov_scores(map: &GrayImage, gt: &Mask, fov: &Mask) -> (Vec<f32>, Vec<bool>) {
    map.data()
        .iter()
        .zip(gt.data())
        .zip(fov.data())
        .filter(|(_, &f)| f)
        .map(|((&s, &g), _)| (s, g))
        .unzip()
}

/// Score soft maps against groundtruth inside each FOV.
pub fn score_maps(
    ids: &[String],
    maps: &[GrayImage],
    truths: &[&Mask],
    fovs: &[&Mask],
    threshold: f32,
) -> Result<EvaluationReport> {
    if maps.is_empty() || maps.len() != truths.len() || maps.len() != fovs.len() || maps.len() != ids.len() {
        return Err(Error::Shape(format!(
            "need matching non-empty lists, got {} ids, {} maps, {} truths and {} FOVs",
            ids.len(),
            maps.len(),
            truths.len(),
            fovs.len()
        )));
    }
    let mut images = Vec::with_capacity(maps.len());
    let mut pooled_counts = ConfusionCounts::default();
    let (mut all_scores, mut all_labels) = (Vec::new(), Vec::new());
    for (((id, map), gt), fov) in ids.iter().zip(maps).zip(truths).zip(fovs) {
        if map.dims() != gt.dims() {
            return Err(Error::Shape(format!("map of '{id}' does not match its groundtruth")));
        }
        let counts = confusion_within_fov(&Mask::threshold(map, threshold), gt, fov)?;
        let mut report = compute_metrics(counts)?;
        let (scores, labels) = fov_scores(map, gt, fov);
        report.auc = roc_auc(&scores, &labels).ok().map(|(a, _)| a);
        pooled_counts += counts;
        all_scores.extend(scores);
        all_labels.extend(labels);
        images.push(ImageResult { id: id.clone(), report });
    }
    let mut pooled = compute_metrics(pooled_counts)?;
    let (auc, pooled_roc) = match roc_auc(&all_scores, &all_labels) {
        Ok((a, c)) => (Some(a), c),
        Err(_) => (None, RocCurve { points: Vec::new() }),
    };
    pooled.auc = auc;
    Ok(EvaluationReport { images, pooled, pooled_roc })
}

/// Which annotation to score against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reference {
    Gt1,
    Gt2,
}

fn reference(s: &PreparedSample, r: Reference) -> Result<&Mask> {
    match r {
        Reference::Gt1 => Ok(&s.gt1),
        Reference::Gt2 => s
            .gt2
            .as_ref()
            .ok_or_else(|| Error::Data(format!("sample '{}' has no second-observer annotation", s.id))),
    }
}

/// Predicted soft maps plus their evaluation against `reference`.
pub fn evaluate_maps(
    samples: &[PreparedSample],
    maps: &[GrayImage],
    reference_kind: Reference,
    threshold: f32,
) -> Result<EvaluationReport> {
    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let truths = samples.iter().map(|s| reference(s, reference_kind)).collect::<Result<Vec<_>>>()?;
    let fovs: Vec<&Mask> = samples.iter().map(|s| &s.fov).collect();
    score_maps(&ids, maps, &truths, &fovs, threshold)
}

/// Tile, predict and score every sample against its first-observer labels.
pub fn evaluate_model(
    model: &Model,
    samples: &[PreparedSample],
    config: &EvalConfig,
) -> Result<(EvaluationReport, Vec<GrayImage>)> {
    let maps = samples.iter().map(|s| predict_map(model, &s.image, config)).collect::<Result<Vec<_>>>()?;
    Ok((evaluate_maps(samples, &maps, Reference::Gt1, config.threshold)?, maps))
}

/// Evaluate a model trained on one dataset on another. The target samples
/// must have been preprocessed with their own dataset's statistics; the
/// evaluation itself is unchanged.
pub fn cross_train_eval(
    model: &Model,
    target: &[PreparedSample],
    config: &EvalConfig,
) -> Result<(EvaluationReport, Vec<GrayImage>)> {
    evaluate_model(model, target, config)
}

#[derive(Debug, Clone)]
pub struct InterRaterReport {
    /// The model's maps scored against the second observer.
    pub model: EvaluationReport,
    /// The first observer's annotation, used as a predictor, scored against
    /// the second observer.
    pub human: EvaluationReport,
}

pub fn inter_rater_from_maps(samples: &[PreparedSample], maps: &[GrayImage], threshold: f32) -> Result<InterRaterReport> {
    let model = evaluate_maps(samples, maps, Reference::Gt2, threshold)?;
    let human_maps: Vec<GrayImage> = samples.iter().map(|s| s.gt1.to_gray()).collect();
    let human = evaluate_maps(samples, &human_maps, Reference::Gt2, threshold)?;
    Ok(InterRaterReport { model, human })
}

pub fn inter_rater_eval(model: &Model, samples: &[PreparedSample], config: &EvalConfig) -> Result<InterRaterReport> {
    for s in samples {
        reference(s, Reference::Gt2)?;
    }
    let maps = samples.iter().map(|s| predict_map(model, &s.image, config)).collect::<Result<Vec<_>>>()?;
    inter_rater_from_maps(samples, &maps, config.threshold)
}

/// Metric value or "NA".
pub struct Cell(pub Option<f64>);

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(v) => write!(f, "{v:.4}"),
            None => f.pad("NA"),
        }
    }
}

pub const REPORT_COLUMNS: [&str; 5] = ["AUC", "SE", "SP", "AC", "F1"];

fn cells(r: &MetricsReport) -> [Cell; 5] {
    [Cell(r.auc), Cell(r.se), Cell(r.sp), Cell(r.ac), Cell(r.f1)]
}

/// Aligned plain-text table with one row per `(label, report)`.
pub fn format_table(rows: &[(String, &MetricsReport)]) -> String {
    let width = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max(5);
    let mut s = format!("{:<width$}", "");
    for c in REPORT_COLUMNS {
        write!(s, "  {c:>7}").expect("write to string");
    }
    s.push('\n');
    for (label, r) in rows {
        write!(s, "{label:<width$}").expect("write to string");
        for c in cells(r) {
            write!(s, "  {:>7}", c.to_string()).expect("write to string");
        }
        s.push('\n');
    }
    s
}

/// CSV with a label column followed by [`REPORT_COLUMNS`].
pub fn metrics_csv(label: &str, rows: &[(String, &MetricsReport)]) -> String {
    let mut s = format!("{label},{}\n", REPORT_COLUMNS.join(","));
    for (name, r) in rows {
        let c = cells(r);
        writeln!(s, "{name},{},{},{},{},{}", c[0], c[1], c[2], c[3], c[4]).expect("write to string");
    }
    s
}

/// CSV of raw confusion counts and precision.
pub fn counts_csv(label: &str, rows: &[(String, &MetricsReport)]) -> String {
    let mut s = format!("{label},TP,FP,TN,FN,PR\n");
    for (name, r) in rows {
        let c = r.counts;
        writeln!(s, "{name},{},{},{},{},{}", c.tp, c.fp, c.tn, c.fn_, Cell(r.pr)).expect("write to string");
    }
    s
}

impl EvaluationReport {
    /// Per-image rows followed by a "pooled" row.
    pub fn rows(&self) -> Vec<(String, &MetricsReport)> {
        self.images
            .iter()
            .map(|i| (i.id.clone(), &i.report))
            .chain(std::iter::once(("pooled".to_string(), &self.pooled)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counts() {
        // 8 FOV pixels plus 2 outside that must be ignored.
        let pred = Mask::new(10, 1, [1, 1, 1, 0, 0, 0, 0, 0, 1, 1].map(|v| v == 1).to_vec()).unwrap();
        let gt = Mask::new(10, 1, [1, 1, 0, 1, 1, 0, 0, 0, 0, 1].map(|v| v == 1).to_vec()).unwrap();
        let fov = Mask::new(10, 1, [1, 1, 1, 1, 1, 1, 1, 1, 0, 0].map(|v| v == 1).to_vec()).unwrap();
        let c = confusion_within_fov(&pred, &gt, &fov).unwrap();
        assert_eq!(c, ConfusionCounts::new(2, 1, 3, 2));
    }

    #[test]
    fn hand_metrics() {
        let r = compute_metrics(ConfusionCounts::new(2, 1, 3, 2)).unwrap();
        assert_eq!(r.se, Some(0.5));
        assert_eq!(r.sp, Some(0.75));
        assert_eq!(r.ac, Some(0.625));
        assert_eq!(r.pr, Some(2.0 / 3.0));
        assert_eq!(r.f1, Some(4.0 / 7.0));
    }

    #[test]
    fn degenerate_counts() {
        assert!(matches!(compute_metrics(ConfusionCounts::default()), Err(Error::Degenerate(_))));
        let r = compute_metrics(ConfusionCounts::new(0, 0, 5, 0)).unwrap();
        assert_eq!((r.se, r.sp, r.ac, r.pr, r.f1), (None, Some(1.0), Some(1.0), None, None));
        assert_eq!(Cell(r.se).to_string(), "NA");
    }

    #[test]
    fn auc_simple_cases() {
        assert_eq!(roc_auc(&[0.9, 0.1], &[true, false]).unwrap().0, 1.0);
        assert_eq!(roc_auc(&[0.1, 0.9], &[true, false]).unwrap().0, 0.0);
        assert_eq!(roc_auc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap().0, 0.5);
        assert!(matches!(roc_auc(&[0.3, 0.4], &[true, true]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn curve_endpoints_and_threshold_lookup() {
        let (_, c) = roc_auc(&[0.9, 0.6, 0.5, 0.2], &[true, false, true, false]).unwrap();
        assert_eq!((c.points[0].fpr, c.points[0].tpr), (0.0, 0.0));
        let last = c.points.last().unwrap();
        assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
        let p = c.at_threshold(0.5);
        assert_eq!((p.fpr, p.tpr), (0.5, 1.0));
        let p = c.at_threshold(0.95);
        assert_eq!((p.fpr, p.tpr), (0.0, 0.0));
    }

    #[test]
    fn table_has_the_published_columns() {
        let r = compute_metrics(ConfusionCounts::new(2, 1, 3, 2)).unwrap();
        let t = format_table(&[("IterMiUnet".into(), &r)]);
        let header: Vec<&str> = t.lines().next().unwrap().split_whitespace().collect();
        assert_eq!(header, REPORT_COLUMNS);
        assert!(t.contains("NA"));
        let csv = metrics_csv("model", &[("m".into(), &r)]);
        assert_eq!(csv.lines().next().unwrap(), "model,AUC,SE,SP,AC,F1");
        assert_eq!(csv.lines().nth(1).unwrap(), "m,NA,0.5000,0.7500,0.6250,0.5714");
    }
}
