//! Segmentation metrics with boundary erosion.
//!
//! Evaluation compares a predicted [`LabelMap`] against ground truth,
//! optionally ignoring a band around class boundaries: a ground-truth
//! pixel is a *boundary pixel* if any 4-neighbor has a different class,
//! and [`erode_boundaries`] marks every pixel within Euclidean distance
//! `radius` of a boundary pixel as ignored. This discounts label noise at
//! object outlines, where even correct predictions disagree with
//! hand-drawn edges.
//!
//! From the (masked) confusion matrix come per-class precision, recall,
//! F1 and intersection-over-union, their means, and overall accuracy.
//! Precision/recall curves are computed per class by thresholding
//! probability maps one-vs-rest; the samples carry raw counts so curves
//! from different scenes can be merged exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Tensor};

/// Pixels excluded from evaluation (`true` = ignore).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IgnoreMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl IgnoreMask {
    /// A mask ignoring nothing.
    pub fn none(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("empty ignore mask {height}x{width}")));
        }
        Ok(IgnoreMask { height, width, data: vec![false; height * width] })
    }

    /// Wraps a row-major flag buffer (`true` = ignore).
    pub fn from_flags(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::Shape(format!(
                "flag buffer of {} does not form a {height}x{width} mask",
                data.len()
            )));
        }
        Ok(IgnoreMask { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// True if `(y, x)` is excluded from evaluation.
    pub fn ignored(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    /// Number of ignored pixels.
    pub fn ignored_count(&self) -> u64 {
        self.data.iter().filter(|&&b| b).count() as u64
    }

    /// Row-major view (`true` = ignore).
    pub fn data(&self) -> &[bool] {
        &self.data
    }
}

/// Marks every pixel within Euclidean distance `radius` of a class
/// boundary as ignored. Radius zero ignores exactly the boundary pixels
/// themselves; a uniform map has no boundary and ignores nothing.
pub fn erode_boundaries(gt: &LabelMap, radius: usize) -> IgnoreMask {
    let (h, w) = (gt.height(), gt.width());
    let mut mask = vec![false; h * w];

    // Offsets of the closed disk of the given radius.
    let r = radius as isize;
    let mut disk = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy * dy + dx * dx <= r * r {
                disk.push((dy, dx));
            }
        }
    }

    for y in 0..h {
        for x in 0..w {
            let c = gt.at(y, x);
            let boundary = (y > 0 && gt.at(y - 1, x) != c)
                || (y + 1 < h && gt.at(y + 1, x) != c)
                || (x > 0 && gt.at(y, x - 1) != c)
                || (x + 1 < w && gt.at(y, x + 1) != c);
            if !boundary {
                continue;
            }
            for &(dy, dx) in &disk {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                    mask[ny as usize * w + nx as usize] = true;
                }
            }
        }
    }
    IgnoreMask { height: h, width: w, data: mask }
}

/// Per-class counts and the scores derived from them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub tp: u64,
    pub fp: u64,
    pub fn_count: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
}

impl ClassMetrics {
    fn from_counts(tp: u64, fp: u64, fn_count: u64) -> Self {
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_count);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        let iou = ratio(tp, tp + fp + fn_count);
        ClassMetrics { tp, fp, fn_count, precision, recall, f1, iou }
    }

    /// True if the class occurs in neither prediction nor ground truth;
    /// such classes are excluded from the report means.
    fn absent(&self) -> bool {
        self.tp + self.fp + self.fn_count == 0
    }
}

/// One point of a precision/recall curve, carrying its raw counts so
/// curves can be merged across scenes before the ratios are taken.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrSample {
    pub threshold: f64,
    pub tp: u64,
    pub fp: u64,
    pub fn_count: u64,
    pub precision: f64,
    pub recall: f64,
}

/// Precision/recall curve of one class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassPr {
    pub class: usize,
    pub samples: Vec<PrSample>,
}

/// Full evaluation result: confusion matrix, per-class metrics, summary
/// scores, and (when probability maps were available) PR curves.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: usize,
    /// Display names, index-aligned with class ids.
    pub class_names: Vec<String>,
    /// Row-major `classes x classes` counts; rows are ground truth,
    /// columns are prediction.
    pub confusion: Vec<u64>,
    pub per_class: Vec<ClassMetrics>,
    /// Means over classes that occur in ground truth or prediction.
    pub mean_f1: f64,
    pub mean_iou: f64,
    /// Correct pixels over evaluated pixels.
    pub overall_accuracy: f64,
    pub evaluated_pixels: u64,
    pub ignored_pixels: u64,
    /// Per-class PR curves; empty when no probabilities were attached.
    pub pr: Vec<ClassPr>,
}

impl EvalReport {
    fn from_confusion(classes: usize, confusion: Vec<u64>, ignored: u64) -> Self {
        let mut per_class = Vec::with_capacity(classes);
        let mut total = 0u64;
        let mut trace = 0u64;
        for k in 0..classes {
            let tp = confusion[k * classes + k];
            let row: u64 = confusion[k * classes..(k + 1) * classes].iter().sum();
            let col: u64 = (0..classes).map(|g| confusion[g * classes + k]).sum();
            per_class.push(ClassMetrics::from_counts(tp, col - tp, row - tp));
            trace += tp;
            total += row;
        }
        let scored = per_class.iter().filter(|m| !m.absent()).count();
        let mean = |f: fn(&ClassMetrics) -> f64| {
            if scored == 0 {
                0.0
            } else {
                per_class.iter().filter(|m| !m.absent()).map(f).sum::<f64>() / scored as f64
            }
        };
        let (mean_f1, mean_iou) = (mean(|m| m.f1), mean(|m| m.iou));
        EvalReport {
            classes,
            class_names: (0..classes).map(|k| format!("class_{k}")).collect(),
            confusion,
            per_class,
            mean_f1,
            mean_iou,
            overall_accuracy: if total == 0 { 0.0 } else { trace as f64 / total as f64 },
            evaluated_pixels: total,
            ignored_pixels: ignored,
            pr: Vec::new(),
        }
    }
}

fn check_geometry(
    pred: &LabelMap,
    gt: &LabelMap,
    mask: Option<&IgnoreMask>,
    classes: usize,
) -> Result<()> {
    if classes < 2 {
        return Err(Error::Config(format!("evaluation needs at least 2 classes, got {classes}")));
    }
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::Shape(format!(
            "prediction {}x{} does not match ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    if let Some(m) = mask {
        if m.height() != gt.height() || m.width() != gt.width() {
            return Err(Error::Shape(format!(
                "ignore mask {}x{} does not match ground truth {}x{}",
                m.height(),
                m.width(),
                gt.height(),
                gt.width()
            )));
        }
    }
    Ok(())
}

/// Scores a prediction against ground truth over the non-ignored pixels.
pub fn score(
    pred: &LabelMap,
    gt: &LabelMap,
    mask: Option<&IgnoreMask>,
    classes: usize,
) -> Result<EvalReport> {
    check_geometry(pred, gt, mask, classes)?;
    let mut confusion = vec![0u64; classes * classes];
    let mut ignored = 0u64;
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            if mask.is_some_and(|m| m.ignored(y, x)) {
                ignored += 1;
                continue;
            }
            let (g, p) = (gt.at(y, x) as usize, pred.at(y, x) as usize);
            if g >= classes || p >= classes {
                return Err(Error::Shape(format!(
                    "label {} out of range for {classes} classes",
                    g.max(p)
                )));
            }
            confusion[g * classes + p] += 1;
        }
    }
    Ok(EvalReport::from_confusion(classes, confusion, ignored))
}

/// Merges reports by summing confusion matrices (and PR counts when every
/// report carries aligned curves), then recomputing all derived scores.
pub fn merge(reports: &[EvalReport]) -> Result<EvalReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Config("cannot merge zero reports".into()))?;
    let classes = first.classes;
    let mut confusion = vec![0u64; classes * classes];
    let mut ignored = 0u64;
    for r in reports {
        if r.classes != classes {
            return Err(Error::Config(format!(
                "cannot merge reports with {} and {classes} classes",
                r.classes
            )));
        }
        for (acc, v) in confusion.iter_mut().zip(&r.confusion) {
            *acc += v;
        }
        ignored += r.ignored_pixels;
    }
    let mut merged = EvalReport::from_confusion(classes, confusion, ignored);
    merged.class_names = first.class_names.clone();

    // PR curves merge only when every report has them on the same grid.
    let aligned = reports.iter().all(|r| {
        r.pr.len() == first.pr.len()
            && r.pr.iter().zip(&first.pr).all(|(a, b)| {
                a.class == b.class
                    && a.samples.len() == b.samples.len()
                    && a.samples
                        .iter()
                        .zip(&b.samples)
                        .all(|(s, t)| s.threshold == t.threshold)
            })
    });
    if !first.pr.is_empty() && aligned {
        merged.pr = first
            .pr
            .iter()
            .enumerate()
            .map(|(ci, curve)| ClassPr {
                class: curve.class,
                samples: (0..curve.samples.len())
                    .map(|si| {
                        let (mut tp, mut fp, mut fnc) = (0u64, 0u64, 0u64);
                        for r in reports {
                            let s = &r.pr[ci].samples[si];
                            tp += s.tp;
                            fp += s.fp;
                            fnc += s.fn_count;
                        }
                        pr_sample(curve.samples[si].threshold, tp, fp, fnc)
                    })
                    .collect(),
            })
            .collect();
    }
    Ok(merged)
}

fn pr_sample(threshold: f64, tp: u64, fp: u64, fn_count: u64) -> PrSample {
    let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    PrSample {
        threshold,
        tp,
        fp,
        fn_count,
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_count),
    }
}

/// `count + 1` thresholds uniformly spaced over `[0, 1]`.
pub fn uniform_thresholds(count: usize) -> Vec<f64> {
    (0..=count).map(|i| i as f64 / count.max(1) as f64).collect()
}

/// One-vs-rest precision/recall curve for `class`: at each threshold a
/// pixel is predicted positive when its probability for the class is at
/// least the threshold.
pub fn pr_curve(
    probs: &Tensor,
    gt: &LabelMap,
    mask: Option<&IgnoreMask>,
    class: usize,
    thresholds: &[f64],
) -> Result<ClassPr> {
    let (k, h, w) = probs.dims3()?;
    if class >= k {
        return Err(Error::Config(format!("class {class} out of range for {k} channels")));
    }
    if h != gt.height() || w != gt.width() {
        return Err(Error::Shape(format!(
            "probability map {h}x{w} does not match ground truth {}x{}",
            gt.height(),
            gt.width()
        )));
    }
    if let Some(m) = mask {
        if m.height() != h || m.width() != w {
            return Err(Error::Shape("ignore mask does not match probability map".into()));
        }
    }
    let plane = &probs.data()[class * h * w..(class + 1) * h * w];
    let samples = thresholds
        .iter()
        .map(|&t| {
            let (mut tp, mut fp, mut fnc) = (0u64, 0u64, 0u64);
            for y in 0..h {
                for x in 0..w {
                    if mask.is_some_and(|m| m.ignored(y, x)) {
                        continue;
                    }
                    let positive = plane[y * w + x] >= t;
                    let actual = gt.at(y, x) as usize == class;
                    match (positive, actual) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fnc += 1,
                        (false, false) => {}
                    }
                }
            }
            pr_sample(t, tp, fp, fnc)
        })
        .collect();
    Ok(ClassPr { class, samples })
}

/// Renders a report as an aligned plain-text table.
pub fn render_text(report: &EvalReport) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let name_w = report
        .class_names
        .iter()
        .map(|n| n.len())
        .max()
        .unwrap_or(5)
        .max("class".len());
    writeln!(
        out,
        "{:<name_w$}  {:>10}  {:>10}  {:>10}  {:>10}  {:>12}",
        "class", "precision", "recall", "f1", "iou", "support"
    )
    .unwrap();
    for (k, m) in report.per_class.iter().enumerate() {
        writeln!(
            out,
            "{:<name_w$}  {:>10.6}  {:>10.6}  {:>10.6}  {:>10.6}  {:>12}",
            report.class_names[k],
            m.precision,
            m.recall,
            m.f1,
            m.iou,
            m.tp + m.fn_count
        )
        .unwrap();
    }
    writeln!(out).unwrap();
    writeln!(out, "mean_f1           {:.6}", report.mean_f1).unwrap();
    writeln!(out, "mean_iou          {:.6}", report.mean_iou).unwrap();
    writeln!(out, "overall_accuracy  {:.6}", report.overall_accuracy).unwrap();
    writeln!(out, "evaluated_pixels  {}", report.evaluated_pixels).unwrap();
    writeln!(out, "ignored_pixels    {}", report.ignored_pixels).unwrap();
    out
}

/// Renders PR curves as CSV: `class,threshold,precision,recall,tp,fp,fn`.
pub fn pr_csv(report: &EvalReport) -> String {
    use std::fmt::Write;
    let mut out = String::from("class,threshold,precision,recall,tp,fp,fn\n");
    for curve in &report.pr {
        for s in &curve.samples {
            writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{},{},{}",
                curve.class, s.threshold, s.precision, s.recall, s.tp, s.fp, s.fn_count
            )
            .unwrap();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force reference: a pixel is ignored iff its Euclidean
    /// distance to some boundary pixel is at most `radius`.
    fn erode_reference(gt: &LabelMap, radius: usize) -> IgnoreMask {
        let (h, w) = (gt.height(), gt.width());
        let mut boundary = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let c = gt.at(y, x);
                if (y > 0 && gt.at(y - 1, x) != c)
                    || (y + 1 < h && gt.at(y + 1, x) != c)
                    || (x > 0 && gt.at(y, x - 1) != c)
                    || (x + 1 < w && gt.at(y, x + 1) != c)
                {
                    boundary.push((y as isize, x as isize));
                }
            }
        }
        let r2 = (radius * radius) as isize;
        let mut mask = IgnoreMask::none(h, w).unwrap();
        for y in 0..h {
            for x in 0..w {
                let hit = boundary.iter().any(|&(by, bx)| {
                    let (dy, dx) = (by - y as isize, bx - x as isize);
                    dy * dy + dx * dx <= r2
                });
                mask.data[y * w + x] = hit;
            }
        }
        mask
    }

    fn two_band_map(w: usize, split: usize) -> LabelMap {
        let mut m = LabelMap::new(6, w, 0).unwrap();
        for y in 0..6 {
            for x in split..w {
                m.set(y, x, 1);
            }
        }
        m
    }

    #[test]
    fn erosion_bands_have_expected_width() {
        // Split at column 6: boundary pixels are columns 5 and 6. With
        // radius 3 the ignored band is columns 2..=9 — eight columns.
        let gt = two_band_map(12, 6);
        let mask = erode_boundaries(&gt, 3);
        for y in 0..6 {
            for x in 0..12 {
                let expect = (2..=9).contains(&x);
                assert_eq!(mask.ignored(y, x), expect, "({y},{x})");
            }
        }
        // Radius zero ignores exactly the boundary pixels.
        let mask0 = erode_boundaries(&gt, 0);
        for y in 0..6 {
            for x in 0..12 {
                assert_eq!(mask0.ignored(y, x), x == 5 || x == 6);
            }
        }
        // A uniform map has no boundary.
        let flat = LabelMap::new(5, 5, 2).unwrap();
        assert_eq!(erode_boundaries(&flat, 3).ignored_count(), 0);
    }

    #[test]
    fn erosion_matches_brute_force_reference() {
        use rand::Rng;
        for seed in 0..4u64 {
            let mut rng = crate::rng::stream(&[900, seed]);
            let mut gt = LabelMap::new(17, 13, 0).unwrap();
            for y in 0..17 {
                for x in 0..13 {
                    gt.set(y, x, rng.random_range(0..3) as u8);
                }
            }
            for radius in [0usize, 1, 2, 3] {
                let fast = erode_boundaries(&gt, radius);
                let slow = erode_reference(&gt, radius);
                assert_eq!(fast, slow, "seed {seed} radius {radius}");
            }
        }
    }

    #[test]
    fn binary_counts_give_hand_computed_scores() {
        // 100 pixels: 50 true positives of class 1, 25 false positives,
        // 25 false negatives. Precision = recall = 2/3, F1 = 2/3, IoU = 1/2.
        let mut pred = LabelMap::new(10, 10, 0).unwrap();
        let mut gt = LabelMap::new(10, 10, 0).unwrap();
        let mut i = 0usize;
        for _ in 0..50 {
            pred.set(i / 10, i % 10, 1);
            gt.set(i / 10, i % 10, 1);
            i += 1;
        }
        for _ in 0..25 {
            pred.set(i / 10, i % 10, 1);
            i += 1;
        }
        for _ in 0..25 {
            gt.set(i / 10, i % 10, 1);
            i += 1;
        }
        let report = score(&pred, &gt, None, 2).unwrap();
        let m = &report.per_class[1];
        assert_eq!((m.tp, m.fp, m.fn_count), (50, 25, 25));
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.iou - 0.5).abs() < 1e-12);
        // F1 and IoU are linked by F1 = 2*IoU/(1+IoU).
        for m in &report.per_class {
            assert!((m.f1 - 2.0 * m.iou / (1.0 + m.iou)).abs() < 1e-12);
        }
        // Class 0 is all-background here: tp=25, fp=25, fn=25.
        assert_eq!(report.evaluated_pixels, 100);
        assert!((report.overall_accuracy - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mask_excludes_pixels_from_confusion() {
        let pred = LabelMap::new(2, 2, 0).unwrap();
        let mut gt = LabelMap::new(2, 2, 0).unwrap();
        gt.set(0, 0, 1);
        let mut mask = IgnoreMask::none(2, 2).unwrap();
        mask.data[0] = true;
        let report = score(&pred, &gt, Some(&mask), 2).unwrap();
        assert_eq!(report.evaluated_pixels, 3);
        assert_eq!(report.ignored_pixels, 1);
        assert!((report.overall_accuracy - 1.0).abs() < 1e-12);
    }

    #[test]
    fn merge_sums_confusions_and_recomputes() {
        let mut pred = LabelMap::new(1, 4, 0).unwrap();
        pred.set(0, 0, 1);
        let mut gt = LabelMap::new(1, 4, 0).unwrap();
        gt.set(0, 0, 1);
        gt.set(0, 1, 1);
        let a = score(&pred, &gt, None, 2).unwrap();
        let merged = merge(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(merged.evaluated_pixels, 8);
        assert_eq!(merged.per_class[1].tp, 2);
        assert_eq!(merged.per_class[1].fn_count, 2);
        // Ratios are unchanged when merging a report with itself.
        assert!((merged.mean_iou - a.mean_iou).abs() < 1e-12);
        assert!(merge(&[]).is_err());
    }

    #[test]
    fn pr_curve_has_monotone_recall_and_merges() {
        let probs = Tensor::from_vec(
            &[2, 1, 4],
            vec![
                0.9, 0.6, 0.3, 0.05, // class 0
                0.1, 0.4, 0.7, 0.95, // class 1
            ],
        )
        .unwrap();
        let gt = LabelMap::from_vec(1, 4, vec![0, 0, 1, 1]).unwrap();
        let ts = uniform_thresholds(10);
        let curve = pr_curve(&probs, &gt, None, 1, &ts).unwrap();
        assert_eq!(curve.samples.len(), 11);
        // Threshold 0 predicts everything positive: recall 1.
        assert!((curve.samples[0].recall - 1.0).abs() < 1e-12);
        // Recall never increases as the threshold grows.
        for w in curve.samples.windows(2) {
            assert!(w[1].recall <= w[0].recall + 1e-12);
        }
        // At threshold 0.5 exactly the two true pixels are positive.
        let s = &curve.samples[5];
        assert_eq!((s.tp, s.fp, s.fn_count), (2, 0, 0));

        let mut report = score(&gt, &gt, None, 2).unwrap();
        report.pr = vec![curve];
        let merged = merge(&[report.clone(), report.clone()]).unwrap();
        assert_eq!(merged.pr[0].samples[5].tp, 4);
        assert!((merged.pr[0].samples[5].precision - 1.0).abs() < 1e-12);
    }

    #[test]
    fn text_and_csv_rendering_are_stable() {
        let mut pred = LabelMap::new(2, 2, 0).unwrap();
        pred.set(1, 1, 1);
        let gt = pred.clone();
        let mut report = score(&pred, &gt, None, 2).unwrap();
        report.class_names = vec!["background".into(), "building".into()];
        let text = render_text(&report);
        assert!(text.contains("building"));
        assert!(text.contains("mean_iou          1.000000"));
        let probs = Tensor::from_vec(&[2, 2, 2], vec![0.9, 0.9, 0.9, 0.1, 0.1, 0.1, 0.1, 0.9])
            .unwrap();
        report.pr =
            vec![pr_curve(&probs, &gt, None, 1, &uniform_thresholds(4)).unwrap()];
        let csv = pr_csv(&report);
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.starts_with("class,threshold,precision,recall,tp,fp,fn\n"));
    }
}
