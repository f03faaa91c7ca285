//! Detection evaluation: matching, precision/recall curves, 101-point AP,
//! max-F1 and the IoU-threshold sweep summaries.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdn::{nms, BBox, Detection};

pub use crate::mdn::iou;

/// Outcome of matching one frame's detections against its ground truth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameMatch {
    /// True positive flag per detection, in input order.
    pub true_positive: Vec<bool>,
    /// Index of the matched ground-truth box per detection.
    pub matched_gt: Vec<Option<usize>>,
    pub false_negatives: usize,
}

impl FrameMatch {
    pub fn true_positives(&self) -> usize {
        self.true_positive.iter().filter(|&&t| t).count()
    }

    pub fn false_positives(&self) -> usize {
        self.true_positive.len() - self.true_positives()
    }
}

/// Greedy one-to-one matching in descending confidence order. A detection
/// takes the unmatched ground truth with the highest IoU above
/// `iou_threshold` (strictly), the lowest index winning ties.
pub fn match_detections(dets: &[Detection], gts: &[BBox], iou_threshold: f64) -> FrameMatch {
    let mut taken = vec![false; gts.len()];
    let mut matched_gt = vec![None; dets.len()];
    for i in crate::mdn::confidence_order(dets) {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let v = dets[i].bbox.iou(gt);
            if v > iou_threshold && best.map_or(true, |(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            matched_gt[i] = Some(g);
        }
    }
    FrameMatch {
        true_positive: matched_gt.iter().map(Option::is_some).collect(),
        false_negatives: taken.iter().filter(|&&t| !t).count(),
        matched_gt,
    }
}

/// One `(precision, recall)` point per confidence cut over detections pooled
/// across frames. `scored` holds `(confidence, is_true_positive)`; equal
/// confidences keep their input order. With `total_gt == 0` recall is 0.
pub fn pr_curve(scored: &[(f64, bool)], total_gt: usize) -> Vec<(f64, f64)> {
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].0.total_cmp(&scored[a].0));
    let mut tp = 0usize;
    order
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            tp += scored[i].1 as usize;
            let precision = tp as f64 / (k + 1) as f64;
            let recall = if total_gt == 0 {
                0.0
            } else {
                tp as f64 / total_gt as f64
            };
            (precision, recall)
        })
        .collect()
}

/// COCO 101-point interpolated AP: the precision envelope (max precision at
/// recall >= r) averaged over r = 0, 0.01, ..., 1.
pub fn average_precision(curve: &[(f64, f64)]) -> f64 {
    if curve.is_empty() {
        return 0.0;
    }
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.0).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut sum = 0.0;
    let mut j = 0;
    for k in 0..=100 {
        // k / 100 and tp / n are both correctly rounded, so exact recall
        // levels compare equal
        let r = k as f64 / 100.0;
        while j < curve.len() && curve[j].1 < r {
            j += 1;
        }
        if j == curve.len() {
            break;
        }
        sum += envelope[j];
    }
    sum / 101.0
}

/// Best F1 over the curve points; 0 for an empty curve.
pub fn max_f1(curve: &[(f64, f64)]) -> f64 {
    curve
        .iter()
        .map(|&(p, r)| if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 })
        .fold(0.0, f64::max)
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub nms_iou: f64,
    pub iou_thresholds: Vec<f64>,
    /// Per-frame cap on detections kept after NMS.
    pub max_detections: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            nms_iou: 0.6,
            iou_thresholds: coco_thresholds(),
            max_detections: 100,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::Config(format!("nms_iou {} outside [0, 1]", self.nms_iou)));
        }
        if self.max_detections == 0 {
            return Err(Error::Config("max_detections must be positive".into()));
        }
        if self.iou_thresholds.is_empty() {
            return Err(Error::Config("empty IoU threshold grid".into()));
        }
        if let Some(t) = self.iou_thresholds.iter().find(|t| !(0.0..1.0).contains(*t)) {
            return Err(Error::Config(format!("IoU threshold {t} outside [0, 1)")));
        }
        Ok(())
    }
}

/// NMS followed by the per-frame cap, most confident first.
pub fn suppress(dets: &[Detection], cfg: &EvalConfig) -> Vec<Detection> {
    let mut kept = nms(dets, cfg.nms_iou);
    kept.truncate(cfg.max_detections);
    kept
}

/// Frame id paired with its items.
pub type Frame<T> = (String, Vec<T>);

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub iou_thresholds: Vec<f64>,
    pub ap: Vec<f64>,
    pub mf1: Vec<f64>,
    pub map_50_95: f64,
    pub mmf1_50_95: f64,
    pub pr_curves: Vec<Vec<(f64, f64)>>,
    pub nms_iou: f64,
    pub frames: usize,
    pub ground_truths: usize,
}

/// Two-digit label of a threshold, e.g. 0.55 -> "55".
pub fn threshold_label(t: f64) -> String {
    format!("{:02}", (t * 100.0).round() as i64)
}

impl EvalReport {
    pub fn ap_at(&self, threshold: f64) -> Option<f64> {
        self.iou_thresholds
            .iter()
            .position(|&t| (t - threshold).abs() < 1e-9)
            .map(|i| self.ap[i])
    }

    /// Human-readable per-threshold table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>6}  {:>8}  {:>8}", "IoU", "AP", "mF1");
        for ((t, ap), f1) in self.iou_thresholds.iter().zip(&self.ap).zip(&self.mf1) {
            let _ = writeln!(s, "{t:>6.2}  {ap:>8.4}  {f1:>8.4}");
        }
        let _ = writeln!(s, "{:>6}  {:>8.4}  {:>8.4}", "mean", self.map_50_95, self.mmf1_50_95);
        s
    }

    /// `key=value` lines.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "frames={}", self.frames);
        let _ = writeln!(s, "ground_truths={}", self.ground_truths);
        let _ = writeln!(s, "nms_iou={:.6}", self.nms_iou);
        let _ = writeln!(s, "map_50_95={:.6}", self.map_50_95);
        let _ = writeln!(s, "mmf1_50_95={:.6}", self.mmf1_50_95);
        for ((t, ap), f1) in self.iou_thresholds.iter().zip(&self.ap).zip(&self.mf1) {
            let l = threshold_label(*t);
            let _ = writeln!(s, "ap_{l}={ap:.6}");
            let _ = writeln!(s, "mf1_{l}={f1:.6}");
        }
        s
    }

    /// `iou,precision,recall` rows for every curve point.
    pub fn pr_csv(&self) -> String {
        let mut s = String::from("iou,precision,recall\n");
        for (t, curve) in self.iou_thresholds.iter().zip(&self.pr_curves) {
            for (p, r) in curve {
                let _ = writeln!(s, "{t:.2},{p:.6},{r:.6}");
            }
        }
        s
    }
}

/// Applies NMS per frame at `cfg.nms_iou`, then AP and mF1 on the pooled
/// detections at every IoU threshold. Frames pair up by id.
pub fn evaluate(dets: &[Frame<Detection>], gts: &[Frame<BBox>], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let mut by_id: HashMap<&str, &[Detection]> = HashMap::with_capacity(dets.len());
    for (id, d) in dets {
        if by_id.insert(id.as_str(), d).is_some() {
            return Err(Error::Dataset(format!("duplicate detection frame id {id}")));
        }
    }
    if by_id.len() != gts.len() {
        return Err(Error::Dataset(format!(
            "{} detection frames vs {} ground-truth frames",
            by_id.len(),
            gts.len()
        )));
    }
    let mut pairs = Vec::with_capacity(gts.len());
    for (id, g) in gts {
        let d = by_id
            .get(id.as_str())
            .ok_or_else(|| Error::Dataset(format!("no detections for frame {id}")))?;
        pairs.push((suppress(d, cfg), g.as_slice()));
    }
    let total_gt: usize = gts.iter().map(|(_, g)| g.len()).sum();

    let mut report = EvalReport {
        iou_thresholds: cfg.iou_thresholds.clone(),
        ap: Vec::new(),
        mf1: Vec::new(),
        map_50_95: 0.0,
        mmf1_50_95: 0.0,
        pr_curves: Vec::new(),
        nms_iou: cfg.nms_iou,
        frames: gts.len(),
        ground_truths: total_gt,
    };
    for &t in &cfg.iou_thresholds {
        let mut scored = Vec::new();
        for (d, g) in &pairs {
            let m = match_detections(d, g, t);
            scored.extend(d.iter().zip(&m.true_positive).map(|(d, &tp)| (d.confidence, tp)));
        }
        let curve = pr_curve(&scored, total_gt);
        report.ap.push(average_precision(&curve));
        report.mf1.push(max_f1(&curve));
        report.pr_curves.push(curve);
    }
    let n = report.ap.len() as f64;
    report.map_50_95 = report.ap.iter().sum::<f64>() / n;
    report.mmf1_50_95 = report.mf1.iter().sum::<f64>() / n;
    Ok(report)
}

/// Detection dump: per frame a `frame <id> <count>` line followed by
/// `x_min y_min x_max y_max confidence` lines with six decimals.
pub fn format_detection_dump(frames: &[Frame<Detection>]) -> String {
    let mut s = String::new();
    for (id, dets) in frames {
        let _ = writeln!(s, "frame {id} {}", dets.len());
        for d in dets {
            let b = d.bbox;
            let _ = writeln!(
                s,
                "{:.6} {:.6} {:.6} {:.6} {:.6}",
                b.x_min, b.y_min, b.x_max, b.y_max, d.confidence
            );
        }
    }
    s
}

pub fn parse_detection_dump(text: &str, path: &Path) -> Result<Vec<Frame<Detection>>> {
    let mut out: Vec<Frame<Detection>> = Vec::new();
    let mut remaining = 0usize;
    for (n, line) in text.lines().enumerate() {
        let lineno = n + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if remaining == 0 {
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts[..] {
                ["frame", id, count] => {
                    remaining = count
                        .parse()
                        .map_err(|_| Error::parse(path, lineno, format!("bad count {count:?}")))?;
                    out.push((id.to_string(), Vec::with_capacity(remaining)));
                }
                _ => return Err(Error::parse(path, lineno, "expected `frame <id> <count>`")),
            }
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(path, lineno, format!("{e}")))?;
        if v.len() != 5 {
            return Err(Error::parse(path, lineno, format!("expected 5 values, got {}", v.len())));
        }
        let det = Detection::new(BBox::new(v[0], v[1], v[2], v[3]), v[4]);
        out.last_mut().expect("frame header seen").1.push(det);
        remaining -= 1;
    }
    if remaining > 0 {
        return Err(Error::parse(
            path,
            text.lines().count(),
            format!("{remaining} detection lines missing"),
        ));
    }
    Ok(out)
}
