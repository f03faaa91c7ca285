//! Straight-line reference implementations the library is checked against.
#![allow(dead_code)]

use rand::Rng as _;
use ugf_core::geometry::{project_point, RadarPoint, SensorRig};
use ugf_core::mdn::{BBox, Detection};
use ugf_core::tensor::{Real, Rng};

pub fn iou_ref(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = w * h;
    let area = |r: &BBox| (r.x_max - r.x_min) * (r.y_max - r.y_min);
    inter / (area(a) + area(b) - inter)
}

/// Repeatedly takes the most confident remaining detection (earliest on
/// ties) and discards everything overlapping it by more than `threshold`.
pub fn nms_ref(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    let mut remaining: Vec<usize> = (0..dets.len()).collect();
    let mut kept = Vec::new();
    while !remaining.is_empty() {
        let mut best = 0;
        for k in 1..remaining.len() {
            if dets[remaining[k]].confidence > dets[remaining[best]].confidence {
                best = k;
            }
        }
        let top = remaining.remove(best);
        kept.push(dets[top]);
        remaining.retain(|&i| iou_ref(&dets[i].bbox, &dets[top].bbox) <= threshold);
    }
    kept
}

/// Greedy one-to-one matching: `(true-positive flag per detection, false
/// negatives)`.
pub fn match_ref(dets: &[Detection], gts: &[BBox], threshold: f64) -> (Vec<bool>, usize) {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    // insertion sort keeps equal confidences in input order
    for i in 1..order.len() {
        let mut j = i;
        while j > 0 && dets[order[j]].confidence > dets[order[j - 1]].confidence {
            order.swap(j, j - 1);
            j -= 1;
        }
    }
    let mut used = vec![false; gts.len()];
    let mut tp = vec![false; dets.len()];
    for &d in &order {
        let mut pick: Option<usize> = None;
        for g in 0..gts.len() {
            let v = iou_ref(&dets[d].bbox, &gts[g]);
            if used[g] || v <= threshold {
                continue;
            }
            if pick.map_or(true, |p| v > iou_ref(&dets[d].bbox, &gts[p])) {
                pick = Some(g);
            }
        }
        if let Some(g) = pick {
            used[g] = true;
            tp[d] = true;
        }
    }
    (tp, used.iter().filter(|u| !**u).count())
}

/// Cumulative precision/recall over `(confidence, tp)` in descending
/// confidence, input order on ties.
pub fn pr_ref(scored: &[(f64, bool)], total_gt: usize) -> Vec<(f64, f64)> {
    let mut items: Vec<(usize, f64, bool)> = scored.iter().enumerate().map(|(i, &(c, t))| (i, c, t)).collect();
    items.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut out = Vec::new();
    let (mut tp, mut seen) = (0.0, 0.0);
    for (_, _, t) in items {
        seen += 1.0;
        if t {
            tp += 1.0;
        }
        let recall = if total_gt == 0 { 0.0 } else { tp / total_gt as f64 };
        out.push((tp / seen, recall));
    }
    out
}

/// 101-point interpolated AP, summing the envelope point by point.
pub fn ap101_ref(curve: &[(f64, f64)]) -> f64 {
    let mut total = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let best = curve
            .iter()
            .filter(|p| p.1 >= r)
            .map(|p| p.0)
            .fold(0.0, f64::max);
        total += best;
    }
    total / 101.0
}

pub fn mf1_ref(curve: &[(f64, f64)]) -> f64 {
    let mut best: f64 = 0.0;
    for &(p, r) in curve {
        if p + r > 0.0 {
            best = best.max(2.0 * p * r / (p + r));
        }
    }
    best
}

/// Depth image by scanning every pixel over every point.
pub fn raster_ref(points: &[RadarPoint], rig: &SensorRig) -> Vec<Real> {
    let projected: Vec<(usize, usize, f64)> = points
        .iter()
        .filter_map(|p| project_point(p, rig))
        .filter(|q| q.depth <= rig.max_range_m)
        .map(|q| (q.u.round() as usize, q.v.round() as usize, q.depth))
        .collect();
    let mut out = vec![0.0; rig.width * rig.height];
    for row in 0..rig.height {
        for col in 0..rig.width {
            let nearest = projected
                .iter()
                .filter(|&&(c, r, _)| c == col && r == row)
                .map(|&(_, _, d)| d)
                .fold(f64::INFINITY, f64::min);
            if nearest.is_finite() {
                out[row * rig.width + col] = nearest as Real;
            }
        }
    }
    out
}

pub fn random_box(rng: &mut Rng, extent: f64) -> BBox {
    let x = rng.gen_range(0.0..extent);
    let y = rng.gen_range(0.0..extent);
    BBox::new(x, y, x + rng.gen_range(1.0..extent / 3.0), y + rng.gen_range(1.0..extent / 3.0))
}

/// Detections clustered around a few centers so that overlaps are common,
/// with some repeated confidences.
pub fn random_detections(rng: &mut Rng, n: usize) -> Vec<Detection> {
    let centers: Vec<(f64, f64)> = (0..rng.gen_range(1..=6))
        .map(|_| (rng.gen_range(20.0..140.0), rng.gen_range(20.0..110.0)))
        .collect();
    (0..n)
        .map(|_| {
            let (cx, cy) = centers[rng.gen_range(0..centers.len())];
            let b = BBox::from_center(
                cx + rng.gen_range(-8.0..8.0),
                cy + rng.gen_range(-8.0..8.0),
                rng.gen_range(6.0..30.0),
                rng.gen_range(10.0..50.0),
            );
            let conf = if rng.gen_bool(0.1) { 0.5 } else { rng.gen_range(0.0..1.0) };
            Detection::new(b, conf)
        })
        .collect()
}
