use super::boxes::Detection;

/// Indices of `dets` in descending-confidence order; equal confidences keep
/// their input order.
pub(crate) fn confidence_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    order
}

/// Greedy non-maximum suppression: walk detections by descending confidence,
/// keep one unless its IoU with an already kept box exceeds `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    let mut kept_areas: Vec<f64> = Vec::new();
    for i in confidence_order(dets) {
        let d = dets[i];
        let area = d.bbox.area();
        let suppressed = kept.iter().zip(&kept_areas).any(|(k, &ka)| {
            let inter = k.bbox.intersection(&d.bbox);
            inter > 0.0 && inter / (ka + area - inter) > iou_threshold
        });
        if !suppressed {
            kept.push(d);
            kept_areas.push(area);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdn::BBox;

    #[test]
    fn singleton_passes_through() {
        let d = Detection::new(BBox::new(0.0, 0.0, 1.0, 1.0), 0.3);
        assert_eq!(nms(&[d], 0.5), vec![d]);
        assert!(nms(&[], 0.5).is_empty());
    }

    #[test]
    fn duplicate_box_suppressed() {
        let b = BBox::new(0.0, 0.0, 4.0, 4.0);
        let low = Detection::new(b, 0.8);
        let high = Detection::new(b, 0.9);
        assert_eq!(nms(&[low, high], 0.6), vec![high]);
    }

    #[test]
    fn tie_keeps_earlier_index() {
        let a = Detection::new(BBox::new(0.0, 0.0, 4.0, 4.0), 0.5);
        let b = Detection::new(BBox::new(0.5, 0.0, 4.5, 4.0), 0.5);
        assert_eq!(nms(&[a, b], 0.3), vec![a]);
        assert_eq!(nms(&[b, a], 0.3), vec![b]);
    }

    #[test]
    fn threshold_is_strict() {
        // IoU exactly 0.5
        let a = Detection::new(BBox::new(0.0, 0.0, 3.0, 1.0), 0.9);
        let b = Detection::new(BBox::new(1.0, 0.0, 4.0, 1.0), 0.8);
        assert_eq!(a.bbox.iou(&b.bbox), 0.5);
        assert_eq!(nms(&[a, b], 0.5).len(), 2);
        assert_eq!(nms(&[a, b], 0.49).len(), 1);
    }
}
