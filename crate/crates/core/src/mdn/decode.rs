use super::{AnchorSet, BBox, Detection, HEAD_CHANNELS, OUTPUTS_PER_ANCHOR, STRIDES};
use crate::error::{Error, Result};
use crate::tensor::{ops::sigmoid_scalar, NdArray};

/// Decodes raw head outputs into image-space detections.
///
/// Per anchor `a` at cell `(i, j)` of a stride-`s` grid:
/// center `((i, j) + 2 sigmoid(t_xy) - 0.5) * s`, size
/// `anchor * (2 sigmoid(t_wh))^2`, confidence `sigmoid(obj)`. Detections below
/// `conf_threshold` are dropped; the rest are clipped to the image.
pub fn decode_boxes(
    raw: &[NdArray],
    anchors: &AnchorSet,
    conf_threshold: f64,
    image_size: (usize, usize),
) -> Result<Vec<Detection>> {
    if raw.len() != STRIDES.len() {
        return Err(Error::Dimension(format!(
            "expected {} prediction scales, got {}",
            STRIDES.len(),
            raw.len()
        )));
    }
    let (img_w, img_h) = (image_size.0 as f64, image_size.1 as f64);
    let mut out = Vec::new();
    for (s, pred) in raw.iter().enumerate() {
        let (c, h, w) = pred.dims3()?;
        if c != HEAD_CHANNELS {
            return Err(Error::Dimension(format!(
                "scale {s} has {c} channels, expected {HEAD_CHANNELS}"
            )));
        }
        let stride = STRIDES[s] as f64;
        let plane = h * w;
        let d = pred.data();
        for (a, &(aw, ah)) in anchors.scales[s].iter().enumerate() {
            let base = a * OUTPUTS_PER_ANCHOR * plane;
            let channel = |k: usize| &d[base + k * plane..base + (k + 1) * plane];
            let (tx, ty, tw, th, obj) = (channel(0), channel(1), channel(2), channel(3), channel(4));
            for cell in 0..plane {
                let conf = sigmoid_scalar(obj[cell]) as f64;
                if conf < conf_threshold {
                    continue;
                }
                let (j, i) = ((cell / w) as f64, (cell % w) as f64);
                let cx = (i + 2.0 * sigmoid_scalar(tx[cell]) as f64 - 0.5) * stride;
                let cy = (j + 2.0 * sigmoid_scalar(ty[cell]) as f64 - 0.5) * stride;
                let bw = aw * (2.0 * sigmoid_scalar(tw[cell]) as f64).powi(2);
                let bh = ah * (2.0 * sigmoid_scalar(th[cell]) as f64).powi(2);
                let bbox = BBox::from_center(cx, cy, bw, bh).clip(img_w, img_h);
                if bbox.is_valid() {
                    out.push(Detection::new(bbox, conf));
                }
            }
        }
    }
    Ok(out)
}
