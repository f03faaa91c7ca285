use serde::{Deserialize, Serialize};

use super::{AnchorSet, BBox, ANCHORS_PER_SCALE, HEAD_CHANNELS, OUTPUTS_PER_ANCHOR, STRIDES};
use crate::error::{Error, Result};
use crate::tensor::{ops, NdArray, Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub box_gain: f64,
    pub obj_gain: f64,
    /// Objectness weight per stride (8, 16, 32).
    pub balance: [f64; 3],
    /// An anchor matches a box when every side ratio is below this.
    pub anchor_ratio_threshold: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            box_gain: 0.05,
            obj_gain: 1.0,
            balance: [4.0, 1.0, 0.4],
            anchor_ratio_threshold: 4.0,
        }
    }
}

/// One ground-truth box assigned to an anchor at a grid cell. Offsets and
/// sizes are in grid units of the target's scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Target {
    pub scale: usize,
    pub anchor: usize,
    pub row: usize,
    pub col: usize,
    pub offset_x: f64,
    pub offset_y: f64,
    pub width: f64,
    pub height: f64,
}

/// Assigns each box to the cell containing its center at every scale, for
/// every anchor whose side ratios are within `ratio_threshold`.
pub fn build_targets(
    gt: &[BBox],
    anchors: &AnchorSet,
    grids: [(usize, usize); 3],
    ratio_threshold: f64,
) -> Vec<Target> {
    let mut out = Vec::new();
    for (s, &(h, w)) in grids.iter().enumerate() {
        let stride = STRIDES[s] as f64;
        for b in gt {
            let (cx, cy) = b.center();
            let (gx, gy) = (cx / stride, cy / stride);
            let col = (gx.floor().max(0.0) as usize).min(w - 1);
            let row = (gy.floor().max(0.0) as usize).min(h - 1);
            for (a, &(aw, ah)) in anchors.scales[s].iter().enumerate() {
                let (bw, bh) = (b.width(), b.height());
                let ratio = (bw / aw).max(aw / bw).max(bh / ah).max(ah / bh);
                if ratio < ratio_threshold {
                    out.push(Target {
                        scale: s,
                        anchor: a,
                        row,
                        col,
                        offset_x: gx - col as f64,
                        offset_y: gy - row as f64,
                        width: bw / stride,
                        height: bh / stride,
                    });
                }
            }
        }
    }
    out
}

fn constant(values: Vec<Real>) -> Tensor {
    let n = values.len();
    Tensor::constant(NdArray::new(vec![n], values).expect("1-D"))
}

/// Complete-IoU of predicted vs target boxes given as center/size vectors.
/// The aspect-ratio trade-off weight stays in the graph, so the gradient is
/// the exact derivative of the returned value.
fn ciou(
    (px, py, pw, ph): (&Tensor, &Tensor, &Tensor, &Tensor),
    (tx, ty, tw, th): (&[Real], &[Real], &[Real], &[Real]),
) -> Result<Tensor> {
    const EPS: Real = 1e-9;
    let half = |t: &Tensor| ops::mul_scalar(t, 0.5);
    let (pw2, ph2) = (half(pw), half(ph));
    let p_x1 = ops::sub(px, &pw2)?;
    let p_x2 = ops::add(px, &pw2)?;
    let p_y1 = ops::sub(py, &ph2)?;
    let p_y2 = ops::add(py, &ph2)?;

    let corner = |c: &[Real], s: &[Real], sign: Real| {
        constant(c.iter().zip(s).map(|(c, s)| c + sign * s / 2.0).collect())
    };
    let t_x1 = corner(tx, tw, -1.0);
    let t_x2 = corner(tx, tw, 1.0);
    let t_y1 = corner(ty, th, -1.0);
    let t_y2 = corner(ty, th, 1.0);

    let iw = ops::clamp_min(&ops::sub(&ops::minimum(&p_x2, &t_x2)?, &ops::maximum(&p_x1, &t_x1)?)?, 0.0);
    let ih = ops::clamp_min(&ops::sub(&ops::minimum(&p_y2, &t_y2)?, &ops::maximum(&p_y1, &t_y1)?)?, 0.0);
    let inter = ops::mul(&iw, &ih)?;
    let t_area = constant(tw.iter().zip(th).map(|(w, h)| w * h).collect());
    let union = ops::add_scalar(
        &ops::sub(&ops::add(&ops::mul(pw, ph)?, &t_area)?, &inter)?,
        EPS,
    );
    let iou = ops::div(&inter, &union)?;

    let cw = ops::sub(&ops::maximum(&p_x2, &t_x2)?, &ops::minimum(&p_x1, &t_x1)?)?;
    let ch = ops::sub(&ops::maximum(&p_y2, &t_y2)?, &ops::minimum(&p_y1, &t_y1)?)?;
    let c2 = ops::add_scalar(&ops::add(&ops::square(&cw), &ops::square(&ch))?, EPS);
    let rho2 = ops::add(
        &ops::square(&ops::sub(px, &constant(tx.to_vec()))?),
        &ops::square(&ops::sub(py, &constant(ty.to_vec()))?),
    )?;

    let t_atan = constant(tw.iter().zip(th).map(|(w, h)| (w / h).atan()).collect());
    let p_atan = ops::atan(&ops::div(pw, ph)?);
    let k = 4.0 / (std::f64::consts::PI as Real).powi(2);
    let v = ops::mul_scalar(&ops::square(&ops::sub(&t_atan, &p_atan)?), k);
    let alpha = ops::div(&v, &ops::add_scalar(&ops::add_scalar(&ops::sub(&v, &iou)?, 1.0), EPS))?;
    let penalty = ops::add(&ops::div(&rho2, &c2)?, &ops::mul(&alpha, &v)?)?;
    ops::sub(&iou, &penalty)
}

/// Training loss over the three raw head outputs of one frame:
/// `box_gain * sum_s mean(1 - CIoU) + obj_gain * sum_s balance_s * mean(BCE_obj)`.
/// Objectness targets are 1 at matched anchor cells and 0 elsewhere.
pub fn detection_loss(
    raw: &[Tensor],
    gt: &[BBox],
    anchors: &AnchorSet,
    cfg: &LossConfig,
) -> Result<Tensor> {
    if raw.len() != STRIDES.len() {
        return Err(Error::Dimension(format!(
            "expected {} prediction scales, got {}",
            STRIDES.len(),
            raw.len()
        )));
    }
    let mut grids = [(0, 0); 3];
    for (s, t) in raw.iter().enumerate() {
        match t.shape()[..] {
            [c, h, w] if c == HEAD_CHANNELS && h > 0 && w > 0 => grids[s] = (h, w),
            ref other => {
                return Err(Error::Dimension(format!(
                    "scale {s} prediction has shape {other:?}"
                )))
            }
        }
    }
    let targets = build_targets(gt, anchors, grids, cfg.anchor_ratio_threshold);

    let mut terms: Vec<Tensor> = Vec::new();
    for (s, pred) in raw.iter().enumerate() {
        let (h, w) = grids[s];
        let plane = h * w;
        let idx = |anchor: usize, k: usize, cell: usize| (anchor * OUTPUTS_PER_ANCHOR + k) * plane + cell;

        let obj_idx: Vec<usize> = (0..ANCHORS_PER_SCALE)
            .flat_map(|a| (0..plane).map(move |cell| (a, cell)))
            .map(|(a, cell)| idx(a, 4, cell))
            .collect();
        let mut obj_target = vec![0.0 as Real; obj_idx.len()];
        let mine: Vec<&Target> = targets.iter().filter(|t| t.scale == s).collect();
        for t in &mine {
            obj_target[t.anchor * plane + t.row * w + t.col] = 1.0;
        }
        let logits = ops::gather(pred, &obj_idx)?;
        let n = obj_target.len();
        let bce = ops::bce_with_logits(&logits, &NdArray::new(vec![n], obj_target)?)?;
        terms.push(ops::mul_scalar(&ops::mean(&bce), (cfg.obj_gain * cfg.balance[s]) as Real));

        if mine.is_empty() {
            continue;
        }
        let pick = |k: usize| -> Result<Tensor> {
            let ids: Vec<usize> = mine.iter().map(|t| idx(t.anchor, k, t.row * w + t.col)).collect();
            ops::gather(pred, &ids)
        };
        let stride = STRIDES[s] as f64;
        let anchor_w = constant(mine.iter().map(|t| (anchors.scales[s][t.anchor].0 / stride) as Real).collect());
        let anchor_h = constant(mine.iter().map(|t| (anchors.scales[s][t.anchor].1 / stride) as Real).collect());
        let offset = |t: Tensor| ops::add_scalar(&ops::mul_scalar(&ops::sigmoid(&t), 2.0), -0.5);
        let size = |t: Tensor, anchor: &Tensor| -> Result<Tensor> {
            ops::mul(&ops::square(&ops::mul_scalar(&ops::sigmoid(&t), 2.0)), anchor)
        };
        let px = offset(pick(0)?);
        let py = offset(pick(1)?);
        let pw = size(pick(2)?, &anchor_w)?;
        let ph = size(pick(3)?, &anchor_h)?;
        let col = |f: fn(&Target) -> f64| -> Vec<Real> { mine.iter().map(|t| f(t) as Real).collect() };
        let (tx, ty, tw, th) = (
            col(|t| t.offset_x),
            col(|t| t.offset_y),
            col(|t| t.width),
            col(|t| t.height),
        );
        let c = ciou((&px, &py, &pw, &ph), (&tx, &ty, &tw, &th))?;
        let box_term = ops::mean(&ops::add_scalar(&ops::neg(&c), 1.0));
        terms.push(ops::mul_scalar(&box_term, cfg.box_gain as Real));
    }
    let mut total = terms[0].clone();
    for t in &terms[1..] {
        total = ops::add(&total, t)?;
    }
    Ok(total)
}
