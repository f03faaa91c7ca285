//! Multiscale detection net: heads at strides 8, 16 and 32 on top of the
//! fused 1/8-scale feature map, box decoding, NMS and the training loss.

mod boxes;
mod decode;
mod loss;
mod nms;

pub(crate) use nms::confidence_order;

pub use boxes::{iou, BBox, Detection};
pub use decode::decode_boxes;
pub use loss::{build_targets, detection_loss, LossConfig, Target};
pub use nms::nms;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::bfe::{ConvBlock, FEATURE_CHANNELS};
use crate::error::{Error, Result};
use crate::fusion::{FusedFeature, PointwiseConv};
use crate::tensor::{ops, NdArray, Real, Rng, Tensor};

pub const ANCHORS_PER_SCALE: usize = 3;
pub const OUTPUTS_PER_ANCHOR: usize = 5;
pub const HEAD_CHANNELS: usize = ANCHORS_PER_SCALE * OUTPUTS_PER_ANCHOR;
pub const STRIDES: [usize; 3] = [8, 16, 32];

/// Three `(width, height)` priors in pixels for each of the three strides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub scales: [[(f64, f64); ANCHORS_PER_SCALE]; 3],
}

impl Default for AnchorSet {
    /// Fallback priors `[(10,24), (20,48), (36,86)]` scaled by `stride / 8`.
    fn default() -> Self {
        let base = [(10.0, 24.0), (20.0, 48.0), (36.0, 86.0)];
        let mut scales = [[(0.0, 0.0); ANCHORS_PER_SCALE]; 3];
        for (s, stride) in STRIDES.iter().enumerate() {
            let k = *stride as f64 / 8.0;
            for (a, (w, h)) in base.iter().enumerate() {
                scales[s][a] = (w * k, h * k);
            }
        }
        Self { scales }
    }
}

impl AnchorSet {
    pub fn validate(&self) -> Result<()> {
        if self
            .scales
            .iter()
            .flatten()
            .any(|&(w, h)| !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()))
        {
            return Err(Error::Config("anchor dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Nine priors clustered from ground-truth `(width, height)` pairs with
    /// the `1 - IoU` distance, sorted by area and dealt three per stride.
    /// Falls back to the default set with fewer than nine boxes.
    pub fn from_boxes(sizes: &[(f64, f64)]) -> Self {
        let k = 3 * ANCHORS_PER_SCALE;
        let mut pts: Vec<(f64, f64)> = sizes
            .iter()
            .copied()
            .filter(|&(w, h)| w > 0.0 && h > 0.0)
            .collect();
        if pts.len() < k {
            return Self::default();
        }
        pts.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)));
        // area quantiles as deterministic seeds
        let mut centers: Vec<(f64, f64)> = (0..k)
            .map(|i| pts[(2 * i + 1) * pts.len() / (2 * k)])
            .collect();
        let shape_iou = |a: (f64, f64), b: (f64, f64)| {
            let inter = a.0.min(b.0) * a.1.min(b.1);
            inter / (a.0 * a.1 + b.0 * b.1 - inter)
        };
        for _ in 0..50 {
            let mut sums = vec![(0.0, 0.0, 0usize); k];
            for &p in &pts {
                let best = (0..k)
                    .max_by(|&i, &j| shape_iou(p, centers[i]).total_cmp(&shape_iou(p, centers[j])))
                    .unwrap();
                sums[best].0 += p.0;
                sums[best].1 += p.1;
                sums[best].2 += 1;
            }
            let mut moved = false;
            for (c, (sw, sh, n)) in centers.iter_mut().zip(sums) {
                if n > 0 {
                    let next = (sw / n as f64, sh / n as f64);
                    moved |= next != *c;
                    *c = next;
                }
            }
            if !moved {
                break;
            }
        }
        centers.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)));
        let mut scales = [[(0.0, 0.0); ANCHORS_PER_SCALE]; 3];
        for (i, c) in centers.into_iter().enumerate() {
            scales[i / ANCHORS_PER_SCALE][i % ANCHORS_PER_SCALE] = c;
        }
        Self { scales }
    }
}

/// Detection network parameters.
#[derive(Clone, Debug)]
pub struct Mdn {
    pub input_scale: Tensor,
    pub input_bias: Tensor,
    pub lateral8: ConvBlock,
    pub down16: ConvBlock,
    pub down32: ConvBlock,
    pub heads: [PointwiseConv; 3],
}

impl Mdn {
    pub fn new(rng: &mut Rng) -> Self {
        let c = FEATURE_CHANNELS;
        let lateral8 = ConvBlock::new(c, c / 2, 1, rng);
        let down16 = ConvBlock::new(c, c, 2, rng);
        let down32 = ConvBlock::new(c, c, 2, rng);
        let head_inputs = [c / 2, c, c];
        // Small head weights start every box near its anchor, away from the
        // flat tails of the sigmoid.
        let heads = head_inputs.map(|c_in| {
            let bound = 1.0 / (c_in as f64).sqrt();
            let w = NdArray::from_fn(vec![HEAD_CHANNELS, c_in, 1, 1], |_| rng.gen_range(-bound..bound) as Real);
            PointwiseConv::from_parts(w, NdArray::zeros(vec![HEAD_CHANNELS]))
        });
        Self {
            input_scale: Tensor::parameter(NdArray::full(vec![c], 1.0)),
            input_bias: Tensor::parameter(NdArray::zeros(vec![c])),
            lateral8,
            down16,
            down32,
            heads,
        }
    }

    /// Sets the objectness biases to a prior of roughly `expected_objects`
    /// per image at each scale.
    pub fn init_objectness_prior(&self, grid_cells: [usize; 3], expected_objects: f64) {
        for (head, cells) in self.heads.iter().zip(grid_cells) {
            let prior = (expected_objects / cells as f64).ln() as Real;
            let mut b = head.bias.value_mut().expect("leaf");
            for a in 0..ANCHORS_PER_SCALE {
                b.data_mut()[a * OUTPUTS_PER_ANCHOR + 4] = prior;
            }
        }
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut v = vec![
            ("mdn.input.scale".to_string(), self.input_scale.clone()),
            ("mdn.input.bias".to_string(), self.input_bias.clone()),
        ];
        v.extend(self.lateral8.named_parameters("mdn.lateral8"));
        v.extend(self.down16.named_parameters("mdn.down16"));
        v.extend(self.down32.named_parameters("mdn.down32"));
        for (i, h) in self.heads.iter().enumerate() {
            v.extend(h.named_parameters(&format!("mdn.head{}", STRIDES[i])));
        }
        v
    }
}

/// Raw head outputs `[15, h_s, w_s]` at strides 8, 16 and 32. Per anchor the
/// five channels are `(tx, ty, tw, th, objectness)`.
pub fn mdn_forward(fused: &FusedFeature, net: &Mdn) -> Result<Vec<Tensor>> {
    let shape = fused.map.shape();
    match shape[..] {
        [c, h, w] if c == FEATURE_CHANNELS && h % 4 == 0 && w % 4 == 0 && h > 0 && w > 0 => {}
        _ => {
            return Err(Error::Dimension(format!(
                "detection net expects [{FEATURE_CHANNELS}, h, w] with h, w divisible by 4, got {shape:?}"
            )))
        }
    }
    // Per-sample normalization makes the heads indifferent to the overall
    // magnitude each fusion strategy produces.
    let x = ops::layer_norm(&fused.map, 1e-12);
    let x = ops::channel_affine(&x, &net.input_scale, &net.input_bias)?;
    let p8 = net.lateral8.forward(&x)?;
    let p16 = net.down16.forward(&x)?;
    let p32 = net.down32.forward(&p16)?;
    Ok(vec![
        net.heads[0].forward(&p8)?,
        net.heads[1].forward(&p16)?,
        net.heads[2].forward(&p32)?,
    ])
}
