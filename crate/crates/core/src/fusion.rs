//! Feature fusion strategies.
//!
//! * `ugf`: each branch's mean map is weighted by the spatial softmax of the
//!   sigmoid of its variance map, and the two weighted maps are summed.
//! * `va`: the two mean maps are added.
//! * `am`: a 1x1-conv query from the thermal mean is multiplied by a
//!   spatial-softmax attention mask computed from the radar mean.
//! * `sod`: input-level fusion; thermal, thermal and radar depth are stacked
//!   as a pseudo-RGB image for a single-branch extractor.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bfe::FeatureStack;
use crate::error::{Error, Result};
use crate::tensor::{conv2d, ops, optim::kaiming_uniform, NdArray, Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionStrategy {
    Ugf,
    Va,
    Am,
    Sod,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 4] = [Self::Ugf, Self::Va, Self::Am, Self::Sod];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Ugf => "ugf",
            Self::Va => "va",
            Self::Am => "am",
            Self::Sod => "sod",
        }
    }

    /// Whether the strategy runs the dual-branch stochastic extractor.
    pub fn is_dual_branch(&self) -> bool {
        !matches!(self, Self::Sod)
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ugf" => Ok(Self::Ugf),
            "va" => Ok(Self::Va),
            "am" => Ok(Self::Am),
            "sod" => Ok(Self::Sod),
            other => Err(Error::Config(format!(
                "unknown fusion strategy `{other}` (expected ugf, va, am or sod)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FusedFeature {
    pub map: Tensor,
    /// `(main, auxiliary)` UGF weight maps, kept only on request.
    pub weight_maps: Option<(Tensor, Tensor)>,
}

fn check_pair(fm: &FeatureStack, fa: &FeatureStack) -> Result<()> {
    if fm.len() != fa.len() {
        return Err(Error::Dimension(format!(
            "feature stacks hold {} and {} samples",
            fm.len(),
            fa.len()
        )));
    }
    let shape = fm
        .sample_shape()
        .ok_or(Error::InsufficientSamples { needed: 1, got: 0 })?;
    if shape.len() != 3 {
        return Err(Error::Dimension(format!(
            "feature maps must be [C, H, W], got {shape:?}"
        )));
    }
    for s in fm.samples.iter().chain(&fa.samples) {
        if s.shape() != shape {
            return Err(Error::Dimension(format!(
                "feature map shapes disagree: {shape:?} vs {:?}",
                s.shape()
            )));
        }
    }
    Ok(())
}

/// Mean of a stack; a single sample is its own mean.
fn stack_mean(stack: &FeatureStack) -> Result<Tensor> {
    match stack.samples.len() {
        0 => Err(Error::InsufficientSamples { needed: 1, got: 0 }),
        1 => Ok(stack.samples[0].clone()),
        _ => Ok(ops::stack_mean_var(&stack.samples)?.0),
    }
}

/// Uncertainty-guided fusion of two feature stacks of `N >= 2` samples.
pub fn ugf_fuse(fm: &FeatureStack, fa: &FeatureStack, keep_weights: bool) -> Result<FusedFeature> {
    check_pair(fm, fa)?;
    let weigh = |stack: &FeatureStack| -> Result<(Tensor, Tensor)> {
        let (mean, var) = ops::stack_mean_var(&stack.samples)?;
        let weights = ops::spatial_softmax(&ops::sigmoid(&var))?;
        Ok((ops::mul(&mean, &weights)?, weights))
    };
    let (main, w_main) = weigh(fm)?;
    let (aux, w_aux) = weigh(fa)?;
    Ok(FusedFeature {
        map: ops::add(&main, &aux)?,
        weight_maps: keep_weights.then_some((w_main, w_aux)),
    })
}

/// Vanilla addition of the two mean maps.
pub fn va_fuse(fm: &FeatureStack, fa: &FeatureStack) -> Result<FusedFeature> {
    check_pair(fm, fa)?;
    Ok(FusedFeature {
        map: ops::add(&stack_mean(fm)?, &stack_mean(fa)?)?,
        weight_maps: None,
    })
}

/// 1x1 convolution with bias.
#[derive(Clone, Debug)]
pub struct PointwiseConv {
    pub weight: Tensor,
    pub bias: Tensor,
    unit_scale: Tensor,
}

impl PointwiseConv {
    pub fn new(c_in: usize, c_out: usize, rng: &mut Rng) -> Self {
        Self::from_parts(kaiming_uniform(&[c_out, c_in, 1, 1], rng), NdArray::zeros(vec![c_out]))
    }

    pub fn identity(channels: usize) -> Self {
        let w = NdArray::from_fn(vec![channels, channels, 1, 1], |i| {
            if i / channels == i % channels {
                1.0
            } else {
                0.0
            }
        });
        Self::from_parts(w, NdArray::zeros(vec![channels]))
    }

    pub fn from_parts(weight: NdArray, bias: NdArray) -> Self {
        let c_out = weight.shape()[0];
        Self {
            weight: Tensor::parameter(weight),
            bias: Tensor::parameter(bias),
            unit_scale: Tensor::constant(NdArray::full(vec![c_out], 1.0)),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.weight, 1, 0)?;
        ops::channel_affine(&y, &self.unit_scale, &self.bias)
    }

    pub fn named_parameters(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.weight"), self.weight.clone()),
            (format!("{prefix}.bias"), self.bias.clone()),
        ]
    }
}

/// Learned convolutions of the attention baseline, one per branch.
#[derive(Clone, Debug)]
pub struct AmParams {
    pub query: PointwiseConv,
    pub mask: PointwiseConv,
}

impl AmParams {
    pub fn new(channels: usize, rng: &mut Rng) -> Self {
        Self {
            query: PointwiseConv::new(channels, channels, rng),
            mask: PointwiseConv::new(channels, channels, rng),
        }
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            query: PointwiseConv::identity(channels),
            mask: PointwiseConv::identity(channels),
        }
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut v = self.query.named_parameters("am.query");
        v.extend(self.mask.named_parameters("am.mask"));
        v
    }
}

/// Attention-mask fusion: `conv(mean_m) * spatial_softmax(conv(mean_a))`.
pub fn am_fuse(fm: &FeatureStack, fa: &FeatureStack, params: &AmParams) -> Result<FusedFeature> {
    check_pair(fm, fa)?;
    let query = params.query.forward(&stack_mean(fm)?)?;
    let mask = ops::spatial_softmax(&params.mask.forward(&stack_mean(fa)?)?)?;
    Ok(FusedFeature {
        map: ops::mul(&query, &mask)?,
        weight_maps: None,
    })
}

/// Pseudo-RGB input `[thermal, thermal, radar_depth]` for input-level fusion.
pub fn sod_compose(thermal: &NdArray, radar_depth: &NdArray) -> Result<NdArray> {
    let (tc, th, tw) = thermal.dims3()?;
    let (rc, rh, rw) = radar_depth.dims3()?;
    if tc != 1 || rc != 1 || (th, tw) != (rh, rw) {
        return Err(Error::Dimension(format!(
            "sod_compose needs two [1, H, W] maps, got {:?} and {:?}",
            thermal.shape(),
            radar_depth.shape()
        )));
    }
    NdArray::concat_channels(&[thermal, thermal, radar_depth])
}
