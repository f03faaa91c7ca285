//! Dual-branch Bayesian feature extractor.
//!
//! Each branch is five `conv3x3 -> per-channel affine -> SiLU` blocks; blocks
//! 1-3 downsample by two, so a `[3, H, W]` input becomes `[128, H/8, W/8]`.
//! Dropout follows the activation of the configured blocks and stays active
//! at inference, so repeated passes sample the weight posterior.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{conv2d, ops, optim::kaiming_uniform, NdArray, Real, Rng, Tensor};

pub const BLOCK_COUNT: usize = 5;
pub const BLOCK_STRIDES: [usize; BLOCK_COUNT] = [2, 2, 2, 1, 1];
pub const FEATURE_CHANNELS: usize = 128;
pub const FEATURE_STRIDE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BfeConfig {
    pub dropout_rate: f64,
    pub forward_passes: usize,
    /// 1-based block indices followed by dropout.
    pub dropout_layers: BTreeSet<usize>,
    pub channels: Vec<usize>,
}

impl Default for BfeConfig {
    fn default() -> Self {
        Self {
            dropout_rate: 0.2,
            forward_passes: 5,
            dropout_layers: [4, 5].into_iter().collect(),
            channels: vec![16, 32, 64, 96, 128],
        }
    }
}

impl BfeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if self.forward_passes == 0 {
            return Err(Error::Config("forward_passes must be positive".into()));
        }
        if let Some(bad) = self
            .dropout_layers
            .iter()
            .find(|&&l| l == 0 || l > BLOCK_COUNT)
        {
            return Err(Error::Config(format!(
                "dropout layer {bad} outside blocks 1..={BLOCK_COUNT}"
            )));
        }
        if self.channels.len() != BLOCK_COUNT {
            return Err(Error::Config(format!(
                "channel schedule needs {BLOCK_COUNT} entries, got {}",
                self.channels.len()
            )));
        }
        if self.channels.last() != Some(&FEATURE_CHANNELS) {
            return Err(Error::Config(format!(
                "channel schedule must end at {FEATURE_CHANNELS}, got {:?}",
                self.channels
            )));
        }
        if self.channels.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Whether the extractor is stochastic at all.
    pub fn is_bayesian(&self) -> bool {
        self.dropout_rate > 0.0 && !self.dropout_layers.is_empty()
    }
}

/// `conv3x3 -> affine -> SiLU`.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub weight: Tensor,
    pub scale: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

impl ConvBlock {
    pub fn new(c_in: usize, c_out: usize, stride: usize, rng: &mut Rng) -> Self {
        Self {
            weight: Tensor::parameter(kaiming_uniform(&[c_out, c_in, 3, 3], rng)),
            scale: Tensor::parameter(NdArray::full(vec![c_out], 1.0)),
            bias: Tensor::parameter(NdArray::zeros(vec![c_out])),
            stride,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.weight, self.stride, 1)?;
        let y = ops::channel_affine(&y, &self.scale, &self.bias)?;
        Ok(ops::silu(&y))
    }

    pub fn named_parameters(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.weight"), self.weight.clone()),
            (format!("{prefix}.scale"), self.scale.clone()),
            (format!("{prefix}.bias"), self.bias.clone()),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BranchTag {
    Main,
    Auxiliary,
}

/// `N` stochastic feature maps of one branch.
#[derive(Clone, Debug)]
pub struct FeatureStack {
    pub samples: Vec<Tensor>,
    pub branch: BranchTag,
}

impl FeatureStack {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_shape(&self) -> Option<Vec<usize>> {
        self.samples.first().map(Tensor::shape)
    }
}

#[derive(Clone, Debug)]
pub struct Branch {
    pub blocks: Vec<ConvBlock>,
}

impl Branch {
    pub fn new(channels: &[usize], rng: &mut Rng) -> Self {
        let mut c_in = 3;
        let blocks = channels
            .iter()
            .zip(BLOCK_STRIDES)
            .map(|(&c_out, stride)| {
                let b = ConvBlock::new(c_in, c_out, stride, rng);
                c_in = c_out;
                b
            })
            .collect();
        Self { blocks }
    }

    fn check_input(x: &Tensor) -> Result<()> {
        match x.shape()[..] {
            [3, h, w] if h % FEATURE_STRIDE == 0 && w % FEATURE_STRIDE == 0 && h > 0 && w > 0 => {
                Ok(())
            }
            ref s => Err(Error::Dimension(format!(
                "extractor input must be [3, H, W] with H, W multiples of {FEATURE_STRIDE}, got {s:?}"
            ))),
        }
    }

    /// Deterministic pass with every dropout layer disabled.
    pub fn forward_deterministic(&self, x: &Tensor) -> Result<Tensor> {
        Self::check_input(x)?;
        self.blocks.iter().try_fold(x.clone(), |h, b| b.forward(&h))
    }

    /// `passes` stochastic passes. Blocks before the first dropout layer are
    /// deterministic, so they run once and the passes branch from there.
    pub fn forward_stack(
        &self,
        x: &Tensor,
        cfg: &BfeConfig,
        passes: usize,
        rng: &mut Rng,
    ) -> Result<Vec<Tensor>> {
        Self::check_input(x)?;
        let first_dropout = match cfg.dropout_layers.iter().next() {
            Some(&l) if cfg.dropout_rate > 0.0 => l,
            _ => {
                let out = self.forward_deterministic(x)?;
                return Ok(vec![out; passes]);
            }
        };
        let mut shared = x.clone();
        for block in &self.blocks[..first_dropout] {
            shared = block.forward(&shared)?;
        }
        let p = cfg.dropout_rate as Real;
        let mut samples = Vec::with_capacity(passes);
        for _ in 0..passes {
            let mut h = ops::dropout(&shared, p, true, rng)?;
            for (i, block) in self.blocks.iter().enumerate().skip(first_dropout) {
                h = block.forward(&h)?;
                if cfg.dropout_layers.contains(&(i + 1)) {
                    h = ops::dropout(&h, p, true, rng)?;
                }
            }
            samples.push(h);
        }
        Ok(samples)
    }

    pub fn named_parameters(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(i, b)| b.named_parameters(&format!("{prefix}.block{}", i + 1)))
            .collect()
    }
}

/// Main (thermal) and auxiliary (radar) branches: same architecture,
/// independent weights.
#[derive(Clone, Debug)]
pub struct BfeModel {
    pub main: Branch,
    pub auxiliary: Branch,
}

pub fn build_bfe(cfg: &BfeConfig, rng: &mut Rng) -> Result<BfeModel> {
    cfg.validate()?;
    Ok(BfeModel {
        main: Branch::new(&cfg.channels, rng),
        auxiliary: Branch::new(&cfg.channels, rng),
    })
}

impl BfeModel {
    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut v = self.main.named_parameters("bfe.main");
        v.extend(self.auxiliary.named_parameters("bfe.auxiliary"));
        v
    }
}

/// Runs `cfg.forward_passes` stochastic passes of each branch: thermal
/// through the main branch, radar depth through the auxiliary one.
pub fn bfe_forward(
    model: &BfeModel,
    thermal: &Tensor,
    radar_depth: &Tensor,
    cfg: &BfeConfig,
    rng: &mut Rng,
) -> Result<(FeatureStack, FeatureStack)> {
    if thermal.shape() != radar_depth.shape() {
        return Err(Error::Dimension(format!(
            "thermal {:?} and radar {:?} inputs differ",
            thermal.shape(),
            radar_depth.shape()
        )));
    }
    let n = cfg.forward_passes;
    let main = model.main.forward_stack(thermal, cfg, n, rng)?;
    let aux = model.auxiliary.forward_stack(radar_depth, cfg, n, rng)?;
    Ok((
        FeatureStack {
            samples: main,
            branch: BranchTag::Main,
        },
        FeatureStack {
            samples: aux,
            branch: BranchTag::Auxiliary,
        },
    ))
}
