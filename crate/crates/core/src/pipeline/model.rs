use crate::bfe::{bfe_forward, build_bfe, BfeModel, Branch, FEATURE_CHANNELS};
use crate::error::{Error, Result};
use crate::fusion::{am_fuse, sod_compose, ugf_fuse, va_fuse, AmParams, FusedFeature, FusionStrategy};
use crate::geometry::{project_cloud, SensorRig};
use crate::mdn::{confidence_order, decode_boxes, mdn_forward, AnchorSet, Detection, Mdn, STRIDES};
use crate::metrics::{suppress, EvalConfig};
use crate::synthdata::SceneFrame;
use crate::tensor::{NdArray, Rng, Tensor};

use super::config::RunConfig;

/// Most confident decoded boxes kept per frame ahead of NMS.
pub const MAX_CANDIDATES: usize = 3000;

/// Network-ready tensors of one frame.
#[derive(Clone, Debug)]
pub struct FrameInputs {
    pub frame_id: String,
    /// `[3, H, W]` thermal, or the pseudo-RGB composite for `sod`.
    pub main: NdArray,
    /// `[3, H, W]` normalized radar depth; unused by `sod`.
    pub auxiliary: NdArray,
    pub image_size: (usize, usize),
}

impl FrameInputs {
    pub fn new(frame: &SceneFrame, rig: &SensorRig, strategy: FusionStrategy) -> Result<Self> {
        let (c, h, w) = frame.thermal.dims3()?;
        if c != 1 || (w, h) != (rig.width, rig.height) {
            return Err(Error::Dimension(format!(
                "frame {} thermal {:?} does not match the {}x{} rig",
                frame.frame_id,
                frame.thermal.shape(),
                rig.width,
                rig.height
            )));
        }
        if h % STRIDES[2] != 0 || w % STRIDES[2] != 0 {
            return Err(Error::Dimension(format!(
                "image size {w}x{h} must be divisible by {}",
                STRIDES[2]
            )));
        }
        let depth = project_cloud(&frame.radar, rig);
        let auxiliary = depth.to_network_input(rig.max_range_m);
        let main = match strategy {
            FusionStrategy::Sod => {
                let radar1 = NdArray::new(vec![1, h, w], auxiliary.channel(0).to_vec())?;
                sod_compose(&frame.thermal, &radar1)?
            }
            _ => frame.thermal.replicate_channels(3)?,
        };
        Ok(Self {
            frame_id: frame.frame_id.clone(),
            main,
            auxiliary,
            image_size: (w, h),
        })
    }
}

#[derive(Clone, Debug)]
pub enum Extractor {
    Dual(BfeModel),
    /// Deterministic single branch over the input-level composite.
    Single(Branch),
}

/// Feature extractor, fusion parameters and detection net for one strategy.
#[derive(Clone, Debug)]
pub struct DetectorModel {
    pub strategy: FusionStrategy,
    pub extractor: Extractor,
    pub am: Option<AmParams>,
    pub mdn: Mdn,
    pub anchors: AnchorSet,
}

impl DetectorModel {
    pub fn new(cfg: &RunConfig, rng: &mut Rng) -> Result<Self> {
        cfg.bfe.validate()?;
        let extractor = match cfg.strategy {
            FusionStrategy::Sod => Extractor::Single(Branch::new(&cfg.bfe.channels, rng)),
            _ => Extractor::Dual(build_bfe(&cfg.bfe, rng)?),
        };
        let am = (cfg.strategy == FusionStrategy::Am).then(|| AmParams::new(FEATURE_CHANNELS, rng));
        let mdn = Mdn::new(rng);
        Ok(Self {
            strategy: cfg.strategy,
            extractor,
            am,
            mdn,
            anchors: cfg.anchors.clone(),
        })
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut v = match &self.extractor {
            Extractor::Dual(b) => b.named_parameters(),
            Extractor::Single(b) => b.named_parameters("bfe.single"),
        };
        if let Some(am) = &self.am {
            v.extend(am.named_parameters());
        }
        v.extend(self.mdn.named_parameters());
        v
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        self.named_parameters().into_iter().map(|(_, t)| t).collect()
    }

    pub fn fuse(&self, x: &FrameInputs, cfg: &RunConfig, rng: &mut Rng) -> Result<FusedFeature> {
        let main = Tensor::constant(x.main.clone());
        match &self.extractor {
            Extractor::Single(branch) => Ok(FusedFeature {
                map: branch.forward_deterministic(&main)?,
                weight_maps: None,
            }),
            Extractor::Dual(bfe) => {
                let aux = Tensor::constant(x.auxiliary.clone());
                let (fm, fa) = bfe_forward(bfe, &main, &aux, &cfg.bfe, rng)?;
                match self.strategy {
                    FusionStrategy::Ugf => ugf_fuse(&fm, &fa, false),
                    FusionStrategy::Va => va_fuse(&fm, &fa),
                    FusionStrategy::Am => am_fuse(&fm, &fa, self.am.as_ref().expect("am params")),
                    FusionStrategy::Sod => unreachable!("sod uses a single branch"),
                }
            }
        }
    }

    /// Raw head outputs at the three strides.
    pub fn forward(&self, x: &FrameInputs, cfg: &RunConfig, rng: &mut Rng) -> Result<Vec<Tensor>> {
        mdn_forward(&self.fuse(x, cfg, rng)?, &self.mdn)
    }

    /// Decoded detections above `conf_threshold`, before NMS.
    pub fn detect(&self, x: &FrameInputs, cfg: &RunConfig, conf_threshold: f64, rng: &mut Rng) -> Result<Vec<Detection>> {
        let raw: Vec<NdArray> = self
            .forward(x, cfg, rng)?
            .iter()
            .map(|t| t.value().clone())
            .collect();
        let mut dets = decode_boxes(&raw, &self.anchors, conf_threshold, x.image_size)?;
        if dets.len() > MAX_CANDIDATES {
            let keep = confidence_order(&dets);
            dets = keep[..MAX_CANDIDATES].iter().map(|&i| dets[i]).collect();
        }
        Ok(dets)
    }

    /// Detections after NMS.
    pub fn predict(&self, x: &FrameInputs, cfg: &RunConfig, conf_threshold: f64, nms_iou: f64, rng: &mut Rng) -> Result<Vec<Detection>> {
        let eval = EvalConfig {
            nms_iou,
            ..cfg.eval.clone()
        };
        Ok(suppress(&self.detect(x, cfg, conf_threshold, rng)?, &eval))
    }
}
