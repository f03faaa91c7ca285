use std::fmt::Write as _;

use rand::SeedableRng;

use crate::error::Result;
use crate::mdn::{BBox, Detection};
use crate::metrics::{evaluate, suppress, threshold_label, EvalConfig, EvalReport, Frame};
use crate::tensor::{FlushDenormals, Rng};

use super::config::RunConfig;
use super::model::DetectorModel;
use super::train::Sample;

/// Stream offset separating inference draws from training draws.
const INFERENCE_STREAM: u64 = 1 << 32;

/// Dropout generator for the `index`-th frame of an inference run, so each
/// frame's result is independent of evaluation order.
pub fn inference_rng(seed: u64, index: usize) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(INFERENCE_STREAM + index as u64);
    rng
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: EvalReport,
    /// Decoded detections before NMS.
    pub raw: Vec<Frame<Detection>>,
    pub ground_truth: Vec<Frame<BBox>>,
    pub eval: EvalConfig,
}

impl Evaluation {
    /// Detections as scored: after NMS and the per-frame cap.
    pub fn detections(&self) -> Vec<Frame<Detection>> {
        self.raw
            .iter()
            .map(|(id, d)| (id.clone(), suppress(d, &self.eval)))
            .collect()
    }

    /// Re-scores the stored detections at other NMS thresholds.
    pub fn nms_sweep(&self, thresholds: &[f64]) -> Result<Vec<EvalReport>> {
        thresholds
            .iter()
            .map(|&t| {
                let cfg = EvalConfig {
                    nms_iou: t,
                    ..self.eval.clone()
                };
                evaluate(&self.raw, &self.ground_truth, &cfg)
            })
            .collect()
    }
}

/// NMS thresholds 0.30, 0.40, ..., 0.90.
pub fn nms_sweep_thresholds() -> Vec<f64> {
    (3..=9).map(|i| i as f64 / 10.0).collect()
}

pub fn format_nms_sweep(reports: &[EvalReport]) -> String {
    let mut s = format!("{:>8}  {:>10}  {:>11}\n", "NMS IoU", "mAP_50:95", "mmF1_50:95");
    for r in reports {
        let _ = writeln!(s, "{:>8.2}  {:>10.4}  {:>11.4}", r.nms_iou, r.map_50_95, r.mmf1_50_95);
    }
    s
}

/// MC-dropout inference over `samples` at `cfg.conf_threshold`, scored at
/// `cfg.eval`.
pub fn evaluate_model(model: &DetectorModel, cfg: &RunConfig, samples: &[Sample]) -> Result<Evaluation> {
    let _fp = FlushDenormals::enable();
    let mut raw = Vec::with_capacity(samples.len());
    let mut ground_truth = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let mut rng = inference_rng(cfg.seed, i);
        let dets = model.detect(&s.inputs, cfg, cfg.conf_threshold, &mut rng)?;
        raw.push((s.inputs.frame_id.clone(), dets));
        ground_truth.push((s.inputs.frame_id.clone(), s.gt.clone()));
    }
    let report = evaluate(&raw, &ground_truth, &cfg.eval)?;
    Ok(Evaluation {
        report,
        raw,
        ground_truth,
        eval: cfg.eval.clone(),
    })
}

/// One row per method: AP at each IoU threshold, then the two means.
pub fn format_comparison(rows: &[(String, EvalReport)]) -> String {
    let Some((_, first)) = rows.first() else {
        return String::new();
    };
    let mut s = format!("{:<8}", "Method");
    for t in &first.iou_thresholds {
        let _ = write!(s, " {:>6}", format!("AP{}", threshold_label(*t)));
    }
    let _ = writeln!(s, " {:>10} {:>11}", "mAP_50:95", "mmF1_50:95");
    for (name, r) in rows {
        let _ = write!(s, "{name:<8}");
        for ap in &r.ap {
            let _ = write!(s, " {ap:>6.3}");
        }
        let _ = writeln!(s, " {:>10.3} {:>11.3}", r.map_50_95, r.mmf1_50_95);
    }
    s
}
