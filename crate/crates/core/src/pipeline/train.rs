use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::geometry::SensorRig;
use crate::mdn::{detection_loss, AnchorSet, BBox, STRIDES};
use crate::synthdata::{load_dataset, Dataset, SceneFrame, Split};
use crate::tensor::{lr_schedule, ops, optim::sgd_step_with_lr, seeded_rng, FlushDenormals, Real, Rng, SgdState};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::eval::evaluate_model;
use super::model::{DetectorModel, FrameInputs};

/// A frame's network inputs with its ground truth.
#[derive(Clone, Debug)]
pub struct Sample {
    pub inputs: FrameInputs,
    pub gt: Vec<BBox>,
}

pub fn prepare_samples(frames: &[&SceneFrame], rig: &SensorRig, cfg: &RunConfig) -> Result<Vec<Sample>> {
    frames
        .iter()
        .map(|f| {
            Ok(Sample {
                inputs: FrameInputs::new(f, rig, cfg.strategy)?,
                gt: f.gt_boxes.clone(),
            })
        })
        .collect()
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_map_50_95: f64,
    pub val_mmf1_50_95: f64,
    pub wall_time_s: f64,
}

impl EpochRecord {
    pub fn to_line(&self) -> String {
        format!(
            "epoch={} lr={:.6} train_loss={:.6} val_map_50_95={:.6} val_mmf1_50_95={:.6} wall_time={:.1}",
            self.epoch, self.lr, self.train_loss, self.val_map_50_95, self.val_mmf1_50_95, self.wall_time_s
        )
    }

    pub fn parse_line(line: &str) -> Option<Self> {
        let mut rec = Self {
            epoch: 0,
            lr: 0.0,
            train_loss: 0.0,
            val_map_50_95: 0.0,
            val_mmf1_50_95: 0.0,
            wall_time_s: 0.0,
        };
        for kv in line.split_whitespace() {
            let (k, v) = kv.split_once('=')?;
            match k {
                "epoch" => rec.epoch = v.parse().ok()?,
                "lr" => rec.lr = v.parse().ok()?,
                "train_loss" => rec.train_loss = v.parse().ok()?,
                "val_map_50_95" => rec.val_map_50_95 = v.parse().ok()?,
                "val_mmf1_50_95" => rec.val_mmf1_50_95 = v.parse().ok()?,
                "wall_time" => rec.wall_time_s = v.parse().ok()?,
                _ => return None,
            }
        }
        Some(rec)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best checkpoint by validation mAP_50:95.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: Vec<EpochRecord>,
    /// Where `best.ckpt`, `last.ckpt`, `train_log.txt` and `config.toml` went.
    pub output_dir: Option<PathBuf>,
}

/// Loads `cfg.dataset_dir` and trains, writing outputs to `cfg.output_dir`.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let ds = load_dataset(&cfg.dataset_dir)?;
    train_on(cfg, &ds, Some(&cfg.output_dir))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Anchors clustered from the training boxes.
pub fn anchors_from_samples(samples: &[Sample]) -> AnchorSet {
    let sizes: Vec<(f64, f64)> = samples
        .iter()
        .flat_map(|s| s.gt.iter().map(|b| (b.width(), b.height())))
        .collect();
    AnchorSet::from_boxes(&sizes)
}

/// Resolved config (schedule tied to epochs, anchors fitted when requested)
/// and a freshly initialized model.
pub fn init_model(cfg: &RunConfig, train: &[Sample]) -> Result<(RunConfig, DetectorModel)> {
    let mut cfg = cfg.resolved();
    if cfg.auto_anchors {
        cfg.anchors = anchors_from_samples(train);
        cfg.auto_anchors = false;
    }
    cfg.validate()?;
    let mut rng = seeded_rng(cfg.seed);
    let model = DetectorModel::new(&cfg, &mut rng)?;
    let (w, h) = train
        .first()
        .map(|s| s.inputs.image_size)
        .ok_or_else(|| Error::Dataset("training split is empty".into()))?;
    let cells = STRIDES.map(|s| (w / s) * (h / s));
    model.mdn.init_objectness_prior(cells, cfg.expected_objects);
    Ok((cfg, model))
}

/// Forward, loss and backward for one frame, with the loss scaled by
/// `weight` before backpropagation. Returns the unscaled loss.
pub fn accumulate_frame(model: &DetectorModel, cfg: &RunConfig, sample: &Sample, weight: Real, rng: &mut Rng) -> Result<f64> {
    let raw = model.forward(&sample.inputs, cfg, rng)?;
    let loss = detection_loss(&raw, &sample.gt, &model.anchors, &cfg.loss)?;
    let value = loss.item()? as f64;
    if value.is_finite() {
        ops::mul_scalar(&loss, weight).backward()?;
    }
    Ok(value)
}

/// Runs the training loop on the dataset's train split, selecting the best
/// epoch on the val split.
pub fn train_on(cfg: &RunConfig, ds: &Dataset, output_dir: Option<&Path>) -> Result<TrainOutcome> {
    let _fp = FlushDenormals::enable();
    let train_frames = ds.subset(Split::Train);
    let val_frames = ds.subset(Split::Val);
    if val_frames.is_empty() {
        return Err(Error::Dataset("validation split is empty".into()));
    }
    let train_set = prepare_samples(&train_frames, &ds.rig, cfg)?;
    let val_set = prepare_samples(&val_frames, &ds.rig, cfg)?;
    let (cfg, model) = init_model(cfg, &train_set)?;

    if let Some(dir) = output_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write(&dir.join("config.toml"), &cfg.to_toml())?;
    }
    let params = model.parameters();
    let mut state = SgdState::new(&params);
    // Separate streams keep data order independent of dropout draws.
    let mut order_rng = Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(1);
    let mut dropout_rng = Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(2);

    let started = Instant::now();
    let mut log = Vec::new();
    let mut log_text = String::new();
    let mut best: Option<Checkpoint> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(&cfg.sgd, epoch)?;
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let weight = 1.0 / batch.len() as Real;
            for &i in batch {
                let sample = &train_set[i];
                let loss = accumulate_frame(&model, &cfg, sample, weight, &mut dropout_rng)?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch: epoch + 1,
                        batch: b,
                        detail: format!("frame {} gave loss {loss}", sample.inputs.frame_id),
                    });
                }
                loss_sum += loss;
            }
            sgd_step_with_lr(&params, &mut state, &cfg.sgd, lr)?;
        }
        let val = evaluate_model(&model, &cfg, &val_set)?;
        let rec = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            val_map_50_95: val.report.map_50_95,
            val_mmf1_50_95: val.report.mmf1_50_95,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        let _ = writeln!(log_text, "{}", rec.to_line());
        let improved = best.as_ref().map_or(true, |b| rec.val_map_50_95 > b.best_metric);
        if improved {
            let ck = Checkpoint::capture(&model, &state, &cfg, epoch + 1, rec.val_map_50_95);
            if let Some(dir) = output_dir {
                ck.save(&dir.join("best.ckpt"))?;
            }
            best = Some(ck);
        }
        if let Some(dir) = output_dir {
            write(&dir.join("train_log.txt"), &log_text)?;
        }
        log.push(rec);
    }
    let best_metric = best.as_ref().map_or(0.0, |b| b.best_metric);
    let last = Checkpoint::capture(&model, &state, &cfg, cfg.epochs, best_metric);
    if let Some(dir) = output_dir {
        last.save(&dir.join("last.ckpt"))?;
    }
    Ok(TrainOutcome {
        best: best.expect("at least one epoch"),
        last,
        log,
        output_dir: output_dir.map(Path::to_path_buf),
    })
}

/// Repeated SGD steps on a single frame; returns the loss before each step.
pub fn overfit_frame(cfg: &RunConfig, sample: &Sample, steps: usize, lr: f64) -> Result<Vec<f64>> {
    let _fp = FlushDenormals::enable();
    let mut cfg = cfg.clone();
    cfg.auto_anchors = false;
    let (cfg, model) = init_model(&cfg, std::slice::from_ref(sample))?;
    let params = model.parameters();
    let mut state = SgdState::new(&params);
    let mut rng = seeded_rng(cfg.seed ^ 0x5eed);
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        losses.push(accumulate_frame(&model, &cfg, sample, 1.0, &mut rng)?);
        sgd_step_with_lr(&params, &mut state, &cfg.sgd, lr)?;
    }
    Ok(losses)
}
