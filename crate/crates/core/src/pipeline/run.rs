use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::fusion::FusionStrategy;
use crate::geometry::SensorRig;
use crate::mdn::Detection;
use crate::metrics::{EvalConfig, EvalReport, Frame};
use crate::synthdata::{Dataset, SceneFrame, Split};
use crate::tensor::{FlushDenormals, NdArray};

use super::checkpoint::Checkpoint;
use super::config::RunConfig;
use super::eval::{evaluate_model, inference_rng, Evaluation};
use super::model::FrameInputs;
use super::train::{prepare_samples, train_on, TrainOutcome};

/// Scores a checkpoint on one split; `eval` overrides the embedded
/// evaluation settings.
pub fn evaluate_checkpoint(ck: &Checkpoint, ds: &Dataset, split: Split, eval: Option<&EvalConfig>) -> Result<Evaluation> {
    let mut cfg = ck.config.clone();
    if let Some(e) = eval {
        e.validate()?;
        cfg.eval = e.clone();
    }
    let frames = ds.subset(split);
    if frames.is_empty() {
        return Err(Error::Dataset(format!("{split} split is empty")));
    }
    let samples = prepare_samples(&frames, &ds.rig, &cfg)?;
    let model = ck.build_model()?;
    evaluate_model(&model, &cfg, &samples)
}

#[derive(Clone, Debug)]
pub struct CompareRow {
    pub strategy: FusionStrategy,
    pub training: TrainOutcome,
    pub test: EvalReport,
}

/// Trains every strategy with otherwise identical settings and scores each
/// best checkpoint on the test split. Run outputs go to
/// `<output_dir>/<strategy>/` when `output_dir` is given.
pub fn compare(cfg: &RunConfig, ds: &Dataset, strategies: &[FusionStrategy], output_dir: Option<&Path>) -> Result<Vec<CompareRow>> {
    if strategies.is_empty() {
        return Err(Error::Config("no strategies to compare".into()));
    }
    let mut rows = Vec::new();
    for &strategy in strategies {
        let run_cfg = RunConfig {
            strategy,
            ..cfg.clone()
        };
        let dir = output_dir.map(|d| d.join(strategy.as_str()));
        let training = train_on(&run_cfg, ds, dir.as_deref())?;
        let test = evaluate_checkpoint(&training.best, ds, Split::Test, None)?.report;
        rows.push(CompareRow {
            strategy,
            training,
            test,
        });
    }
    Ok(rows)
}

/// Cartesian grid over dropout placement, rate and pass count.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationGrid {
    pub layer_sets: Vec<BTreeSet<usize>>,
    pub rates: Vec<f64>,
    pub passes: Vec<usize>,
}

impl AblationGrid {
    /// `{5}, {4,5}, {3,4,5}, {2,3,4,5}, {1..5}` at one rate.
    pub fn layers(rate: f64, passes: usize) -> Self {
        Self {
            layer_sets: (1..=5).rev().map(|first| (first..=5).collect()).collect(),
            rates: vec![rate],
            passes: vec![passes],
        }
    }

    /// `p = 0.05, 0.10, ..., 0.25` on one layer set.
    pub fn rates(layers: BTreeSet<usize>, passes: usize) -> Self {
        Self {
            layer_sets: vec![layers],
            rates: (1..=5).map(|i| i as f64 * 0.05).collect(),
            passes: vec![passes],
        }
    }

    pub fn len(&self) -> usize {
        self.layer_sets.len() * self.rates.len() * self.passes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct AblationCell {
    pub layers: BTreeSet<usize>,
    pub rate: f64,
    pub passes: usize,
    pub test: EvalReport,
}

fn layer_label(layers: &BTreeSet<usize>) -> String {
    let v: Vec<String> = layers.iter().map(usize::to_string).collect();
    format!("i={}", v.join(","))
}

/// Trains and tests one model per grid cell.
pub fn ablate(cfg: &RunConfig, ds: &Dataset, grid: &AblationGrid, output_dir: Option<&Path>) -> Result<Vec<AblationCell>> {
    if grid.is_empty() {
        return Err(Error::Config("empty ablation grid".into()));
    }
    let mut runs = Vec::with_capacity(grid.len());
    for layers in &grid.layer_sets {
        for &rate in &grid.rates {
            for &passes in &grid.passes {
                let mut c = cfg.clone();
                c.bfe.dropout_layers = layers.clone();
                c.bfe.dropout_rate = rate;
                c.bfe.forward_passes = passes;
                c.resolved().validate()?;
                runs.push(c);
            }
        }
    }
    let mut cells = Vec::with_capacity(runs.len());
    for c in runs {
        let name = format!(
            "{}_p{:.2}_n{}",
            layer_label(&c.bfe.dropout_layers).replace(',', "-"),
            c.bfe.dropout_rate,
            c.bfe.forward_passes
        );
        let dir = output_dir.map(|d| d.join(name));
        let training = train_on(&c, ds, dir.as_deref())?;
        let test = evaluate_checkpoint(&training.best, ds, Split::Test, None)?.report;
        cells.push(AblationCell {
            layers: c.bfe.dropout_layers.clone(),
            rate: c.bfe.dropout_rate,
            passes: c.bfe.forward_passes,
            test,
        });
    }
    Ok(cells)
}

fn distinct<T: PartialEq + Clone>(items: impl Iterator<Item = T>) -> Vec<T> {
    let mut out: Vec<T> = Vec::new();
    for i in items {
        if !out.contains(&i) {
            out.push(i);
        }
    }
    out
}

/// Layer-placement table (one row per layer set, check marks per block) and
/// rate table (one column per p), for each slice of the grid they apply to.
pub fn ablation_tables(cells: &[AblationCell]) -> String {
    let layer_sets = distinct(cells.iter().map(|c| c.layers.clone()));
    let rates = distinct(cells.iter().map(|c| c.rate.to_bits()));
    let passes = distinct(cells.iter().map(|c| c.passes));
    let mut s = String::new();
    if layer_sets.len() > 1 || rates.len() == 1 {
        for &r in &rates {
            for &n in &passes {
                let rows: Vec<&AblationCell> = cells
                    .iter()
                    .filter(|c| c.rate.to_bits() == r && c.passes == n)
                    .collect();
                let _ = writeln!(s, "mAP_50:95 by dropout layers (p={:.2}, N={n})", f64::from_bits(r));
                let _ = writeln!(s, "{:<12} {:>2} {:>2} {:>2} {:>2} {:>2}  {:>9}", "", 1, 2, 3, 4, 5, "mAP_50:95");
                for c in rows {
                    let _ = write!(s, "{:<12}", layer_label(&c.layers));
                    for block in 1..=5 {
                        let _ = write!(s, " {:>2}", if c.layers.contains(&block) { "x" } else { "" });
                    }
                    let _ = writeln!(s, "  {:>9.3}", c.test.map_50_95);
                }
                s.push('\n');
            }
        }
    }
    if rates.len() > 1 {
        for layers in &layer_sets {
            for &n in &passes {
                let row: Vec<&AblationCell> = cells.iter().filter(|c| &c.layers == layers && c.passes == n).collect();
                let _ = writeln!(s, "mAP_50:95 by dropout rate ({}, N={n})", layer_label(layers));
                let _ = write!(s, "{:<10}", "");
                for c in &row {
                    let _ = write!(s, " {:>7}", format!("p={:.2}", c.rate));
                }
                let _ = write!(s, "\n{:<10}", "mAP_50:95");
                for c in &row {
                    let _ = write!(s, " {:>7.3}", c.test.map_50_95);
                }
                s.push_str("\n\n");
            }
        }
    }
    if passes.len() > 1 {
        let _ = writeln!(s, "mAP_50:95 by forward passes");
        for c in cells {
            let _ = writeln!(
                s,
                "{:<12} p={:.2} N={:<3} {:>7.3}",
                layer_label(&c.layers),
                c.rate,
                c.passes,
                c.test.map_50_95
            );
        }
    }
    s
}

/// Detections after NMS for standalone frames.
pub fn infer(ck: &Checkpoint, rig: &SensorRig, frames: &[SceneFrame], conf_threshold: f64, nms_iou: f64) -> Result<Vec<Frame<Detection>>> {
    let _fp = FlushDenormals::enable();
    let model = ck.build_model()?;
    let cfg = &ck.config;
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let x = FrameInputs::new(f, rig, cfg.strategy)?;
            let dets = model.predict(&x, cfg, conf_threshold, nms_iou, &mut inference_rng(cfg.seed, i))?;
            Ok((f.frame_id.clone(), dets))
        })
        .collect()
}

/// Writes the thermal frame as a PNG with detection boxes drawn in red.
pub fn annotate(thermal: &NdArray, dets: &[Detection], path: &Path) -> Result<()> {
    let (_, h, w) = thermal.dims3()?;
    let mut img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = (thermal.data()[y as usize * w + x as usize] as f64).clamp(0.0, 1.0);
        let g = (v * 255.0).round() as u8;
        Rgb([g, g, g])
    });
    let red = Rgb([255, 0, 0]);
    for d in dets {
        let b = d.bbox.clip(w as f64, h as f64);
        if !b.is_valid() {
            continue;
        }
        let x0 = b.x_min.floor() as u32;
        let y0 = b.y_min.floor() as u32;
        let x1 = (b.x_max.ceil() as u32).saturating_sub(1).min(w as u32 - 1);
        let y1 = (b.y_max.ceil() as u32).saturating_sub(1).min(h as u32 - 1);
        for x in x0..=x1 {
            img.put_pixel(x, y0, red);
            img.put_pixel(x, y1, red);
        }
        for y in y0..=y1 {
            img.put_pixel(x0, y, red);
            img.put_pixel(x1, y, red);
        }
    }
    img.save(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}
