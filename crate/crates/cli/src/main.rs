use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ugf_core::fusion::FusionStrategy;
use ugf_core::geometry::SensorRig;
use ugf_core::metrics::{format_detection_dump, EvalConfig};
use ugf_core::pipeline::{
    ablate, ablation_tables, annotate, compare, evaluate_checkpoint, format_comparison, format_nms_sweep, infer,
    nms_sweep_thresholds, train, AblationGrid, Checkpoint, RunConfig,
};
use ugf_core::synthdata::{generate_dataset, load_frame, write_dataset, SceneGenConfig, Split, SplitRatios};
use ugf_core::{Error, Result};

#[derive(Parser)]
#[command(name = "ugf", version, about = "Thermal/radar human detection with uncertainty-guided fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic thermal/radar dataset.
    GenData(GenArgs),
    /// Train one model; writes best.ckpt, last.ckpt, train_log.txt and config.toml.
    Train(RunArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Train and test one model per dropout placement / rate / pass count.
    Ablate(AblateArgs),
    /// Detect humans in frames without ground truth.
    Infer(InferArgs),
    /// Train every fusion strategy with the same settings and tabulate test AP.
    Compare(CompareArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    count: usize,
    /// Overrides the seed in --config.
    #[arg(long)]
    seed: Option<u64>,
    /// Generator settings (TOML, any subset of the keys).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    /// Train,val,test fractions.
    #[arg(long, value_delimiter = ',', default_values_t = [0.64, 0.18, 0.18])]
    split: Vec<f64>,
}

/// Run settings: a config file, then flag overrides.
#[derive(Args, Clone)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<FusionStrategy>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Initial learning rate.
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// NMS IoU threshold (default: the checkpoint's).
    #[arg(long)]
    nms_iou: Option<f64>,
    /// Also score at each NMS threshold; without values 0.30, 0.40, ..., 0.90.
    #[arg(long, value_delimiter = ',', num_args = 0..)]
    nms_sweep: Option<Vec<f64>>,
    /// Directory for report.txt, pr.csv and detections.txt.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// {5}, {4,5}, {3,4,5}, {2,3,4,5}, {1..5} at one rate.
    Layers,
    /// p = 0.05 ... 0.25 on one layer set.
    Rates,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_enum)]
    grid: Option<Preset>,
    /// A dropout layer set such as `4,5`; repeat for several rows.
    #[arg(long = "layer-set", value_parser = parse_layer_set)]
    layer_sets: Vec<BTreeSet<usize>>,
    #[arg(long, value_delimiter = ',')]
    rates: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    passes: Vec<usize>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory holding calib.txt and frames/.
    #[arg(long)]
    input: PathBuf,
    /// Frame ids (default: every frame under frames/).
    #[arg(long, value_delimiter = ',')]
    ids: Vec<String>,
    #[arg(long)]
    conf: Option<f64>,
    #[arg(long)]
    nms_iou: Option<f64>,
    /// Detection dump path (default: stdout).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Directory for PNGs with the boxes drawn.
    #[arg(long)]
    annotate: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_delimiter = ',', default_values_t = FusionStrategy::ALL.to_vec())]
    strategies: Vec<FusionStrategy>,
}

fn parse_layer_set(s: &str) -> std::result::Result<BTreeSet<usize>, String> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.class());
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => {
            let cfg = run_config(&a)?;
            let out = train(&cfg)?;
            let best = &out.best;
            println!(
                "best epoch {} val mAP50:95 {:.4}; outputs in {}",
                best.epoch,
                best.best_metric,
                cfg.output_dir.display()
            );
            Ok(())
        }
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablation(a),
        Command::Infer(a) => inference(a),
        Command::Compare(a) => {
            let cfg = run_config(&a.run)?;
            let ds = ugf_core::synthdata::load_dataset(&cfg.dataset_dir)?;
            let rows = compare(&cfg, &ds, &a.strategies, Some(&cfg.output_dir))?;
            let table: Vec<_> = rows.iter().map(|r| (r.strategy.to_string(), r.test.clone())).collect();
            let text = format_comparison(&table);
            write(&cfg.output_dir.join("compare.txt"), &text)?;
            print!("{text}");
            Ok(())
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    }
    fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn run_config(a: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = &a.dataset {
        cfg.dataset_dir = v.clone();
    }
    if let Some(v) = &a.output {
        cfg.output_dir = v.clone();
    }
    if let Some(v) = a.strategy {
        cfg.strategy = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.lr {
        cfg.sgd.learning_rate_initial = v;
    }
    cfg.validate()?;
    if !cfg.dataset_dir.is_dir() {
        return Err(Error::Dataset(format!("dataset directory {} not found", cfg.dataset_dir.display())));
    }
    Ok(cfg)
}

fn gen_data(a: GenArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => toml::from_str::<SceneGenConfig>(&read(p)?)
            .map_err(|e| Error::Config(format!("{}: {}", p.display(), e.message())))?,
        None => SceneGenConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.width {
        cfg.width = v;
    }
    if let Some(v) = a.height {
        cfg.height = v;
    }
    cfg.validate()?;
    let [train, val, test] = a.split[..] else {
        return Err(Error::Config(format!("--split needs three fractions, got {}", a.split.len())));
    };
    let ratios = SplitRatios { train, val, test };
    let ds = generate_dataset(&cfg, a.count, ratios)?;
    write_dataset(&ds, &a.out)?;
    let n = |s: Split| ds.splits.iter().filter(|&&x| x == s).count();
    println!(
        "{} frames ({} train, {} val, {} test) written to {}",
        ds.frames.len(),
        n(Split::Train),
        n(Split::Val),
        n(Split::Test),
        a.out.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let ds = ugf_core::synthdata::load_dataset(&a.dataset)?;
    let eval_cfg = EvalConfig { nms_iou: a.nms_iou.unwrap_or(ck.config.eval.nms_iou), ..ck.config.eval.clone() };
    let ev = evaluate_checkpoint(&ck, &ds, a.split.into(), Some(&eval_cfg))?;
    print!("{}", ev.report.to_table());
    let sweep = match &a.nms_sweep {
        Some(t) => {
            let thresholds = if t.is_empty() { nms_sweep_thresholds() } else { t.clone() };
            let text = format_nms_sweep(&ev.nms_sweep(&thresholds)?);
            print!("\n{text}");
            Some(text)
        }
        None => None,
    };
    if let Some(dir) = &a.output {
        write(&dir.join("report.txt"), &ev.report.to_key_values())?;
        write(&dir.join("pr.csv"), &ev.report.pr_csv())?;
        write(&dir.join("detections.txt"), &format_detection_dump(&ev.detections()))?;
        if let Some(text) = sweep {
            write(&dir.join("nms_sweep.txt"), &text)?;
        }
    }
    Ok(())
}

fn ablation(a: AblateArgs) -> Result<()> {
    let cfg = run_config(&a.run)?;
    let passes = cfg.bfe.forward_passes;
    let mut grid = match a.grid {
        Some(Preset::Layers) => AblationGrid::layers(cfg.bfe.dropout_rate, passes),
        Some(Preset::Rates) => AblationGrid::rates(cfg.bfe.dropout_layers.clone(), passes),
        None => AblationGrid {
            layer_sets: vec![cfg.bfe.dropout_layers.clone()],
            rates: vec![cfg.bfe.dropout_rate],
            passes: vec![passes],
        },
    };
    if !a.layer_sets.is_empty() {
        grid.layer_sets = a.layer_sets;
    }
    if !a.rates.is_empty() {
        grid.rates = a.rates;
    }
    if !a.passes.is_empty() {
        grid.passes = a.passes;
    }
    let ds = ugf_core::synthdata::load_dataset(&cfg.dataset_dir)?;
    let cells = ablate(&cfg, &ds, &grid, Some(&cfg.output_dir))?;
    let text = ablation_tables(&cells);
    write(&cfg.output_dir.join("ablation.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn frame_ids(frames_dir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(frames_dir).map_err(|e| Error::Io { path: frames_dir.to_path_buf(), source: e })?;
    let mut ids: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str()?.strip_suffix(".thermal.pgm").map(str::to_string))
        .collect();
    ids.sort();
    Ok(ids)
}

fn inference(a: InferArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let calib = a.input.join("calib.txt");
    if !calib.is_file() {
        return Err(Error::CalibrationNotFound(calib));
    }
    let rig = SensorRig::parse_calib(&read(&calib)?, &calib)?;
    let frames_dir = a.input.join("frames");
    let ids = if a.ids.is_empty() { frame_ids(&frames_dir)? } else { a.ids };
    let frames = ids.iter().map(|id| load_frame(&frames_dir, id)).collect::<Result<Vec<_>>>()?;
    let conf = a.conf.unwrap_or(ck.config.infer_conf_threshold);
    let nms_iou = a.nms_iou.unwrap_or(ck.config.eval.nms_iou);
    let dets = infer(&ck, &rig, &frames, conf, nms_iou)?;
    let dump = format_detection_dump(&dets);
    match &a.output {
        Some(p) => write(p, &dump)?,
        None => print!("{dump}"),
    }
    if let Some(dir) = &a.annotate {
        fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
        for (f, (id, d)) in frames.iter().zip(&dets) {
            annotate(&f.thermal, d, &dir.join(format!("{id}.png")))?;
        }
    }
    Ok(())
}
