//! Training, evaluation, ablation and inference runs.

mod checkpoint;
mod config;
mod eval;
mod model;
mod run;
mod train;

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use config::RunConfig;
pub use eval::{evaluate_model, format_comparison, format_nms_sweep, inference_rng, nms_sweep_thresholds, Evaluation};
pub use model::{DetectorModel, Extractor, FrameInputs};
pub use run::{
    ablate, ablation_tables, annotate, compare, evaluate_checkpoint, infer, AblationCell, AblationGrid, CompareRow,
};
pub use train::{
    accumulate_frame, anchors_from_samples, init_model, overfit_frame, prepare_samples, train, train_on, EpochRecord,
    Sample, TrainOutcome,
};
