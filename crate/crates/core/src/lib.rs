//! Uncertainty-guided thermal/radar fusion for human detection.
//!
//! Radar point clouds are projected into depth images aligned with the
//! thermal camera ([`geometry`]); a two-branch Monte-Carlo-dropout feature
//! extractor ([`bfe`]) turns each modality into a stack of stochastic feature
//! maps; [`fusion`] combines the stacks weighted by their variance (or by one
//! of the baseline strategies); [`mdn`] decodes multiscale detections; and
//! [`metrics`] scores them. [`synthdata`] generates paired scenes and
//! [`pipeline`] wires training, evaluation and ablations together.

pub mod bfe;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod mdn;
pub mod metrics;
pub mod pipeline;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
