use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bfe::BfeConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionStrategy;
use crate::mdn::{AnchorSet, LossConfig};
use crate::metrics::EvalConfig;
use crate::tensor::SgdConfig;

/// Everything a training or evaluation run needs. Serialized as TOML; a
/// resolved copy is written next to every run's outputs and embedded in
/// checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub strategy: FusionStrategy,
    pub dataset_dir: PathBuf,
    pub output_dir: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Objectness expected per image when initializing the head biases.
    pub expected_objects: f64,
    /// Cluster anchors from the training boxes instead of using `anchors`.
    pub auto_anchors: bool,
    pub anchors: AnchorSet,
    /// Detection confidence floor for evaluation.
    pub conf_threshold: f64,
    /// Detection confidence floor for `infer`.
    pub infer_conf_threshold: f64,
    pub bfe: BfeConfig,
    pub sgd: SgdConfig,
    pub loss: LossConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            strategy: FusionStrategy::Ugf,
            dataset_dir: PathBuf::from("data"),
            output_dir: PathBuf::from("runs/ugf"),
            epochs: 30,
            batch_size: 8,
            seed: 0,
            expected_objects: 2.5,
            auto_anchors: true,
            anchors: AnchorSet::default(),
            conf_threshold: 0.001,
            infer_conf_threshold: 0.25,
            bfe: BfeConfig::default(),
            // Desk-scale recipe: a 160x128 frame has 1/16 the cells of a
            // 640x512 one, so the objectness term is far smaller relative to
            // the box term and the step size than at full resolution.
            sgd: SgdConfig {
                learning_rate_initial: 0.1,
                ..SgdConfig::default()
            },
            loss: LossConfig {
                box_gain: 0.8,
                ..LossConfig::default()
            },
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map_or(0, |s| text.as_bytes()[..s.start.min(text.len())].iter().filter(|&&b| b == b'\n').count() + 1);
            Error::parse(path, line, e.message().to_string())
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        for (name, v) in [
            ("conf_threshold", self.conf_threshold),
            ("infer_conf_threshold", self.infer_conf_threshold),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        if !(self.expected_objects > 0.0) {
            return Err(Error::Config("expected_objects must be positive".into()));
        }
        self.bfe.validate()?;
        if self.strategy == FusionStrategy::Ugf && self.bfe.forward_passes < 2 {
            return Err(Error::Config("ugf needs forward_passes >= 2".into()));
        }
        self.sgd.validate()?;
        self.anchors.validate()?;
        self.eval.validate()
    }

    /// Copy with the optimizer schedule tied to `epochs`.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.sgd.total_epochs = c.epochs;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml(), Path::new("c.toml")).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_uses_defaults() {
        let cfg = RunConfig::from_toml("strategy = \"va\"\n[bfe]\nforward_passes = 3\n", Path::new("c")).unwrap();
        assert_eq!(cfg.strategy, FusionStrategy::Va);
        assert_eq!(cfg.bfe.forward_passes, 3);
        assert_eq!(cfg.bfe.dropout_rate, 0.2);
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = RunConfig::from_toml("epochs = 3\nepoch = 4\n", Path::new("c")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(RunConfig::from_toml("strategy = \"milli\"\n", Path::new("c")).is_err());
    }

    #[test]
    fn validation() {
        let mut cfg = RunConfig::default();
        cfg.validate().unwrap();
        cfg.bfe.forward_passes = 1;
        assert!(cfg.validate().is_err());
        cfg.strategy = FusionStrategy::Va;
        cfg.validate().unwrap();
    }
}
