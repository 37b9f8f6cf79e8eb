use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gmoe::Gating;
use crate::learners::{GrowOrder, LearnerConfig, LearnerKind};
use crate::numkit::{MlpConfig, OptimizerConfig};

/// Environment variable that relocates relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "ALMA_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adadelta,
    Sgd,
}

/// One experiment, read from a flat JSON object. Missing keys take the
/// defaults below; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub mnist_dir: PathBuf,
    pub synthetic_classes: usize,
    pub synthetic_dim: usize,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub synthetic_spread: f64,
    pub synthetic_seed: u64,

    pub mega_batches: usize,
    pub val_frac: f64,
    pub waiting_time: usize,
    pub replay: bool,

    pub learner: LearnerKind,
    pub hidden: Vec<usize>,
    pub components: usize,
    pub grow_k: usize,
    pub moe_layers: Vec<usize>,
    pub gating: Gating,
    /// Defaults to whether the learner is a growing one.
    pub grow: Option<bool>,
    pub grow_order: GrowOrder,

    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub rho: f64,
    pub eps: f64,

    pub epochs_per_event: usize,
    pub minibatch_size: usize,
    pub from_scratch: bool,
    pub patience: Option<usize>,

    pub seed_stream: u64,
    pub seed_init: u64,
    pub seed_routing: u64,

    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Mnist,
            mnist_dir: PathBuf::from("data/mnist"),
            synthetic_classes: 10,
            synthetic_dim: 20,
            synthetic_train: 6000,
            synthetic_test: 1000,
            synthetic_spread: 1.0,
            synthetic_seed: 0,
            mega_batches: 500,
            val_frac: 0.1,
            waiting_time: 5,
            replay: false,
            learner: LearnerKind::Sm,
            hidden: vec![64, 64],
            components: 5,
            grow_k: 1,
            moe_layers: vec![0, 1],
            gating: Gating::Soft,
            grow: None,
            grow_order: GrowOrder::Before,
            optimizer: OptimizerKind::Adadelta,
            lr: 0.01,
            momentum: 0.9,
            rho: 0.9,
            eps: 1e-6,
            epochs_per_event: 20,
            minibatch_size: 128,
            from_scratch: false,
            patience: None,
            seed_stream: 0,
            seed_init: 0,
            seed_routing: 0,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        match self.optimizer {
            OptimizerKind::Adadelta => OptimizerConfig::Adadelta {
                rho: self.rho,
                eps: self.eps,
            },
            OptimizerKind::Sgd => OptimizerConfig::Sgd {
                lr: self.lr,
                momentum: self.momentum,
            },
        }
    }

    pub fn grows(&self) -> bool {
        self.grow.unwrap_or(self.learner.is_growing())
    }

    /// Learner settings for data of dimension `input_dim` with
    /// `num_classes` classes.
    pub fn learner_config(&self, input_dim: usize, num_classes: usize) -> LearnerConfig {
        let mlp = MlpConfig {
            input_dim,
            hidden_dims: self.hidden.clone(),
            num_classes,
            seed: self.seed_init,
        };
        LearnerConfig {
            components: self.components,
            grow_k: self.grow_k,
            moe_layers: self.moe_layers.clone(),
            gating: self.gating,
            grow: self.grows(),
            grow_order: self.grow_order,
            optimizer: self.optimizer_config(),
            minibatch_size: self.minibatch_size,
            from_scratch: self.from_scratch,
            patience: self.patience,
            routing_seed: self.seed_routing,
            ..LearnerConfig::new(self.learner, mlp)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mega_batches == 0 {
            return Err(config_err("mega_batches must be at least 1"));
        }
        if self.waiting_time == 0 || self.waiting_time > self.mega_batches {
            return Err(config_err(format!(
                "waiting_time {} must lie in 1..={}",
                self.waiting_time, self.mega_batches
            )));
        }
        if !(0.0..1.0).contains(&self.val_frac) {
            return Err(config_err(format!("val_frac {} outside [0, 1)", self.val_frac)));
        }
        if self.epochs_per_event == 0 {
            return Err(config_err("epochs_per_event must be at least 1"));
        }
        if self.grows() && self.learner == LearnerKind::Gmoe && self.val_frac == 0.0 {
            return Err(config_err("growing a gmoe needs validation data (val_frac > 0)"));
        }
        if self.patience == Some(0) {
            return Err(config_err("patience must be at least 1"));
        }
        if self.dataset == DatasetKind::Synthetic {
            if self.synthetic_classes < 2 || self.synthetic_dim == 0 {
                return Err(config_err("synthetic data needs at least 2 classes and 1 dimension"));
            }
            if self.synthetic_train < self.mega_batches || self.synthetic_test == 0 {
                return Err(config_err("synthetic_train must cover every mega-batch and synthetic_test be positive"));
            }
            if !(self.synthetic_spread.is_finite() && self.synthetic_spread >= 0.0) {
                return Err(config_err("synthetic_spread must be finite and non-negative"));
            }
        }
        if let OptimizerKind::Sgd = self.optimizer {
            if !(self.lr > 0.0 && (0.0..1.0).contains(&self.momentum)) {
                return Err(config_err("sgd needs lr > 0 and momentum in [0, 1)"));
            }
        }
        let classes = match self.dataset {
            DatasetKind::Mnist => 10,
            DatasetKind::Synthetic => self.synthetic_classes,
        };
        self.learner_config(1, classes).validate()
    }

    /// The configuration as hashed: every field except `output_dir`.
    pub fn canonical_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config is plain data");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("output_dir");
        }
        serde_json::to_string(&v).expect("value serialises")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    /// `output_dir`, placed under `$ALMA_OUTPUT_ROOT` when that is set and
    /// the directory is relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }
}
