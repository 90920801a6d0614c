//! The JSON document shared by every command.

use std::path::PathBuf;

use cgra_train::archmodel::Accounting;
use cgra_train::experiments::{ArchSpec, ExperimentPlan};
use cgra_train::learners::{LearningRule, TrainConfig};
use cgra_train::{Error, NetworkSpec, Precision, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub mnist_dir: PathBuf,
    pub train_size: usize,
    pub val_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            mnist_dir: PathBuf::from("data/mnist"),
            train_size: 10_000,
            val_size: 2_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub network: NetworkSpec,
    pub rule: LearningRule,
    /// Overrides the rule's default learning rate.
    pub lr: Option<f64>,
    pub epochs: usize,
    /// Seeds the subset split and, for `train`, the initialisation.
    pub seed: u64,
    pub precision: Precision,
    pub arch: ArchSpec,
    pub accounting: Accounting,
    pub out: PathBuf,
    pub workers: usize,
    /// Sweep plan; the default comparison plan when absent.
    pub plan: Option<ExperimentPlan>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            network: NetworkSpec::new(vec![784, 500, 500, 500, 10]).expect("valid default"),
            rule: LearningRule::Sgd,
            lr: None,
            epochs: 10,
            seed: 0,
            precision: Precision::Native,
            arch: ArchSpec::default(),
            accounting: Accounting::default(),
            out: PathBuf::from("out"),
            workers: 1,
            plan: None,
        }
    }
}

impl RunConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            rule: self.rule,
            lr: self.lr.unwrap_or_else(|| self.rule.default_lr()),
            epochs: self.epochs,
            seed: self.seed,
            precision: self.precision,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.train_size == 0 {
            return Err(Error::Config("data.train_size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be positive".into()));
        }
        self.train_config().validate()?;
        self.arch.resolve()?;
        self.accounting.validate()?;
        if let Some(p) = &self.plan {
            p.validate()?;
        }
        Ok(())
    }
}
