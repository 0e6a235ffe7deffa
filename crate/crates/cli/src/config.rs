//! Experiment configuration: one JSON document with `tree`, `data`, `train`,
//! `loss`, and `output_dir` sections. Unknown keys are rejected; every
//! default is filled in before the resolved config is echoed into the run's
//! output directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use hne_core::losses::LossConfig;
use hne_core::tree::TreeSpec;

use crate::data::{self, AugmentPolicy, Dataset, Split};
use crate::train::TrainConfig;
use crate::{Error, Result};

fn d_classes() -> usize {
    10
}
fn d_dims() -> usize {
    20
}
fn d_train_pc() -> usize {
    500
}
fn d_test_pc() -> usize {
    200
}
fn d_separation() -> f64 {
    4.0
}
fn d_data_seed() -> u64 {
    7
}

/// Gaussian-mixture toy dataset parameters. The test split draws from the
/// same distribution with a derived seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    #[serde(default = "d_classes")]
    pub classes: usize,
    #[serde(default = "d_dims")]
    pub dims: usize,
    #[serde(default = "d_train_pc")]
    pub train_per_class: usize,
    #[serde(default = "d_test_pc")]
    pub test_per_class: usize,
    #[serde(default = "d_separation")]
    pub separation: f64,
    #[serde(default = "d_data_seed")]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Synth(SynthConfig),
    Cifar10 {
        dir: PathBuf,
        #[serde(default)]
        augment: Option<AugmentPolicy>,
    },
    Cifar100 {
        dir: PathBuf,
        #[serde(default)]
        augment: Option<AugmentPolicy>,
    },
}

impl DataConfig {
    /// Load (train, test) splits plus the augmentation policy, if any.
    pub fn load(&self) -> Result<(Dataset, Dataset, Option<AugmentPolicy>)> {
        match self {
            DataConfig::Synth(s) => {
                let mut train = data::synth_gaussians(
                    s.classes,
                    s.dims,
                    s.train_per_class,
                    s.separation,
                    s.seed,
                );
                train.split = Split::Train;
                let mut test = data::synth_gaussians(
                    s.classes,
                    s.dims,
                    s.test_per_class,
                    s.separation,
                    s.seed.wrapping_add(0x9E37_79B9),
                );
                test.split = Split::Test;
                Ok((train, test, None))
            }
            DataConfig::Cifar10 { dir, augment } => {
                let (train, test) = data::load_cifar10_dir(dir)?;
                Ok((train, test, *augment))
            }
            DataConfig::Cifar100 { dir, augment } => {
                let (train, test) = data::load_cifar100_dir(dir)?;
                Ok((train, test, *augment))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub tree: TreeSpec,
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub loss: LossConfig,
    /// Run outputs land here; relative paths resolve under `HNE_OUT_ROOT`
    /// when that variable is set.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| {
            Error::Config(format!("{}: {e}", path.display()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.tree.validate().map_err(Error::Core)?;
        self.train.validate()?;
        self.loss.validate().map_err(Error::Core)?;
        Ok(())
    }

    /// Fully resolved JSON (all defaults materialized).
    pub fn resolved_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization cannot fail")
    }
}

/// Resolve a run's output directory: explicit flag, then the config's
/// `output_dir`, then `run`; relative paths nest under `HNE_OUT_ROOT` if
/// set.
pub fn resolve_output_dir(flag: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    let base = flag
        .map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("run"));
    if base.is_relative() {
        if let Ok(root) = std::env::var("HNE_OUT_ROOT") {
            return PathBuf::from(root).join(base);
        }
    }
    base
}
