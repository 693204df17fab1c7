//! Run configuration: a single TOML document. Unknown keys are rejected and
//! referenced paths must exist when the file is validated.

use hmq_core::data::{self, Augment, Dataset, Split};
use hmq_core::rng::RunRng;
use hmq_core::train::TrainConfig;
use serde::Deserialize;
use std::path::{Path, PathBuf};

use crate::CliError;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub out_dir: PathBuf,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub arch: String,
    #[serde(default = "default_weight_bits")]
    pub weight_bits: Vec<u8>,
}

fn default_weight_bits() -> Vec<u8> {
    vec![2, 3, 4, 5, 6, 7, 8]
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// "synthetic", "mnist-idx" or "cifar10-bin".
    pub kind: String,
    pub train_samples: Option<usize>,
    pub test_samples: Option<usize>,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub train_batches: Option<Vec<PathBuf>>,
    pub test_batches: Option<Vec<PathBuf>>,
    pub normalize_mean: Option<Vec<f32>>,
    pub normalize_std: Option<Vec<f32>>,
    #[serde(default)]
    pub augment_pad_crop: usize,
    #[serde(default)]
    pub augment_hflip: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_pre_epochs")]
    pub pretrain_epochs: usize,
    #[serde(default = "d_pre_lr")]
    pub pretrain_lr: f32,
    #[serde(default = "d_p1")]
    pub epochs_phase1: usize,
    #[serde(default = "d_cycles")]
    pub cycles: usize,
    #[serde(default = "d_p2")]
    pub epochs_phase2: usize,
    #[serde(default = "d_lr_w")]
    pub lr_weights: f32,
    /// lr for block logits = lr_weights * this, unless lr_hmq is set.
    #[serde(default = "d_lr_mult")]
    pub lr_hmq_multiplier: f32,
    pub lr_hmq: Option<f32>,
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    pub target_wcr: f64,
    pub target_acr: Option<f64>,
    pub activation_budget_bits: Option<u64>,
    #[serde(default = "d_temp")]
    pub temp_updates_per_epoch: usize,
}

fn d_batch() -> usize {
    256
}
fn d_pre_epochs() -> usize {
    3
}
fn d_pre_lr() -> f32 {
    2e-3
}
fn d_p1() -> usize {
    30
}
fn d_cycles() -> usize {
    6
}
fn d_p2() -> usize {
    20
}
fn d_lr_w() -> f32 {
    1e-5
}
fn d_lr_mult() -> f32 {
    1e3
}
fn d_lambda() -> f64 {
    32.0
}
fn d_temp() -> usize {
    25
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        match self.data.kind.as_str() {
            "synthetic" => {
                if self.data.train_samples.is_none() || self.data.test_samples.is_none() {
                    return Err(CliError::Config(
                        "synthetic data needs train_samples and test_samples".into(),
                    ));
                }
            }
            "mnist-idx" => {
                for (key, path) in [
                    ("train_images", &self.data.train_images),
                    ("train_labels", &self.data.train_labels),
                    ("test_images", &self.data.test_images),
                    ("test_labels", &self.data.test_labels),
                ] {
                    let p = path
                        .as_ref()
                        .ok_or_else(|| CliError::Config(format!("mnist-idx data needs {key}")))?;
                    if !p.exists() {
                        return Err(CliError::Config(format!("{key} path {} does not exist", p.display())));
                    }
                }
            }
            "cifar10-bin" => {
                for (key, paths) in [
                    ("train_batches", &self.data.train_batches),
                    ("test_batches", &self.data.test_batches),
                ] {
                    let list = paths
                        .as_ref()
                        .ok_or_else(|| CliError::Config(format!("cifar10-bin data needs {key}")))?;
                    if list.is_empty() {
                        return Err(CliError::Config(format!("{key} must not be empty")));
                    }
                    for p in list {
                        if !p.exists() {
                            return Err(CliError::Config(format!(
                                "{key} path {} does not exist",
                                p.display()
                            )));
                        }
                    }
                }
            }
            other => {
                return Err(CliError::Config(format!(
                    "unknown data kind `{other}` (expected synthetic, mnist-idx or cifar10-bin)"
                )))
            }
        }
        if self.train.target_acr.is_some() && self.train.activation_budget_bits.is_some() {
            return Err(CliError::Config(
                "set either target_acr or activation_budget_bits, not both".into(),
            ));
        }
        if self.train.target_acr.is_none() && self.train.activation_budget_bits.is_none() {
            return Err(CliError::Config(
                "one of target_acr or activation_budget_bits is required".into(),
            ));
        }
        Ok(())
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let lr_hmq = self
            .train
            .lr_hmq
            .unwrap_or(self.train.lr_weights * self.train.lr_hmq_multiplier);
        TrainConfig {
            pretrain_epochs: self.train.pretrain_epochs,
            pretrain_lr: self.train.pretrain_lr,
            epochs_phase1: self.train.epochs_phase1,
            cycles: self.train.cycles,
            epochs_phase2: self.train.epochs_phase2,
            lr_weights: self.train.lr_weights,
            lr_hmq,
            lambda: self.train.lambda,
            target_wcr: self.train.target_wcr,
            target_acr: self.train.target_acr,
            activation_budget_bits: self.train.activation_budget_bits,
            weight_bits: self.model.weight_bits.clone(),
            batch_size: self.train.batch_size,
            temp_updates_per_epoch: self.train.temp_updates_per_epoch,
            seed,
        }
    }

    pub fn input_dims(&self) -> (usize, usize, usize) {
        match self.data.kind.as_str() {
            "cifar10-bin" => (3, 32, 32),
            _ => (1, 28, 28),
        }
    }

    /// Load (or generate) the train and test splits, in that order.
    pub fn load_datasets(&self, rng: &mut RunRng) -> Result<(Dataset, Dataset), CliError> {
        let map_data = |e: hmq_core::Error| CliError::from(e);
        let (mut train, mut test) = match self.data.kind.as_str() {
            "synthetic" => {
                let train =
                    data::synthetic_digits(self.data.train_samples.unwrap(), Split::Train, rng).map_err(map_data)?;
                let test =
                    data::synthetic_digits(self.data.test_samples.unwrap(), Split::Test, rng).map_err(map_data)?;
                (train, test)
            }
            "mnist-idx" => {
                let train = data::load_idx(
                    self.data.train_images.as_ref().unwrap(),
                    self.data.train_labels.as_ref().unwrap(),
                    Split::Train,
                )
                .map_err(map_data)?;
                let test = data::load_idx(
                    self.data.test_images.as_ref().unwrap(),
                    self.data.test_labels.as_ref().unwrap(),
                    Split::Test,
                )
                .map_err(map_data)?;
                (train, test)
            }
            "cifar10-bin" => {
                let train_paths: Vec<&Path> =
                    self.data.train_batches.as_ref().unwrap().iter().map(|p| p.as_path()).collect();
                let test_paths: Vec<&Path> =
                    self.data.test_batches.as_ref().unwrap().iter().map(|p| p.as_path()).collect();
                let train = data::load_cifar_binary(&train_paths, Split::Train).map_err(map_data)?;
                let test = data::load_cifar_binary(&test_paths, Split::Test).map_err(map_data)?;
                (train, test)
            }
            _ => unreachable!("validated"),
        };
        if let (Some(mean), Some(std)) = (&self.data.normalize_mean, &self.data.normalize_std) {
            train = train
                .with_normalization(mean.clone(), std.clone())
                .map_err(map_data)?;
            test = test.with_normalization(mean.clone(), std.clone()).map_err(map_data)?;
        }
        let augment = Augment {
            pad_crop: self.data.augment_pad_crop,
            hflip: self.data.augment_hflip,
        };
        train = train.with_augment(augment);
        Ok((train, test))
    }
}
