//! Built-in experiment sizes: `tiny` for smoke runs, `desk` for trend checks.

use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetConfig, Sample, Split};
use crate::encoders::{EncoderSpec, PretrainConfig};
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileName {
    Tiny,
    Desk,
}

impl FromStr for ProfileName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(ProfileName::Tiny),
            "desk" => Ok(ProfileName::Desk),
            other => Err(Error::Argument(format!("unknown profile {other:?} (expected tiny or desk)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub name: ProfileName,
    pub dataset: DatasetConfig,
    pub encoder: EncoderSpec,
    pub pretrain: PretrainConfig,
    pub epochs: usize,
    pub batch_identities: usize,
    pub learning_rate: f64,
}

impl Profile {
    pub fn get(name: ProfileName) -> Self {
        match name {
            ProfileName::Tiny => Profile {
                name,
                dataset: DatasetConfig { identities: 20, ..DatasetConfig::default() },
                encoder: EncoderSpec::default(),
                pretrain: PretrainConfig { epochs: 5, ..PretrainConfig::default() },
                epochs: 2,
                batch_identities: 4,
                learning_rate: 3e-3,
            },
            ProfileName::Desk => Profile {
                name,
                dataset: DatasetConfig::default(),
                encoder: EncoderSpec::default(),
                pretrain: PretrainConfig::default(),
                epochs: 30,
                batch_identities: 8,
                learning_rate: 3e-3,
            },
        }
    }

    pub fn tiny() -> Self {
        Self::get(ProfileName::Tiny)
    }

    pub fn desk() -> Self {
        Self::get(ProfileName::Desk)
    }

    pub fn train_config(&self, data_dir: PathBuf, real_encoder: PathBuf, out_dir: PathBuf) -> TrainConfig {
        let mut c = TrainConfig::new(data_dir, real_encoder, out_dir, self.epochs);
        c.batch_identities = self.batch_identities;
        c.learning_rate = self.learning_rate;
        c
    }
}

/// Real training-split samples: the identity-pretraining set.
pub fn pretraining_samples(samples: &[Sample]) -> Vec<&Sample> {
    samples.iter().filter(|s| s.split == Split::Train && s.domain == 0).collect()
}
