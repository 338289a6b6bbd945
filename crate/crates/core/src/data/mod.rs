//! Synthetic multi-domain forgery benchmark.
//!
//! Domain 0 holds pristine procedural "faces"; domains 1..=5 hold one
//! artifact family each, applied to the central region of an aligned real
//! frame. Identities never cross splits.

mod batch;
mod generate;
mod perturb;
mod store;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

pub use batch::{epoch_batches, sample_identity_batch, IdentityBatch};
pub use generate::{apply_forgery, forgery_region, generate_real, generate_real_with, ImageGeometry, STRIPE_FREQUENCY};
pub use perturb::{perturb, PerturbKind, PERTURB_KINDS, SEVERITY_LEVELS};
pub use store::{build_dataset, check_split_hygiene, read_png, Dataset, DatasetConfig, DatasetManifest, MANIFEST_FILE, MANIFEST_HEADER, META_FILE};

/// Largest forgery method id (method 5 composes two of methods 1..=4).
pub const MAX_METHOD: u8 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Argument(format!("unknown split {other:?}"))),
        }
    }
}

/// One H×W×3 image, channel-last, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(height: usize, width: usize) -> Self {
        Image { height, width, data: vec![0.0; height * width * 3] }
    }

    #[inline]
    pub fn idx(&self, row: usize, col: usize, ch: usize) -> usize {
        (row * self.width + col) * 3 + ch
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.data[self.idx(row, col, ch)]
    }

    pub fn clip(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    /// Round to the nearest 8-bit level so in-memory images equal their stored form.
    pub fn quantize_u8(&mut self) {
        self.data.iter_mut().for_each(|v| *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_u8(height: usize, width: usize, bytes: &[u8]) -> Self {
        Image { height, width, data: bytes.iter().map(|b| f64::from(*b) / 255.0).collect() }
    }

    pub fn l2_distance(&self, other: &Image) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub identity_id: u32,
    /// 0 = real, otherwise the forgery method id.
    pub domain: u8,
    pub group_id: u32,
    /// Frame index within the identity; aligned frames share it across domains.
    pub frame: u32,
    pub split: Split,
}

impl Sample {
    pub fn is_fake(&self) -> bool {
        self.domain != 0
    }
}
