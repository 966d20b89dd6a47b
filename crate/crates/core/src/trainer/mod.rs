//! Cases, folds, synthetic phantoms, and the two training loops.

pub mod config;
pub mod evaluate;
pub mod folds;
pub mod manifest;
pub mod phantom;
pub mod report;
pub mod seg;
pub mod cls;

use std::collections::BTreeMap;

use crate::lossmetric::MetricError;
use crate::modality::Modality;
use crate::models::ModelError;
use crate::preproc::PreprocError;
use crate::tensor::TensorError;
use crate::volio::{Volume3D, VolioError};

pub use folds::{make_folds, split_train_val, stratified_folds};
pub use phantom::{generate_phantom, phantom_cohort, PhantomSpec};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("need at least {need} cases, have {have}")]
    TooFewCases { need: usize, have: usize },
    #[error("case {0} has no label volume")]
    MissingLabels(String),
    #[error("case {0} has no methylation label")]
    MissingMgmt(String),
    #[error("case {0} lacks modality {1}")]
    MissingModality(String, Modality),
    #[error("configuration: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Preproc(#[from] PreprocError),
    #[error(transparent)]
    Volio(#[from] VolioError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// One patient study.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseRecord {
    pub case_id: String,
    pub volumes: BTreeMap<Modality, Volume3D>,
    /// Raw labels {0, 1, 2, 4}.
    pub labels: Option<Volume3D>,
    pub mgmt: Option<u8>,
    pub fold: Option<usize>,
}

impl CaseRecord {
    pub fn dims(&self) -> Option<[usize; 3]> {
        self.volumes.values().next().map(|v| v.dims)
    }
}

/// Distinct per-purpose seed from a run seed and a path of indices.
pub fn derive_seed(run: u64, path: &[u64]) -> u64 {
    // splitmix64 steps
    let mut z = run ^ 0x9e37_79b9_7f4a_7c15;
    for &p in path {
        z = z.wrapping_add(p.wrapping_mul(0xbf58_476d_1ce4_e5b9)).wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}
