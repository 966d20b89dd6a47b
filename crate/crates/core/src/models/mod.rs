//! Segmentation and classification networks and the stacking ensemble.

pub mod classifier;
pub mod ensemble;
pub mod inference;
pub mod unet;

pub use classifier::{ResClassifier3D, ResClassifierConfig};
pub use ensemble::EnsembleModel;
pub use inference::{predict_methylation, MethylationModel, MethylationPrediction, ModalityProbability};
pub use unet::{UNet7, UNet7Config};

use crate::preproc::PreprocError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("all labels belong to one class")]
    SingleClass,
    #[error("no modality available for prediction")]
    NoModalities,
    #[error("bad ensemble record: {0}")]
    BadRecord(String),
    #[error(transparent)]
    Preproc(#[from] PreprocError),
}

pub type Result<T> = std::result::Result<T, ModelError>;
