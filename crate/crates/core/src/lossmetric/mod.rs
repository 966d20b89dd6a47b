//! Label scheme, training losses and evaluation metrics.

pub mod labels;
pub mod loss;
pub mod metrics;

pub use labels::{Region, RegionSource};
pub use loss::{bce_loss, combo_loss, combo_loss_logits, soft_dice, soft_dice_loss, weighted_focal_loss, LossConfig, LossValue};
pub use metrics::{accuracy, auroc, dice_score};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dims differ: {0:?} vs {1:?}")]
    DimMismatch([usize; 3], [usize; 3]),
    #[error("label value {0} is not one of 0, 1, 2, 4")]
    IllegalLabel(f32),
    #[error("scores need at least one positive and one negative label")]
    SingleClass,
    #[error("invalid loss configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, MetricError>;
