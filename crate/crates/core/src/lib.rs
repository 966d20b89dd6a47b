//! Brain MRI diagnostics pipeline: volume I/O, preprocessing, a from-scratch
//! 3D tensor engine, a 7-level U-Net for tumor sub-region segmentation, a
//! per-modality residual classifier with a logistic-regression ensemble for
//! MGMT promoter methylation, and the training/evaluation loops around them.

pub mod tensor;
pub mod modality;
pub mod models;
pub mod volio;
pub mod preproc;
pub mod augment;
pub mod lossmetric;
pub mod render;
pub mod trainer;
