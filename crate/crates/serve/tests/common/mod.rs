//! Small trained models and multipart helpers shared by the service tests.

#![allow(dead_code)]

use std::path::Path;
use std::sync::OnceLock;

use gliopipe::models::inference::{MethylationModel, SegmentationModel};
use gliopipe::models::{ResClassifierConfig, UNet7Config};
use gliopipe::preproc::{CropMode, CropSpec};
use gliopipe::tensor::LrSchedule;
use gliopipe::trainer::cls::train_classifier;
use gliopipe::trainer::config::TrainConfig;
use gliopipe::trainer::phantom::{phantom_cohort, PhantomSpec};
use gliopipe::trainer::seg::train_segmentation;
use gliopipe::trainer::CaseRecord;
use gliopipe::volio::write_nifti;
use gliopipe_serve::bundle::ModelBundle;

pub struct Models {
    pub segmentation: SegmentationModel,
    pub methylation: MethylationModel,
}

pub fn models() -> &'static Models {
    static M: OnceLock<Models> = OnceLock::new();
    M.get_or_init(|| {
        let seg_cfg = TrainConfig {
            epochs: 12,
            unet: UNet7Config { base_filters: 4, depth: 2, ..Default::default() },
            crop: CropSpec { size: [16; 3], mode: CropMode::Foreground(0.0) },
            lr_schedule: LrSchedule::constant(3e-3),
            split: [1.0, 0.0],
            ..TrainConfig::segmentation()
        };
        let segmentation = train_segmentation(&phantom_cohort(4, &PhantomSpec::cube(24), 1), &seg_cfg).unwrap().model;
        let cls_cfg = TrainConfig {
            epochs: 2,
            lr_schedule: LrSchedule::constant(1e-3),
            classifier: ResClassifierConfig { base_filters: 2, input_size: [8, 16, 16], ..Default::default() },
            ..TrainConfig::classification()
        };
        let methylation = train_classifier(&phantom_cohort(8, &PhantomSpec::cube(24), 2), &cls_cfg).unwrap().model;
        Models { segmentation, methylation }
    })
}

pub fn bundle() -> ModelBundle {
    let m = models();
    ModelBundle { segmentation: Some(m.segmentation.clone()), methylation: Some(m.methylation.clone()) }
}

pub fn save_bundle(dir: &Path) {
    let m = models();
    ModelBundle::save_segmentation(dir, &m.segmentation.to_checkpoint()).unwrap();
    ModelBundle::save_methylation(dir, &m.methylation).unwrap();
}

pub const BOUNDARY: &str = "gliopipe-test-boundary";

/// multipart/form-data body from (field name, bytes) pairs.
pub fn multipart(fields: &[(&str, Vec<u8>)]) -> Vec<u8> {
    let mut body = Vec::new();
    for (i, (name, bytes)) in fields.iter().enumerate() {
        body.extend_from_slice(format!("--{BOUNDARY}\r\n").as_bytes());
        body.extend_from_slice(
            format!("Content-Disposition: form-data; name=\"{name}\"; filename=\"f{i}.nii\"\r\nContent-Type: application/octet-stream\r\n\r\n")
                .as_bytes(),
        );
        body.extend_from_slice(bytes);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    body
}

pub fn study_fields(case: &CaseRecord) -> Vec<(&'static str, Vec<u8>)> {
    case.volumes.iter().map(|(m, v)| (m.name(), write_nifti(v))).collect()
}
