//! Model directory layout shared by the trainers, the CLI and the service.
//!
//! ```text
//! <dir>/segmentation.gpck
//! <dir>/classifier/fold{f}_{modality}.gpck   (16 files)
//! <dir>/ensemble.txt
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gliopipe::modality::Modality;
use gliopipe::models::ensemble::FOLDS;
use gliopipe::models::inference::{MethylationModel, SegmentationModel};
use gliopipe::models::{EnsembleModel, ResClassifier3D};
use gliopipe::tensor::Checkpoint;

pub const SEGMENTATION_FILE: &str = "segmentation.gpck";
pub const CLASSIFIER_DIR: &str = "classifier";
pub const ENSEMBLE_FILE: &str = "ensemble.txt";
pub const MODEL_DIR_ENV: &str = "GLIOPIPE_MODEL_DIR";

pub fn classifier_path(dir: &Path, fold: usize, m: Modality) -> PathBuf {
    dir.join(CLASSIFIER_DIR).join(format!("fold{fold}_{m}.gpck"))
}

#[derive(Clone, Debug, Default)]
pub struct ModelBundle {
    pub segmentation: Option<SegmentationModel>,
    pub methylation: Option<MethylationModel>,
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Checkpoint::decode(&bytes).with_context(|| format!("decoding {}", path.display()))
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    fs::write(path, ck.encode()).with_context(|| format!("writing {}", path.display()))
}

impl ModelBundle {
    /// Loads whatever the directory holds. A model is absent when none of
    /// its files exist; a partial or corrupt model is an error.
    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            bail!("model directory {} does not exist", dir.display());
        }
        let seg_path = dir.join(SEGMENTATION_FILE);
        let segmentation = if seg_path.exists() {
            let ck = read_checkpoint(&seg_path)?;
            Some(SegmentationModel::from_checkpoint(&ck).with_context(|| format!("loading {}", seg_path.display()))?)
        } else {
            None
        };
        let ens_path = dir.join(ENSEMBLE_FILE);
        let methylation = if ens_path.exists() || dir.join(CLASSIFIER_DIR).exists() {
            let text = fs::read_to_string(&ens_path).with_context(|| format!("reading {}", ens_path.display()))?;
            let ensemble = EnsembleModel::from_text(&text).with_context(|| format!("parsing {}", ens_path.display()))?;
            let mut classifiers = BTreeMap::new();
            for f in 0..FOLDS {
                for m in Modality::ALL {
                    let p = classifier_path(dir, f, m);
                    let model = ResClassifier3D::from_checkpoint(&read_checkpoint(&p)?)
                        .with_context(|| format!("loading {}", p.display()))?;
                    classifiers.insert((f, m), model);
                }
            }
            Some(MethylationModel { classifiers, ensemble })
        } else {
            None
        };
        Ok(Self { segmentation, methylation })
    }

    pub fn save_segmentation(dir: &Path, ck: &Checkpoint) -> Result<()> {
        write_checkpoint(&dir.join(SEGMENTATION_FILE), ck)
    }

    pub fn save_methylation(dir: &Path, model: &MethylationModel) -> Result<()> {
        model.validate()?;
        for ((f, m), clf) in &model.classifiers {
            write_checkpoint(&classifier_path(dir, *f, *m), &clf.to_checkpoint())?;
        }
        let p = dir.join(ENSEMBLE_FILE);
        fs::write(&p, model.ensemble.to_text()).with_context(|| format!("writing {}", p.display()))
    }
}

/// `--checkpoint` if given, else `$GLIOPIPE_MODEL_DIR`.
pub fn resolve_model_dir(flag: Option<&Path>) -> Result<PathBuf> {
    match flag {
        Some(p) => Ok(p.to_path_buf()),
        None => match std::env::var_os(MODEL_DIR_ENV) {
            Some(v) => Ok(PathBuf::from(v)),
            None => bail!("no model directory: pass --checkpoint or set {MODEL_DIR_ENV}"),
        },
    }
}
