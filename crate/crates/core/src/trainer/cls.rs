//! Methylation training: one classifier per (fold, modality), then the
//! stacking ensemble on out-of-fold probabilities.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Task, TrainConfig};
use super::folds::stratified_folds;
use super::{derive_seed, CaseRecord, Result, TrainError};
use crate::augment::{apply as augment, AugmentPolicy};
use crate::lossmetric::{auroc, bce_loss, MetricError};
use crate::modality::Modality;
use crate::models::ensemble::{feature_index, sigmoid, Features, FOLDS, N_FEATURES};
use crate::models::inference::{prepare_classifier_input, MethylationModel};
use crate::models::{EnsembleModel, ModelError, ResClassifier3D};
use crate::preproc::MultiChannelVolume;
use crate::tensor::{lr_at, OptimKind, OptimState, Tensor};
use crate::volio::Volume3D;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClsEpoch {
    pub fold: usize,
    pub modality: Modality,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldModalityAuroc {
    pub fold: usize,
    pub modality: Modality,
    /// `None` when the fold's held-out cases are all one class.
    pub auroc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClsMetrics {
    /// One entry per (fold, modality).
    pub per_fold_modality: Vec<FoldModalityAuroc>,
    /// Out-of-fold probabilities of each modality over all cases.
    pub per_modality: Vec<(Modality, f64)>,
    /// Ensemble AUROC where each fold is scored by an ensemble fitted
    /// without it.
    pub overall: f64,
}

#[derive(Clone, Debug)]
pub struct ClsOutcome {
    pub model: MethylationModel,
    pub case_ids: Vec<String>,
    pub folds: Vec<usize>,
    /// Out-of-fold probability per case, in modality order.
    pub oof: Vec<[f64; 4]>,
    pub heldout_scores: Vec<f64>,
    pub metrics: ClsMetrics,
    pub history: Vec<ClsEpoch>,
    /// Case ids used to train each (fold, modality) classifier.
    pub trained_on: BTreeMap<(usize, Modality), BTreeSet<String>>,
}

fn augment_input(x: &Tensor<f32>, policy: &AugmentPolicy) -> Result<Tensor<f32>> {
    if *policy == (AugmentPolicy { seed: policy.seed, ..AugmentPolicy::identity() }) {
        return Ok(x.clone());
    }
    let [_, _, d, h, w] = x.dims5()?;
    let v = Volume3D::new([w, h, d], [1.0; 3], x.data().to_vec())?;
    let mc = MultiChannelVolume::from_channels(vec![Modality::T1], &[v]);
    let (out, _) = augment(policy, &mc, None, Some([w, h, d]));
    let out = if out.dims == [w, h, d] { out } else { resize_to(&out, [w, h, d]) };
    Ok(Tensor::from_vec(&[1, 1, d, h, w], out.data)?)
}

fn resize_to(mc: &MultiChannelVolume, dims: [usize; 3]) -> MultiChannelVolume {
    let v = crate::augment::resample(&mc.channel(0), dims, crate::augment::Interp::Trilinear);
    MultiChannelVolume::from_channels(mc.channels.clone(), &[v])
}

fn train_one(
    inputs: &[Tensor<f32>],
    labels: &[u8],
    train_idx: &[usize],
    cfg: &TrainConfig,
    fold: usize,
    m: Modality,
    history: &mut Vec<ClsEpoch>,
) -> Result<ResClassifier3D> {
    let path = [fold as u64, m.index() as u64];
    let mut model = ResClassifier3D::new(cfg.classifier.clone(), derive_seed(cfg.seed, &[10, path[0], path[1]]))?;
    let mut opt: OptimState<f32> = OptimState::new(OptimKind::adam(), lr_at(&cfg.lr_schedule, 0));
    for epoch in 0..cfg.epochs {
        let lr = lr_at(&cfg.lr_schedule, epoch);
        opt.lr = lr;
        let mut order = train_idx.to_vec();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[11, path[0], path[1], epoch as u64])));
        let mut losses = BTreeMap::new();
        for batch in order.chunks(cfg.batch_size) {
            model.zero_grad();
            for &i in batch {
                let policy = cfg.augment.with_seed(derive_seed(cfg.seed, &[12, path[0], path[1], epoch as u64, i as u64]));
                let x = augment_input(&inputs[i], &policy)?;
                let z = model.forward(&x)?.data()[0] as f64;
                let (loss, g) = bce_loss(z, labels[i] as f64);
                model.backward(&Tensor::from_vec(&[1, 1], vec![(g / batch.len() as f64) as f32])?)?;
                losses.insert(i, loss);
            }
            opt.step(&mut model.params_mut())?;
        }
        let train_loss = losses.values().sum::<f64>() / losses.len() as f64;
        history.push(ClsEpoch { fold, modality: m, epoch, lr, train_loss });
    }
    Ok(model)
}

fn replicate(p: &[f64; 4]) -> Features {
    let mut f = [0.0; N_FEATURES];
    for fold in 0..FOLDS {
        for m in Modality::ALL {
            f[feature_index(fold, m)] = p[m.index()];
        }
    }
    f
}

fn single_class(e: ModelError) -> TrainError {
    match e {
        ModelError::SingleClass => TrainError::Metric(MetricError::SingleClass),
        e => e.into(),
    }
}

pub fn train_classifier(cases: &[CaseRecord], cfg: &TrainConfig) -> Result<ClsOutcome> {
    cfg.validate()?;
    if cfg.task != Task::Classification {
        return Err(TrainError::Config("config task is not classification".into()));
    }
    if cfg.folds != FOLDS {
        return Err(TrainError::Config(format!("the ensemble expects {FOLDS} folds, config has {}", cfg.folds)));
    }
    if cfg.classifier.in_channels != 1 {
        return Err(TrainError::Config("per-modality classifiers take one channel".into()));
    }
    let mut seen = BTreeSet::new();
    let mut labels = Vec::with_capacity(cases.len());
    for c in cases {
        if !seen.insert(&c.case_id) {
            return Err(TrainError::Config(format!("duplicate case id {}", c.case_id)));
        }
        labels.push(c.mgmt.ok_or_else(|| TrainError::MissingMgmt(c.case_id.clone()))?);
        for m in Modality::ALL {
            if !c.volumes.contains_key(&m) {
                return Err(TrainError::MissingModality(c.case_id.clone(), m));
            }
        }
    }
    let folds = stratified_folds(&labels, FOLDS, derive_seed(cfg.seed, &[20]))?;
    let case_ids: Vec<String> = cases.iter().map(|c| c.case_id.clone()).collect();

    let mut classifiers = BTreeMap::new();
    let mut trained_on = BTreeMap::new();
    let mut history = Vec::new();
    let mut oof = vec![[0.0; 4]; cases.len()];
    let mut per_fold_modality = Vec::new();
    for m in Modality::ALL {
        let inputs: Vec<Tensor<f32>> =
            cases.iter().map(|c| prepare_classifier_input(&c.volumes[&m], &cfg.classifier)).collect::<std::result::Result<_, _>>()?;
        for f in 0..FOLDS {
            let train_idx: Vec<usize> = (0..cases.len()).filter(|&i| folds[i] != f).collect();
            let held: Vec<usize> = (0..cases.len()).filter(|&i| folds[i] == f).collect();
            let pos = train_idx.iter().filter(|&&i| labels[i] == 1).count();
            if pos == 0 || pos == train_idx.len() {
                return Err(TrainError::Metric(MetricError::SingleClass));
            }
            let model = train_one(&inputs, &labels, &train_idx, cfg, f, m, &mut history)?;
            for &i in &held {
                oof[i][m.index()] = sigmoid(model.logit(&inputs[i])?);
            }
            let s: Vec<f64> = held.iter().map(|&i| oof[i][m.index()]).collect();
            let y: Vec<u8> = held.iter().map(|&i| labels[i]).collect();
            per_fold_modality.push(FoldModalityAuroc { fold: f, modality: m, auroc: auroc(&s, &y).ok() });
            trained_on.insert((f, m), train_idx.iter().map(|&i| case_ids[i].clone()).collect::<BTreeSet<_>>());
            classifiers.insert((f, m), model);
        }
    }
    per_fold_modality.sort_by_key(|e| (e.fold, e.modality.index()));

    let features: Vec<Features> = oof.iter().map(replicate).collect();
    let mut heldout_scores = vec![0.0; cases.len()];
    for f in 0..FOLDS {
        let fit_idx: Vec<usize> = (0..cases.len()).filter(|&i| folds[i] != f).collect();
        let x: Vec<Features> = fit_idx.iter().map(|&i| features[i]).collect();
        let y: Vec<u8> = fit_idx.iter().map(|&i| labels[i]).collect();
        let e = EnsembleModel::fit(&x, &y).map_err(single_class)?;
        for i in (0..cases.len()).filter(|&i| folds[i] == f) {
            heldout_scores[i] = e.predict(&features[i]);
        }
    }
    let ensemble = EnsembleModel::fit(&features, &labels).map_err(single_class)?;
    let per_modality = Modality::ALL
        .iter()
        .map(|&m| {
            let s: Vec<f64> = oof.iter().map(|p| p[m.index()]).collect();
            Ok((m, auroc(&s, &labels)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let metrics = ClsMetrics { per_fold_modality, per_modality, overall: auroc(&heldout_scores, &labels)? };
    Ok(ClsOutcome {
        model: MethylationModel { classifiers, ensemble },
        case_ids,
        folds,
        oof,
        heldout_scores,
        metrics,
        history,
        trained_on,
    })
}
