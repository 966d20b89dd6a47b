//! Segmentation training: crop, augment, combo loss, Adam.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Task, TrainConfig};
use super::evaluate::RegionDice;
use super::folds::split_train_val;
use super::{derive_seed, CaseRecord, Result, TrainError};
use crate::augment::apply as augment;
use crate::lossmetric::labels::{one_hot, raw_labels, to_dense};
use crate::lossmetric::{combo_loss_logits, soft_dice};
use crate::models::inference::{labels_from_probs, prepare_segmentation_input, sliding_window_probs, SegmentationModel};
use crate::models::UNet7;
use crate::preproc::{crop_at, foreground_origin, CropMode, MultiChannelVolume};
use crate::tensor::{lr_at, Checkpoint, OptimKind, OptimSnapshot, OptimState};
use crate::volio::Volume3D;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Mean soft Dice over classes and training samples, from the training forward pass.
    pub train_soft_dice: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_dice: Option<RegionDice>,
}

/// State carried across a resume.
#[derive(Clone, Debug)]
pub struct SegResume {
    /// Last-epoch checkpoint with optimizer state.
    pub last: Checkpoint,
    pub best: Checkpoint,
}

#[derive(Clone, Debug)]
pub struct SegOutcome {
    pub model: SegmentationModel,
    pub best: Checkpoint,
    pub last: Checkpoint,
    /// Epochs run by this call (a resumed run reports only its own).
    pub history: Vec<SegEpoch>,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    /// Case ids that actually reached the optimizer.
    pub trained_on: BTreeSet<String>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

struct Prepared {
    id: String,
    input: MultiChannelVolume,
    labels: Volume3D,
    fg_origin: [usize; 3],
}

const META_EPOCHS_DONE: &str = "epochs_done";
const META_BEST_SCORE: &str = "best_score";
const META_BEST_EPOCH: &str = "best_epoch";
const META_STALE: &str = "stale_validations";

fn meta_parse<T: std::str::FromStr>(ck: &Checkpoint, key: &str) -> Result<Option<T>> {
    match ck.meta.get(key) {
        None => Ok(None),
        Some(v) => v.parse().map(Some).map_err(|_| TrainError::Config(format!("checkpoint meta {key} = {v:?}"))),
    }
}

/// Center-crops or zero-pads every axis to `size`.
fn fit_to(v: &Volume3D, size: [usize; 3]) -> Volume3D {
    if v.dims == size {
        return v.clone();
    }
    let mut out = Volume3D { dims: size, data: vec![0.0; size.iter().product()], ..v.clone() };
    let off: [isize; 3] = std::array::from_fn(|a| (v.dims[a] as isize - size[a] as isize) / 2);
    for z in 0..size[2] {
        let sz = z as isize + off[2];
        if sz < 0 || sz >= v.dims[2] as isize {
            continue;
        }
        for y in 0..size[1] {
            let sy = y as isize + off[1];
            if sy < 0 || sy >= v.dims[1] as isize {
                continue;
            }
            for x in 0..size[0] {
                let sx = x as isize + off[0];
                if sx >= 0 && sx < v.dims[0] as isize {
                    out.data[x + size[0] * (y + size[1] * z)] = v.data[v.index(sx as usize, sy as usize, sz as usize)];
                }
            }
        }
    }
    out
}

fn fit_multi(mc: &MultiChannelVolume, size: [usize; 3]) -> MultiChannelVolume {
    let vols: Vec<Volume3D> = (0..mc.num_channels()).map(|c| fit_to(&mc.channel(c), size)).collect();
    MultiChannelVolume::from_channels(mc.channels.clone(), &vols)
}

fn sample_origin(p: &Prepared, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> [usize; 3] {
    let dims = p.input.dims;
    let size = cfg.crop.size;
    let max: [usize; 3] = std::array::from_fn(|a| dims[a] - size[a]);
    let fg_draw = rng.random::<f64>() < cfg.foreground_prob;
    let random: [usize; 3] = std::array::from_fn(|a| rng.random_range(0..=max[a]));
    let j = cfg.crop_jitter as i64;
    let jitter: [isize; 3] = std::array::from_fn(|_| if j > 0 { rng.random_range(-j..=j) as isize } else { 0 });
    match cfg.crop.mode {
        CropMode::Static(o) => o,
        CropMode::Random(_) => random,
        CropMode::Foreground(_) if fg_draw => {
            std::array::from_fn(|a| (p.fg_origin[a] as isize + jitter[a]).clamp(0, max[a] as isize) as usize)
        }
        CropMode::Foreground(_) => random,
    }
}

fn validate_cases(cases: &[CaseRecord], cfg: &TrainConfig) -> Result<()> {
    let mut ids = BTreeSet::new();
    for c in cases {
        if !ids.insert(&c.case_id) {
            return Err(TrainError::Config(format!("duplicate case id {}", c.case_id)));
        }
        let labels = c.labels.as_ref().ok_or_else(|| TrainError::MissingLabels(c.case_id.clone()))?;
        for &m in &cfg.channel_order {
            let v = c.volumes.get(&m).ok_or_else(|| TrainError::MissingModality(c.case_id.clone(), m))?;
            if v.dims != labels.dims {
                return Err(TrainError::Config(format!("case {}: {m} dims {:?} differ from labels {:?}", c.case_id, v.dims, labels.dims)));
            }
        }
        cfg.crop.validate(labels.dims)?;
    }
    Ok(())
}

pub fn validation_dice(model: &SegmentationModel, input: &MultiChannelVolume, labels: &Volume3D, cfg: &TrainConfig) -> Result<RegionDice> {
    let probs = sliding_window_probs(&model.unet, input, model.window)?;
    let pred = labels_from_probs(&probs, model.unet.config().num_classes, labels);
    Ok(RegionDice::compute(&raw_labels(&pred)?, &raw_labels(labels)?, cfg.region_source))
}

pub fn train_segmentation(cases: &[CaseRecord], cfg: &TrainConfig) -> Result<SegOutcome> {
    train_segmentation_with(cases, cfg, None, &mut |_| {})
}

/// Full loop. With `resume`, continues from its `last` checkpoint up to
/// `cfg.epochs`; `on_epoch` sees each record as it is produced.
pub fn train_segmentation_with(
    cases: &[CaseRecord],
    cfg: &TrainConfig,
    resume: Option<&SegResume>,
    on_epoch: &mut dyn FnMut(&SegEpoch),
) -> Result<SegOutcome> {
    cfg.validate()?;
    if cfg.task != Task::Segmentation {
        return Err(TrainError::Config("config task is not segmentation".into()));
    }
    validate_cases(cases, cfg)?;

    let (train_idx, val_idx) = if cfg.split[1] > 0.0 {
        split_train_val(cases.len(), cfg.split[1], derive_seed(cfg.seed, &[0]))?
    } else {
        ((0..cases.len()).collect(), Vec::new())
    };
    if train_idx.is_empty() {
        return Err(TrainError::TooFewCases { need: 1, have: 0 });
    }
    let train_ids: Vec<String> = train_idx.iter().map(|&i| cases[i].case_id.clone()).collect();
    let val_ids: Vec<String> = val_idx.iter().map(|&i| cases[i].case_id.clone()).collect();
    assert!(train_ids.iter().all(|t| !val_ids.contains(t)), "train and validation share a case");

    let prepare = |c: &CaseRecord| -> Result<Prepared> {
        let input = prepare_segmentation_input(&c.volumes, &cfg.channel_order, cfg.normalization)?;
        let labels = c.labels.clone().expect("checked above");
        let mask: Vec<bool> = labels.data.iter().map(|&v| v != 0.0).collect();
        let min_frac = if let CropMode::Foreground(f) = cfg.crop.mode { f } else { 0.0 };
        let fg_origin = foreground_origin(labels.dims, &mask, cfg.crop.size, min_frac);
        Ok(Prepared { id: c.case_id.clone(), input, labels, fg_origin })
    };
    let train: Vec<Prepared> = train_idx.iter().map(|&i| prepare(&cases[i])).collect::<Result<_>>()?;
    let val: Vec<Prepared> = val_idx.iter().map(|&i| prepare(&cases[i])).collect::<Result<_>>()?;

    let mut model = SegmentationModel {
        unet: UNet7::new(cfg.unet.clone(), derive_seed(cfg.seed, &[3]))?,
        channel_order: cfg.channel_order.clone(),
        normalization: cfg.normalization,
        window: cfg.crop.size,
    };
    let mut opt: OptimState<f32> = OptimState::new(OptimKind::adam(), lr_at(&cfg.lr_schedule, 0));
    let mut start = 0;
    let mut best_score = f64::NEG_INFINITY;
    let mut best_epoch = None;
    let mut stale = 0usize;
    let mut best = None;
    if let Some(r) = resume {
        model = SegmentationModel::from_checkpoint(&r.last)?;
        if model.unet.config() != &cfg.unet {
            return Err(TrainError::Config("resume checkpoint architecture differs from the config".into()));
        }
        opt = r.last.optimizer.as_ref().ok_or_else(|| TrainError::Config("resume checkpoint has no optimizer state".into()))?.restore();
        start = meta_parse(&r.last, META_EPOCHS_DONE)?.unwrap_or(0);
        best_score = meta_parse(&r.best, META_BEST_SCORE)?.unwrap_or(f64::NEG_INFINITY);
        best_epoch = meta_parse(&r.best, META_BEST_EPOCH)?;
        stale = meta_parse(&r.last, META_STALE)?.unwrap_or(0);
        best = Some(r.best.clone());
    }

    let mut history = Vec::new();
    let mut trained_on = BTreeSet::new();
    let mut stopped_early = false;
    let n_classes = cfg.unet.num_classes;
    let mut epoch = start;
    while epoch < cfg.epochs {
        let lr = lr_at(&cfg.lr_schedule, epoch);
        opt.lr = lr;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[1, epoch as u64])));
        // Indexed by case so the epoch sums do not depend on the shuffle.
        let mut losses = vec![0.0; train.len()];
        let mut dices = vec![0.0; train.len()];
        for batch in order.chunks(cfg.batch_size) {
            model.unet.zero_grad();
            for &k in batch {
                let p = &train[k];
                let s = derive_seed(cfg.seed, &[2, epoch as u64, k as u64]);
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let origin = sample_origin(p, cfg, &mut rng);
                let img = p.input.crop_at(origin, cfg.crop.size);
                let lab = crop_at(&p.labels, origin, cfg.crop.size);
                let policy = cfg.augment.with_seed(rng.random());
                let (img, lab) = augment(&policy, &img, Some(&lab), Some(cfg.crop.size));
                let img = fit_multi(&img, cfg.crop.size);
                let lab = fit_to(&lab.expect("labels passed"), cfg.crop.size);

                let target = one_hot::<f32>(&to_dense(&lab)?, lab.dims, n_classes);
                let logits = model.unet.forward(&img.to_tensor())?;
                let (mut lv, probs) = combo_loss_logits(&logits, &target, &cfg.loss)?;
                lv.grad.scale(1.0 / batch.len() as f32);
                model.unet.backward(&lv.grad)?;
                losses[k] = lv.loss;
                dices[k] = soft_dice(&probs, &target, cfg.loss.dice_smooth)?;
                trained_on.insert(p.id.clone());
            }
            opt.step(&mut model.unet.params_mut())?;
        }
        let n = train.len() as f64;
        let mut rec = SegEpoch {
            epoch,
            lr,
            train_loss: losses.iter().sum::<f64>() / n,
            train_soft_dice: dices.iter().sum::<f64>() / n,
            val_dice: None,
        };

        let last_epoch = epoch + 1 == cfg.epochs;
        if !val.is_empty() && ((epoch + 1) % cfg.validate_every == 0 || last_epoch) {
            let ds: Vec<RegionDice> = val.iter().map(|p| validation_dice(&model, &p.input, &p.labels, cfg)).collect::<Result<_>>()?;
            let m = |f: fn(&RegionDice) -> f64| ds.iter().map(f).sum::<f64>() / ds.len() as f64;
            let vd = RegionDice { et: m(|d| d.et), tc: m(|d| d.tc), wt: m(|d| d.wt) };
            rec.val_dice = Some(vd);
            if vd.mean() > best_score {
                best_score = vd.mean();
                best_epoch = Some(epoch);
                stale = 0;
                let mut ck = model.to_checkpoint();
                ck.meta.insert(META_BEST_SCORE.into(), format!("{best_score:?}"));
                ck.meta.insert(META_BEST_EPOCH.into(), epoch.to_string());
                best = Some(ck);
            } else {
                stale += 1;
            }
        }
        on_epoch(&rec);
        history.push(rec);
        epoch += 1;
        if let Some(p) = cfg.early_stop_patience {
            if stale >= p && epoch < cfg.epochs {
                stopped_early = true;
                break;
            }
        }
    }

    let mut last = model.to_checkpoint();
    last.optimizer = Some(OptimSnapshot::capture(&opt));
    last.meta.insert(META_EPOCHS_DONE.into(), epoch.to_string());
    last.meta.insert(META_STALE.into(), stale.to_string());
    // Without validation the final weights are the best ones.
    let best = match best {
        Some(b) => b,
        None => {
            let mut ck = model.to_checkpoint();
            ck.meta.insert(META_BEST_EPOCH.into(), epoch.saturating_sub(1).to_string());
            ck
        }
    };
    Ok(SegOutcome { model, best, last, history, train_ids, val_ids, trained_on, best_epoch, stopped_early })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::AugmentPolicy;
    use crate::models::UNet7Config;
    use crate::preproc::CropSpec;
    use crate::tensor::LrSchedule;
    use crate::trainer::phantom::{phantom_cohort, PhantomSpec};

    fn small_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            unet: UNet7Config { base_filters: 2, depth: 2, ..Default::default() },
            crop: CropSpec { size: [16; 3], mode: CropMode::Foreground(0.0) },
            lr_schedule: LrSchedule::constant(1e-3),
            split: [0.75, 0.25],
            validate_every: 2,
            ..TrainConfig::segmentation()
        }
    }

    #[test]
    fn fit_to_pads_and_crops() {
        let v = Volume3D::new([2, 2, 2], [1.0; 3], (1..=8).map(|x| x as f32).collect()).unwrap();
        let p = fit_to(&v, [4, 2, 2]);
        assert_eq!(&p.data[..4], &[0.0, 1.0, 2.0, 0.0]);
        assert_eq!(fit_to(&p, [2, 2, 2]), v);
    }

    #[test]
    fn split_hygiene_and_determinism() {
        let cases = phantom_cohort(4, &PhantomSpec::cube(32), 5);
        let cfg = small_cfg(2);
        let a = train_segmentation(&cases, &cfg).unwrap();
        assert_eq!(a.val_ids.len(), 1);
        assert!(a.val_ids.iter().all(|v| !a.trained_on.contains(v)));
        assert_eq!(a.trained_on.len(), 3);
        assert!(a.history[1].val_dice.is_some());
        let b = train_segmentation(&cases, &cfg).unwrap();
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn zero_lr_is_frozen() {
        let cases = phantom_cohort(2, &PhantomSpec::cube(32), 6);
        let cfg = TrainConfig {
            lr_schedule: LrSchedule::constant(0.0),
            augment: AugmentPolicy::identity(),
            foreground_prob: 1.0,
            crop_jitter: 0,
            split: [1.0, 0.0],
            ..small_cfg(3)
        };
        let out = train_segmentation(&cases, &cfg).unwrap();
        let init: UNet7 = UNet7::new(cfg.unet.clone(), derive_seed(cfg.seed, &[3])).unwrap();
        assert_eq!(out.last.params, init.to_checkpoint().params);
        assert!(out.history.windows(2).all(|w| w[0].train_loss == w[1].train_loss));
    }

    #[test]
    fn resume_matches_straight_run() {
        let cases = phantom_cohort(3, &PhantomSpec::cube(32), 7);
        let straight = train_segmentation(&cases, &small_cfg(4)).unwrap();
        let first = train_segmentation(&cases, &small_cfg(2)).unwrap();
        let resume = SegResume {
            last: Checkpoint::decode(&first.last.encode()).unwrap(),
            best: Checkpoint::decode(&first.best.encode()).unwrap(),
        };
        let second = train_segmentation_with(&cases, &small_cfg(4), Some(&resume), &mut |_| {}).unwrap();
        let joined: Vec<SegEpoch> = first.history.iter().chain(&second.history).cloned().collect();
        assert_eq!(joined, straight.history);
        assert_eq!(second.last.params, straight.last.params);
    }
}
