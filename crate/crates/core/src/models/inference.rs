//! Whole-volume inference shared by the trainer, the CLI and the service.

use std::collections::BTreeMap;

use crate::augment::{resample, Interp};
use crate::lossmetric::labels::raw_of;
use crate::modality::Modality;
use crate::preproc::{normalize_volume, select_slice_window, stack_modalities, MultiChannelVolume, NormVariant, SliceWindow};
use crate::tensor::{ops::softmax_channels, Checkpoint, Tensor};
use crate::volio::{Dtype, Volume3D};

use super::ensemble::{feature_index, sigmoid, Features, FOLDS, N_FEATURES};
use super::{EnsembleModel, ModelError, ResClassifier3D, ResClassifierConfig, Result, UNet7};

/// Value used for a modality with no image.
pub const IMPUTED_PROBABILITY: f64 = 0.5;

/// Per-channel normalization then stacking in the model's channel order.
pub fn prepare_segmentation_input(
    volumes: &BTreeMap<Modality, Volume3D>,
    order: &[Modality],
    variant: NormVariant,
) -> Result<MultiChannelVolume> {
    let mut normed = BTreeMap::new();
    for &m in order {
        let v = volumes.get(&m).ok_or(crate::preproc::PreprocError::MissingModality(m))?;
        normed.insert(m, normalize_volume(v, variant)?.volume);
    }
    Ok(stack_modalities(&normed, order)?)
}

fn window_starts(n: usize, w: usize) -> Vec<usize> {
    if n <= w {
        return vec![0];
    }
    let stride = (w / 2).max(1);
    let mut s: Vec<usize> = (0..=n - w).step_by(stride).collect();
    if *s.last().unwrap() != n - w {
        s.push(n - w);
    }
    s
}

/// Class probabilities `[C, nz, ny, nx]` (flattened) from half-overlapping
/// windows of size `window`, averaged where windows overlap. Axes shorter
/// than the window are zero-padded up to the network's divisor.
pub fn sliding_window_probs(model: &UNet7, input: &MultiChannelVolume, window: [usize; 3]) -> Result<Vec<f32>> {
    let div = model.config().divisor();
    if window.iter().any(|&w| w == 0 || w % div != 0) {
        return Err(ModelError::Config(format!("window {window:?} not divisible by {div}")));
    }
    let dims = input.dims;
    let win: [usize; 3] = std::array::from_fn(|a| window[a].min(dims[a].div_ceil(div) * div));
    let padded: [usize; 3] = std::array::from_fn(|a| dims[a].max(win[a]));
    let c_in = input.num_channels();
    let classes = model.config().num_classes;
    let [px, py, _] = padded;
    let [nx, ny, nz] = dims;

    let mut acc = vec![0f32; classes * padded.iter().product::<usize>()];
    let mut hits = vec![0u16; padded.iter().product()];
    let [wx, wy, wz] = win;
    for &oz in &window_starts(padded[2], wz) {
        for &oy in &window_starts(padded[1], wy) {
            for &ox in &window_starts(padded[0], wx) {
                let mut patch = vec![0f32; c_in * wx * wy * wz];
                for c in 0..c_in {
                    let src = input.channel_data(c);
                    for z in 0..wz {
                        for y in 0..wy {
                            let (gz, gy) = (oz + z, oy + y);
                            if gz >= nz || gy >= ny {
                                continue;
                            }
                            for x in 0..wx {
                                let gx = ox + x;
                                if gx < nx {
                                    patch[((c * wz + z) * wy + y) * wx + x] = src[gx + nx * (gy + ny * gz)];
                                }
                            }
                        }
                    }
                }
                let t = Tensor::from_vec(&[1, c_in, wz, wy, wx], patch)?;
                let probs = softmax_channels(&model.predict(&t)?)?;
                let p = probs.data();
                for z in 0..wz {
                    for y in 0..wy {
                        for x in 0..wx {
                            let g = (ox + x) + px * ((oy + y) + py * (oz + z));
                            hits[g] += 1;
                            for c in 0..classes {
                                acc[c * hits.len() + g] += p[((c * wz + z) * wy + y) * wx + x];
                            }
                        }
                    }
                }
            }
        }
    }

    let nvox = nx * ny * nz;
    let mut out = vec![0f32; classes * nvox];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let g = x + px * (y + py * z);
                let i = x + nx * (y + ny * z);
                for c in 0..classes {
                    out[c * nvox + i] = acc[c * hits.len() + g] / hits[g] as f32;
                }
            }
        }
    }
    Ok(out)
}

/// Argmax of channel-major probabilities, as a raw label volume on the
/// grid of `like`.
pub fn labels_from_probs(probs: &[f32], classes: usize, like: &Volume3D) -> Volume3D {
    let n = like.len();
    let data = (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..classes {
                if probs[c * n + i] > probs[best * n + i] {
                    best = c;
                }
            }
            raw_of(best as u8) as f32
        })
        .collect();
    let mut v = Volume3D { data, ..like.clone() };
    v.dtype = Dtype::U8;
    v
}

/// Raw label mask for a study; `window` is the training crop size.
pub fn segment(
    model: &UNet7,
    volumes: &BTreeMap<Modality, Volume3D>,
    order: &[Modality],
    variant: NormVariant,
    window: [usize; 3],
) -> Result<Volume3D> {
    let mc = prepare_segmentation_input(volumes, order, variant)?;
    let probs = sliding_window_probs(model, &mc, window)?;
    let like = volumes[&order[0]].clone();
    Ok(labels_from_probs(&probs, model.config().num_classes, &like))
}

/// A trained UNet7 with what it needs to run on a raw study.
#[derive(Clone, Debug)]
pub struct SegmentationModel {
    pub unet: UNet7,
    pub channel_order: Vec<Modality>,
    pub normalization: NormVariant,
    /// Training crop size, used as the inference window.
    pub window: [usize; 3],
}

pub const META_CHANNELS: &str = "channel_order";
pub const META_NORMALIZATION: &str = "normalization";
pub const META_WINDOW: &str = "window";

impl SegmentationModel {
    pub fn segment(&self, volumes: &BTreeMap<Modality, Volume3D>) -> Result<Volume3D> {
        segment(&self.unet, volumes, &self.channel_order, self.normalization, self.window)
    }

    /// Writes the inference settings into the checkpoint metadata.
    pub fn annotate(&self, ck: &mut Checkpoint) {
        let order: Vec<&str> = self.channel_order.iter().map(|m| m.name()).collect();
        ck.meta.insert(META_CHANNELS.into(), order.join(","));
        ck.meta.insert(META_NORMALIZATION.into(), serde_json::to_string(&self.normalization).expect("serializes"));
        ck.meta.insert(META_WINDOW.into(), self.window.map(|w| w.to_string()).join(","));
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.unet.to_checkpoint();
        self.annotate(&mut ck);
        ck
    }

    /// Missing metadata falls back to all four modalities, min-max
    /// normalization and a 64-voxel window.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let unet = UNet7::from_checkpoint(ck)?;
        let bad = |k: &str, v: &str| ModelError::Config(format!("checkpoint meta {k} = {v:?}"));
        let channel_order = match ck.meta.get(META_CHANNELS) {
            Some(v) => v.split(',').map(|s| s.parse::<Modality>().map_err(|_| bad(META_CHANNELS, v))).collect::<Result<Vec<_>>>()?,
            None => Modality::ALL.to_vec(),
        };
        if channel_order.len() != unet.config().in_channels {
            return Err(ModelError::Config(format!("{} channels listed for a {}-channel network", channel_order.len(), unet.config().in_channels)));
        }
        let normalization = match ck.meta.get(META_NORMALIZATION) {
            Some(v) => serde_json::from_str(v).map_err(|_| bad(META_NORMALIZATION, v))?,
            None => NormVariant::default(),
        };
        let window = match ck.meta.get(META_WINDOW) {
            Some(v) => {
                let w: Vec<usize> = v.split(',').map(|s| s.trim().parse().map_err(|_| bad(META_WINDOW, v))).collect::<Result<_>>()?;
                <[usize; 3]>::try_from(w).map_err(|_| bad(META_WINDOW, v))?
            }
            None => [64; 3],
        };
        Ok(Self { unet, channel_order, normalization, window })
    }
}

/// Classifier input: z-score, keep the central half of the slices, then
/// resample to the configured `(D, H, W)`. Returns `[1, 1, D, H, W]`.
pub fn prepare_classifier_input(v: &Volume3D, cfg: &ResClassifierConfig) -> Result<Tensor<f32>> {
    let normed = normalize_volume(v, NormVariant::ZScore)?.volume;
    let windowed = select_slice_window(&normed, &SliceWindow::CENTRAL_HALF)?;
    let [d, h, w] = cfg.input_size;
    let out = if windowed.dims == [w, h, d] { windowed } else { resample(&windowed, [w, h, d], Interp::Trilinear) };
    Ok(Tensor::from_vec(&[1, 1, d, h, w], out.data)?)
}

/// One classifier per (fold, modality) plus the stacking ensemble.
#[derive(Clone, Debug)]
pub struct MethylationModel {
    pub classifiers: BTreeMap<(usize, Modality), ResClassifier3D>,
    pub ensemble: EnsembleModel,
}

impl MethylationModel {
    pub fn validate(&self) -> Result<()> {
        for f in 0..FOLDS {
            for m in Modality::ALL {
                if !self.classifiers.contains_key(&(f, m)) {
                    return Err(ModelError::Config(format!("missing classifier for fold {f}, {m}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModalityProbability {
    pub modality: Modality,
    /// Mean over folds.
    pub probability: f64,
    pub per_fold: Vec<f64>,
    pub imputed: bool,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MethylationPrediction {
    pub probability: f64,
    /// 1 = methylated.
    pub status_bit: u8,
    pub per_modality: Vec<ModalityProbability>,
}

/// Per-fold sigmoid outputs of one modality's classifiers.
pub fn modality_probabilities(model: &MethylationModel, m: Modality, v: &Volume3D) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(FOLDS);
    let mut cached: Option<(ResClassifierConfig, Tensor<f32>)> = None;
    for f in 0..FOLDS {
        let clf = model.classifiers.get(&(f, m)).ok_or_else(|| ModelError::Config(format!("missing classifier for fold {f}, {m}")))?;
        let x = match &cached {
            Some((cfg, x)) if cfg == clf.config() => x.clone(),
            _ => {
                let x = prepare_classifier_input(v, clf.config())?;
                cached = Some((clf.config().clone(), x.clone()));
                x
            }
        };
        out.push(sigmoid(clf.logit(&x)?));
    }
    Ok(out)
}

pub fn predict_methylation(model: &MethylationModel, volumes: &BTreeMap<Modality, Volume3D>) -> Result<MethylationPrediction> {
    if !Modality::ALL.iter().any(|m| volumes.contains_key(m)) {
        return Err(ModelError::NoModalities);
    }
    let mut features: Features = [IMPUTED_PROBABILITY; N_FEATURES];
    let mut per_modality = Vec::new();
    for m in Modality::ALL {
        let entry = match volumes.get(&m) {
            Some(v) => {
                let per_fold = modality_probabilities(model, m, v)?;
                for (f, &p) in per_fold.iter().enumerate() {
                    features[feature_index(f, m)] = p;
                }
                let probability = per_fold.iter().sum::<f64>() / FOLDS as f64;
                ModalityProbability { modality: m, probability, per_fold, imputed: false }
            }
            None => ModalityProbability {
                modality: m,
                probability: IMPUTED_PROBABILITY,
                per_fold: vec![IMPUTED_PROBABILITY; FOLDS],
                imputed: true,
            },
        };
        per_modality.push(entry);
    }
    let probability = model.ensemble.predict(&features);
    Ok(MethylationPrediction { probability, status_bit: (probability >= 0.5) as u8, per_modality })
}
