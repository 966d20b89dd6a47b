//! Segmentation and classification losses with analytic gradients.
//!
//! Segmentation losses take softmax probabilities `[N, C, ...]` and a
//! target of the same shape (one-hot over dense classes) and return the
//! loss together with its gradient with respect to the probabilities.

use serde::{Deserialize, Serialize};

use super::{MetricError, Result};
use crate::tensor::ops::{softmax_channels, softmax_channels_backward};
use crate::tensor::{Real, Tensor};

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub dice_smooth: f64,
    pub focal_gamma: f64,
    pub class_weights: Vec<f64>,
    pub combo_focal_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { dice_smooth: 1e-5, focal_gamma: 2.0, class_weights: vec![1.0; 4], combo_focal_weight: 1.0 }
    }
}

impl LossConfig {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if !(self.dice_smooth > 0.0) {
            return Err(MetricError::Config("dice_smooth must be positive".into()));
        }
        if !(self.focal_gamma >= 0.0) {
            return Err(MetricError::Config("focal_gamma must be non-negative".into()));
        }
        if self.class_weights.len() != classes {
            return Err(MetricError::Config(format!("{} class weights for {classes} classes", self.class_weights.len())));
        }
        if self.class_weights.iter().any(|&w| !(w >= 0.0)) || !self.class_weights.iter().any(|&w| w > 0.0) {
            return Err(MetricError::Config("class weights must be non-negative with one positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LossValue<T: Real> {
    pub loss: f64,
    pub grad: Tensor<T>,
}

fn check_pair<T: Real>(p: &Tensor<T>, g: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if p.shape() != g.shape() || p.shape().len() < 2 {
        return Err(MetricError::ShapeMismatch(format!("{:?} vs {:?}", p.shape(), g.shape())));
    }
    let n = p.shape()[0];
    let c = p.shape()[1];
    let s = p.numel() / (n * c).max(1);
    if c < 2 {
        return Err(MetricError::ShapeMismatch("need at least two classes".into()));
    }
    Ok((n, c, s))
}

/// Per-class soft Dice coefficients over foreground classes `1..C`, pooled
/// over the batch.
pub fn soft_dice_per_class<T: Real>(probs: &Tensor<T>, target: &Tensor<T>, smooth: f64) -> Result<Vec<f64>> {
    let (n, c, s) = check_pair(probs, target)?;
    let (p, g) = (probs.data(), target.data());
    Ok((1..c)
        .map(|k| {
            let (mut i, mut ps, mut gs) = (0.0, 0.0, 0.0);
            for b in 0..n {
                let off = (b * c + k) * s;
                for v in off..off + s {
                    let (pv, gv) = (p[v].as_f64(), g[v].as_f64());
                    i += pv * gv;
                    ps += pv;
                    gs += gv;
                }
            }
            (2.0 * i + smooth) / (ps + gs + smooth)
        })
        .collect())
}

/// Mean soft Dice coefficient over foreground classes.
pub fn soft_dice<T: Real>(probs: &Tensor<T>, target: &Tensor<T>, smooth: f64) -> Result<f64> {
    let d = soft_dice_per_class(probs, target, smooth)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// `1 - mean_k (2 Σpg + ε) / (Σp + Σg + ε)` over foreground classes.
pub fn soft_dice_loss<T: Real>(probs: &Tensor<T>, target: &Tensor<T>, cfg: &LossConfig) -> Result<LossValue<T>> {
    let (n, c, s) = check_pair(probs, target)?;
    let eps = cfg.dice_smooth;
    let (p, g) = (probs.data(), target.data());
    let mut grad = Tensor::zeros(probs.shape());
    let mut total = 0.0;
    let k_count = (c - 1) as f64;
    for k in 1..c {
        let (mut i, mut ps, mut gs) = (0.0, 0.0, 0.0);
        for b in 0..n {
            let off = (b * c + k) * s;
            for v in off..off + s {
                let (pv, gv) = (p[v].as_f64(), g[v].as_f64());
                i += pv * gv;
                ps += pv;
                gs += gv;
            }
        }
        let num = 2.0 * i + eps;
        let den = ps + gs + eps;
        total += num / den;
        let gd = grad.data_mut();
        for b in 0..n {
            let off = (b * c + k) * s;
            for v in off..off + s {
                let d = (2.0 * g[v].as_f64() * den - num) / (den * den);
                gd[v] = T::lit(-d / k_count);
            }
        }
    }
    Ok(LossValue { loss: 1.0 - total / k_count, grad })
}

/// Mean over voxels of `-Σ_c g_c w_c (1 - p_c)^γ ln p_c`, with `p` clamped
/// to `[1e-7, 1 - 1e-7]`.
pub fn weighted_focal_loss<T: Real>(probs: &Tensor<T>, target: &Tensor<T>, cfg: &LossConfig) -> Result<LossValue<T>> {
    let (n, c, s) = check_pair(probs, target)?;
    if cfg.class_weights.len() != c {
        return Err(MetricError::Config(format!("{} class weights for {c} classes", cfg.class_weights.len())));
    }
    let gamma = cfg.focal_gamma;
    let (p, g) = (probs.data(), target.data());
    let mut grad = Tensor::zeros(probs.shape());
    let voxels = (n * s) as f64;
    let mut total = 0.0;
    let gd = grad.data_mut();
    for b in 0..n {
        for k in 0..c {
            let w = cfg.class_weights[k];
            let off = (b * c + k) * s;
            for v in off..off + s {
                let gv = g[v].as_f64();
                if gv == 0.0 || w == 0.0 {
                    continue;
                }
                let raw = p[v].as_f64();
                let pc = raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                let q = 1.0 - pc;
                let lnp = pc.ln();
                let mod_ = if gamma == 0.0 { 1.0 } else { q.powf(gamma) };
                total += -gv * w * mod_ * lnp;
                if raw > PROB_CLAMP && raw < 1.0 - PROB_CLAMP {
                    let dmod = if gamma == 0.0 { 0.0 } else { -gamma * q.powf(gamma - 1.0) };
                    let d = -gv * w * (dmod * lnp + mod_ / pc);
                    gd[v] = T::lit(d / voxels);
                }
            }
        }
    }
    Ok(LossValue { loss: total / voxels, grad })
}

/// Soft Dice loss plus `λ` times the weighted focal loss.
pub fn combo_loss<T: Real>(probs: &Tensor<T>, target: &Tensor<T>, cfg: &LossConfig) -> Result<LossValue<T>> {
    let mut dice = soft_dice_loss(probs, target, cfg)?;
    let lambda = cfg.combo_focal_weight;
    if lambda == 0.0 {
        return Ok(dice);
    }
    let focal = weighted_focal_loss(probs, target, cfg)?;
    for (d, f) in dice.grad.data_mut().iter_mut().zip(focal.grad.data()) {
        *d = T::lit(d.as_f64() + lambda * f.as_f64());
    }
    Ok(LossValue { loss: dice.loss + lambda * focal.loss, grad: dice.grad })
}

/// Combo loss from logits: softmax over channels, then the loss, with the
/// gradient carried back to the logits. Also returns the probabilities.
pub fn combo_loss_logits<T: Real>(
    logits: &Tensor<T>,
    target: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<(LossValue<T>, Tensor<T>)> {
    let probs = softmax_channels(logits).map_err(|e| MetricError::ShapeMismatch(e.to_string()))?;
    let lv = combo_loss(&probs, target, cfg)?;
    let grad = softmax_channels_backward(&probs, &lv.grad).map_err(|e| MetricError::ShapeMismatch(e.to_string()))?;
    Ok((LossValue { loss: lv.loss, grad }, probs))
}

/// Binary cross-entropy on a logit, stable for large `|z|`. Returns
/// `(loss, d loss / d z)`.
pub fn bce_loss(logit: f64, label: f64) -> (f64, f64) {
    let loss = logit.max(0.0) - logit * label + (-logit.abs()).exp().ln_1p();
    let sig = if logit >= 0.0 {
        1.0 / (1.0 + (-logit).exp())
    } else {
        let e = logit.exp();
        e / (1.0 + e)
    };
    (loss, sig - label)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (Tensor<f64>, Tensor<f64>) {
        // two classes, two voxels, class 1 target (1, 0)
        let p = Tensor::from_vec(&[1, 2, 1, 1, 2], vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let g = Tensor::from_vec(&[1, 2, 1, 1, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        (p, g)
    }

    fn cfg2() -> LossConfig {
        LossConfig { class_weights: vec![1.0, 1.0], ..Default::default() }
    }

    #[test]
    fn dice_toy_by_hand() {
        let (p, g) = toy();
        let eps = 1e-5;
        let l = soft_dice_loss(&p, &g, &cfg2()).unwrap().loss;
        assert!((l - (1.0 - (1.0 + eps) / (2.0 + eps))).abs() < 1e-15);
    }

    #[test]
    fn focal_half_probability() {
        let (p, g) = toy();
        let l = weighted_focal_loss(&p, &g, &cfg2()).unwrap().loss;
        assert!((l - 0.25 * std::f64::consts::LN_2).abs() < 1e-15);
        let c = combo_loss(&p, &g, &cfg2()).unwrap().loss;
        let d = soft_dice_loss(&p, &g, &cfg2()).unwrap().loss;
        assert!((c - (d + 0.25 * std::f64::consts::LN_2)).abs() < 1e-15);
    }

    #[test]
    fn focal_gamma_zero_is_cross_entropy() {
        let p = Tensor::from_vec(&[1, 3, 1, 1, 2], vec![0.2, 0.5, 0.3, 0.1, 0.5, 0.4]).unwrap();
        let g = Tensor::from_vec(&[1, 3, 1, 1, 2], vec![0.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let cfg = LossConfig { focal_gamma: 0.0, class_weights: vec![1.0; 3], ..Default::default() };
        let ce = -(0.3f64.ln() + 0.1f64.ln()) / 2.0;
        assert!((weighted_focal_loss(&p, &g, &cfg).unwrap().loss - ce).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_disjoint() {
        let g = Tensor::from_vec(&[1, 2, 1, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(combo_loss(&g, &g, &cfg2()).unwrap().loss < 1e-5);
        let anti = Tensor::from_vec(&[1, 2, 1, 1, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!((soft_dice_loss(&anti, &g, &cfg2()).unwrap().loss - 1.0).abs() < 1e-5);
    }

    #[test]
    fn lambda_zero_is_dice() {
        let (p, g) = toy();
        let cfg = LossConfig { combo_focal_weight: 0.0, ..cfg2() };
        assert_eq!(combo_loss(&p, &g, &cfg).unwrap().loss, soft_dice_loss(&p, &g, &cfg).unwrap().loss);
    }

    #[test]
    fn bce_values() {
        for y in [0.0, 1.0] {
            assert!((bce_loss(0.0, y).0 - std::f64::consts::LN_2).abs() < 1e-15);
            assert_eq!(bce_loss(0.0, y).1, 0.5 - y);
        }
        let (l, _) = bce_loss(20.0, 1.0);
        let naive = -(1.0 / (1.0 + (-20f64).exp())).ln();
        assert!((l - 2.061153620314381e-9).abs() / l < 1e-12, "{l}");
        assert!((l - naive).abs() / l < 1e-6);
        assert!(bce_loss(-800.0, 1.0).0.is_finite());
    }
}
