//! Logistic regression over the 16 per-fold, per-modality probabilities.

use std::fmt::Write as _;

use crate::modality::Modality;

use super::{ModelError, Result};

pub const FOLDS: usize = 4;
pub const N_FEATURES: usize = FOLDS * Modality::ALL.len();

/// L2 penalty on the coefficients (the intercept is not penalized).
pub const L2: f64 = 1e-4;
pub const GRAD_TOL: f64 = 1e-6;
pub const MAX_ITERS: usize = 100_000;

pub type Features = [f64; N_FEATURES];

/// Slot of `(fold, modality)` in the fold-major feature vector.
pub fn feature_index(fold: usize, modality: Modality) -> usize {
    fold * Modality::ALL.len() + modality.index()
}

pub fn feature_names() -> Vec<String> {
    (0..FOLDS).flat_map(|f| Modality::ALL.iter().map(move |m| format!("fold{f}_{m}"))).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleModel {
    pub weights: Features,
    pub intercept: f64,
    /// Iterations used by the fit; 0 for models read from disk.
    pub iterations: usize,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl EnsembleModel {
    pub fn logit(&self, x: &Features) -> f64 {
        self.intercept + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }

    pub fn predict(&self, x: &Features) -> f64 {
        sigmoid(self.logit(x))
    }

    /// Penalized maximum likelihood by full-batch gradient descent on
    /// `mean NLL + L2/2 * |w|^2`.
    pub fn fit(features: &[Features], labels: &[u8]) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(ModelError::Config("features and labels differ in length".into()));
        }
        let pos = labels.iter().filter(|&&y| y == 1).count();
        if pos == 0 || pos == labels.len() {
            return Err(ModelError::SingleClass);
        }
        let n = features.len() as f64;
        // Lipschitz bound of the gradient: 0.25 * max |(1, x)|^2 + L2.
        let lip = 0.25 * features.iter().map(|x| 1.0 + x.iter().map(|v| v * v).sum::<f64>()).fold(0.0, f64::max) + L2;
        let step = 1.0 / lip;

        let mut w = [0.0; N_FEATURES];
        let prevalence = pos as f64 / n;
        let mut b = (prevalence / (1.0 - prevalence)).ln();
        let mut iterations = 0;
        while iterations < MAX_ITERS {
            let mut gw = [0.0; N_FEATURES];
            let mut gb = 0.0;
            for (x, &y) in features.iter().zip(labels) {
                let z = b + w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
                let r = sigmoid(z) - y as f64;
                gb += r;
                for (g, v) in gw.iter_mut().zip(x) {
                    *g += r * v;
                }
            }
            gb /= n;
            for (g, wi) in gw.iter_mut().zip(&w) {
                *g = *g / n + L2 * wi;
            }
            let gmax = gw.iter().fold(gb.abs(), |m, g| m.max(g.abs()));
            if gmax < GRAD_TOL {
                break;
            }
            b -= step * gb;
            for (wi, g) in w.iter_mut().zip(&gw) {
                *wi -= step * g;
            }
            iterations += 1;
        }
        Ok(Self { weights: w, intercept: b, iterations })
    }

    /// Text record: one `#` header naming the feature order, then 16
    /// coefficients and the intercept, one per line.
    pub fn to_text(&self) -> String {
        let mut s = format!("# gliopipe ensemble v1: {} intercept\n", feature_names().join(" "));
        for w in self.weights.iter().chain(std::iter::once(&self.intercept)) {
            // `{:?}` prints the shortest representation that round-trips.
            writeln!(s, "{w:?}").expect("write to string");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        match lines.next() {
            Some(h) if h.starts_with("# gliopipe ensemble v1:") => {
                let names: Vec<&str> = h["# gliopipe ensemble v1:".len()..].split_whitespace().collect();
                let expected = feature_names();
                if names.len() != N_FEATURES + 1 || names[..N_FEATURES].iter().zip(&expected).any(|(a, b)| a != b) {
                    return Err(ModelError::BadRecord("feature order differs".into()));
                }
            }
            _ => return Err(ModelError::BadRecord("missing header".into())),
        }
        let values = lines
            .map(|l| l.parse::<f64>().map_err(|e| ModelError::BadRecord(format!("{l:?}: {e}"))))
            .collect::<Result<Vec<f64>>>()?;
        if values.len() != N_FEATURES + 1 {
            return Err(ModelError::BadRecord(format!("expected {} values, found {}", N_FEATURES + 1, values.len())));
        }
        let mut weights = [0.0; N_FEATURES];
        weights.copy_from_slice(&values[..N_FEATURES]);
        Ok(Self { weights, intercept: values[N_FEATURES], iterations: 0 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pair_auc(s: &[f64], y: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &a) in s.iter().enumerate() {
            for (j, &b) in s.iter().enumerate() {
                if y[i] == 1 && y[j] == 0 {
                    den += 1.0;
                    num += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
                }
            }
        }
        num / den
    }

    #[test]
    fn separable_features_rank_perfectly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..40 {
            let y = (i % 2) as u8;
            let mut x = [0.0; N_FEATURES];
            for v in x.iter_mut() {
                *v = rng.random_range(0.0..0.4) + 0.5 * y as f64;
            }
            xs.push(x);
            ys.push(y);
        }
        let m = EnsembleModel::fit(&xs, &ys).unwrap();
        let s: Vec<f64> = xs.iter().map(|x| m.predict(x)).collect();
        assert_eq!(pair_auc(&s, &ys), 1.0);
    }

    #[test]
    fn single_class_rejected() {
        let xs = vec![[0.5; N_FEATURES]; 4];
        assert!(matches!(EnsembleModel::fit(&xs, &[1, 1, 1, 1]), Err(ModelError::SingleClass)));
    }

    #[test]
    fn constant_features_give_prevalence() {
        let xs = vec![[0.3; N_FEATURES]; 10];
        let ys = [1, 1, 1, 0, 0, 0, 0, 0, 0, 0];
        let m = EnsembleModel::fit(&xs, &ys).unwrap();
        assert!((m.predict(&xs[0]) - 0.3).abs() < 1e-5, "{}", m.predict(&xs[0]));
    }

    #[test]
    fn neutral_features_identity() {
        let mut m = EnsembleModel { weights: [0.0; N_FEATURES], intercept: -0.2, iterations: 0 };
        for (i, w) in m.weights.iter_mut().enumerate() {
            *w = 0.1 * i as f64 - 0.7;
        }
        let expect = sigmoid(-0.2 + 0.5 * m.weights.iter().sum::<f64>());
        assert!((m.predict(&[0.5; N_FEATURES]) - expect).abs() < 1e-15);
    }

    #[test]
    fn text_round_trip() {
        let mut m = EnsembleModel { weights: [0.0; N_FEATURES], intercept: 0.125, iterations: 0 };
        m.weights[3] = -1.0 / 3.0;
        m.weights[15] = 7.5e-9;
        let text = m.to_text();
        assert_eq!(text.lines().count(), 1 + 17);
        assert_eq!(EnsembleModel::from_text(&text).unwrap(), m);
        assert!(EnsembleModel::from_text("1\n2\n").is_err());
    }

    #[test]
    fn feature_slots_are_fold_major() {
        assert_eq!(feature_index(0, Modality::T1), 0);
        assert_eq!(feature_index(0, Modality::Flair), 3);
        assert_eq!(feature_index(1, Modality::T1), 4);
        assert_eq!(feature_index(3, Modality::Flair), 15);
        assert_eq!(feature_names()[5], "fold1_t1ce");
    }
}
