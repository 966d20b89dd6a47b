//! SGD with momentum, Adam with bias correction, and piecewise-constant
//! learning-rate schedules.

use serde::{Deserialize, Serialize};

use super::{Param, Real, Result, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimKind {
    pub fn adam() -> Self {
        OptimKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl Default for OptimKind {
    fn default() -> Self {
        Self::adam()
    }
}

/// Optimizer state: hyperparameters plus one moment buffer per parameter
/// (SGD uses only `m` as its velocity).
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T: Real = f32> {
    pub kind: OptimKind,
    pub lr: f64,
    pub step_count: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> OptimState<T> {
    pub fn new(kind: OptimKind, lr: f64) -> Self {
        Self { kind, lr, step_count: 0, m: Vec::new(), v: Vec::new() }
    }

    fn ensure_buffers(&mut self, params: &[&mut Param<T>]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.value.numel()]).collect();
            if matches!(self.kind, OptimKind::Adam { .. }) {
                self.v = self.m.clone();
            }
        }
        if self.m.len() != params.len() || self.m.iter().zip(params).any(|(b, p)| b.len() != p.value.numel()) {
            return Err(TensorError::ShapeMismatch("optimizer buffers do not match parameters".into()));
        }
        Ok(())
    }

    /// Applies one update from the accumulated gradients. Gradients are left as is.
    pub fn step(&mut self, params: &mut [&mut Param<T>]) -> Result<()> {
        self.ensure_buffers(params)?;
        self.step_count += 1;
        let lr = self.lr;
        match self.kind {
            OptimKind::Sgd { momentum } => {
                for (p, buf) in params.iter_mut().zip(self.m.iter_mut()) {
                    let Param { value, grad, .. } = &mut **p;
                    for ((w, &g), b) in value.data_mut().iter_mut().zip(grad.data()).zip(buf.iter_mut()) {
                        let vel = momentum * b.as_f64() + g.as_f64();
                        *b = T::lit(vel);
                        *w = T::lit(w.as_f64() - lr * vel);
                    }
                }
            }
            OptimKind::Adam { beta1, beta2, eps } => {
                let t = self.step_count as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for ((p, mb), vb) in params.iter_mut().zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
                    let Param { value, grad, .. } = &mut **p;
                    for (((w, &g), m), v) in value.data_mut().iter_mut().zip(grad.data()).zip(mb.iter_mut()).zip(vb.iter_mut()) {
                        let g = g.as_f64();
                        let m1 = beta1 * m.as_f64() + (1.0 - beta1) * g;
                        let v1 = beta2 * v.as_f64() + (1.0 - beta2) * g * g;
                        *m = T::lit(m1);
                        *v = T::lit(v1);
                        let update = lr * (m1 / c1) / ((v1 / c2).sqrt() + eps);
                        *w = T::lit(w.as_f64() - update);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Piecewise-constant schedule: `(epoch_start, lr)` pairs, strictly increasing in epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub milestones: Vec<(usize, f64)>,
}

impl LrSchedule {
    pub fn new(milestones: Vec<(usize, f64)>) -> Result<Self> {
        let s = Self { milestones };
        s.validate()?;
        Ok(s)
    }

    pub fn constant(lr: f64) -> Self {
        Self { milestones: vec![(0, lr)] }
    }

    /// Segmentation default: 1e-4, then 5e-5 and 1e-6 for later epochs.
    pub fn segmentation_default() -> Self {
        Self { milestones: vec![(0, 1e-4), (50, 5e-5), (80, 1e-6)] }
    }

    /// Classifier default: 1e-4, 5e-5, 1e-5.
    pub fn classifier_default() -> Self {
        Self { milestones: vec![(0, 1e-4), (20, 5e-5), (40, 1e-5)] }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TensorError::InvalidSchedule(m.into()));
        match self.milestones.first() {
            None => return bad("no milestones"),
            Some(&(e, _)) if e != 0 => return bad("first milestone must start at epoch 0"),
            _ => {}
        }
        if self.milestones.windows(2).any(|w| w[1].0 <= w[0].0) {
            return bad("milestone epochs must be strictly increasing");
        }
        // lr == 0 is allowed so that frozen runs can be expressed.
        if self.milestones.iter().any(|&(_, lr)| !(lr >= 0.0 && lr.is_finite())) {
            return bad("learning rates must be finite and non-negative");
        }
        Ok(())
    }
}

/// Rate of the last milestone whose start is `<= epoch`.
pub fn lr_at(schedule: &LrSchedule, epoch: usize) -> f64 {
    schedule
        .milestones
        .iter()
        .take_while(|&&(start, _)| start <= epoch)
        .last()
        .or(schedule.milestones.first())
        .map_or(0.0, |&(_, lr)| lr)
}
