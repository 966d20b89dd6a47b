//! Central-difference gradient checking in `f64`.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Layer, Result, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Base finite-difference step; the step for coordinate `x` is `step * max(1, |x|)`.
    pub step: f64,
    /// Coordinates sampled per tensor (input and each parameter).
    pub max_coords: usize,
    /// Gradients below this magnitude on both sides compare absolutely.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-3, max_coords: 64, abs_floor: 1e-8, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Name of the tensor holding the worst coordinate.
    pub worst: String,
}

impl GradCheckReport {
    fn record(&mut self, name: &str, analytic: f64, numeric: f64, floor: f64) {
        let err = relative_error(analytic, numeric, floor);
        self.checked += 1;
        if err > self.max_rel_error || self.checked == 1 {
            self.max_rel_error = err;
            self.worst = name.to_string();
        }
    }

    fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.checked > 0 && other.max_rel_error >= self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn coords(n: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        let mut v = sample(rng, n, max).into_vec();
        v.sort_unstable();
        v
    }
}

/// Checks `analytic` against central differences of the scalar function `f` at `x`.
pub fn check_function(
    name: &str,
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    cfg: &GradCheckConfig,
) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport::default();
    let mut probe = x.to_vec();
    for i in coords(x.len(), cfg.max_coords, &mut rng) {
        let h = cfg.step * x[i].abs().max(1.0);
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        report.record(name, analytic[i], (up - down) / (2.0 * h), cfg.abs_floor);
    }
    report
}

/// Random input in `[-1, 1]`, shaped as given.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

fn projected(layer: &dyn Layer<f64>, x: &Tensor<f64>, r: &Tensor<f64>) -> Result<f64> {
    let y = layer.infer(x)?;
    Ok(y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum())
}

/// Checks a layer's input and parameter gradients for the scalar loss
/// `sum(r * layer(x))` with a fixed random projection `r`.
pub fn grad_check_with_input(layer: &mut dyn Layer<f64>, x: &Tensor<f64>, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    for p in layer.params_mut() {
        p.zero_grad();
    }
    let y = layer.forward(x)?;
    let r = random_tensor(y.shape(), cfg.seed ^ 0x5eed);
    let gx = layer.backward(&r)?;
    let param_grads: Vec<Tensor<f64>> = layer.params().iter().map(|p| p.grad.clone()).collect();

    let mut report = {
        let layer_ref: &dyn Layer<f64> = layer;
        let mut f = |v: &[f64]| {
            let xt = Tensor::from_vec(x.shape(), v.to_vec()).expect("shape");
            projected(layer_ref, &xt, &r).expect("forward")
        };
        check_function("input", &mut f, x.data(), gx.data(), cfg)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    for (pi, analytic) in param_grads.iter().enumerate() {
        let n = analytic.numel();
        let name = layer.params()[pi].name.clone();
        let mut sub = GradCheckReport::default();
        for i in coords(n, cfg.max_coords, &mut rng) {
            let orig = layer.params()[pi].value.data()[i];
            let h = cfg.step * orig.abs().max(1.0);
            layer.params_mut()[pi].value.data_mut()[i] = orig + h;
            let up = projected(layer, x, &r)?;
            layer.params_mut()[pi].value.data_mut()[i] = orig - h;
            let down = projected(layer, x, &r)?;
            layer.params_mut()[pi].value.data_mut()[i] = orig;
            sub.record(&name, analytic.data()[i], (up - down) / (2.0 * h), cfg.abs_floor);
        }
        report.merge(sub);
    }
    Ok(report)
}

/// Like [`grad_check_with_input`] with a random input of the given shape.
pub fn grad_check(layer: &mut dyn Layer<f64>, input_shape: &[usize], cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let x = random_tensor(input_shape, cfg.seed);
    grad_check_with_input(layer, &x, cfg)
}
