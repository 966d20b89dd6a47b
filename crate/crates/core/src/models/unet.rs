//! Seven-level 3D U-Net: three encoder levels, a bottleneck, three decoder
//! levels. Each level is `convs_per_level` × (conv 3³ → instance norm →
//! leaky ReLU); max-pool 2³ down, transposed conv 2³ up, channel-concat skips.

use serde::{Deserialize, Serialize};

use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::init::SeedSeq;
use crate::tensor::layers::{Conv3d, ConvTranspose3d, InstanceNorm3d, Layer, LeakyRelu, MaxPool3d};
use crate::tensor::ops::{concat_channels, split_channels};
use crate::tensor::{Param, Real, Tensor, TensorError};

use super::{ModelError, Result};

pub const UNET_ARCH: &str = "unet7";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNet7Config {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_filters: usize,
    /// Number of down-sampling steps; levels = 2 * depth + 1.
    pub depth: usize,
    pub convs_per_level: usize,
    pub kernel: usize,
    pub leaky_slope: f64,
}

impl Default for UNet7Config {
    fn default() -> Self {
        Self { in_channels: 4, num_classes: 4, base_filters: 16, depth: 3, convs_per_level: 2, kernel: 3, leaky_slope: 0.01 }
    }
}

impl UNet7Config {
    pub fn levels(&self) -> usize {
        2 * self.depth + 1
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.in_channels == 3 || self.in_channels == 4) {
            return Err(ModelError::Config(format!("in_channels must be 3 or 4, got {}", self.in_channels)));
        }
        if self.num_classes < 2 || self.base_filters == 0 || self.depth == 0 || self.convs_per_level == 0 {
            return Err(ModelError::Config("num_classes >= 2, base_filters, depth and convs_per_level >= 1".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(ModelError::Config("kernel must be odd".into()));
        }
        Ok(())
    }

    /// Spatial dims must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << self.depth
    }

    fn filters(&self, level: usize) -> usize {
        self.base_filters << level
    }
}

#[derive(Clone, Debug)]
pub(crate) struct ConvBlock<T: Real> {
    stages: Vec<(Conv3d<T>, InstanceNorm3d<T>, LeakyRelu<T>)>,
}

impl<T: Real> ConvBlock<T> {
    pub(crate) fn new(name: &str, cin: usize, cout: usize, n: usize, kernel: usize, slope: f64, seeds: &mut SeedSeq) -> Self {
        let stages = (0..n)
            .map(|i| {
                let c_in = if i == 0 { cin } else { cout };
                (
                    Conv3d::new(&format!("{name}.conv{i}"), c_in, cout, kernel, 1, kernel / 2, seeds.next_seed()),
                    InstanceNorm3d::new(&format!("{name}.norm{i}"), cout),
                    LeakyRelu::new(slope),
                )
            })
            .collect();
        Self { stages }
    }

    fn forward(&mut self, x: &Tensor<T>) -> crate::tensor::Result<Tensor<T>> {
        let mut h = x.clone();
        for (c, n, a) in &mut self.stages {
            h = a.forward(&n.forward(&c.forward(&h)?)?)?;
        }
        Ok(h)
    }

    fn infer(&self, x: &Tensor<T>) -> crate::tensor::Result<Tensor<T>> {
        let mut h = x.clone();
        for (c, n, a) in &self.stages {
            h = a.infer(&n.infer(&c.infer(&h)?)?)?;
        }
        Ok(h)
    }

    fn backward(&mut self, g: &Tensor<T>) -> crate::tensor::Result<Tensor<T>> {
        let mut g = g.clone();
        for (c, n, a) in self.stages.iter_mut().rev() {
            g = c.backward(&n.backward(&a.backward(&g)?)?)?;
        }
        Ok(g)
    }

    fn params(&self) -> Vec<&Param<T>> {
        self.stages.iter().flat_map(|(c, n, _)| c.params().into_iter().chain(n.params())).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.stages
            .iter_mut()
            .flat_map(|(c, n, _)| c.params_mut().into_iter().chain(n.params_mut()))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct UNet7<T: Real = f32> {
    config: UNet7Config,
    encoders: Vec<ConvBlock<T>>,
    pools: Vec<MaxPool3d>,
    bottleneck: ConvBlock<T>,
    ups: Vec<ConvTranspose3d<T>>,
    decoders: Vec<ConvBlock<T>>,
    head: Conv3d<T>,
}

impl<T: Real> UNet7<T> {
    pub fn new(config: UNet7Config, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut seeds = SeedSeq::new(seed);
        let (k, n, slope) = (config.kernel, config.convs_per_level, config.leaky_slope);
        let mut encoders = Vec::new();
        for lvl in 0..config.depth {
            let cin = if lvl == 0 { config.in_channels } else { config.filters(lvl - 1) };
            encoders.push(ConvBlock::new(&format!("enc{lvl}"), cin, config.filters(lvl), n, k, slope, &mut seeds));
        }
        let d = config.depth;
        let bottleneck = ConvBlock::new("bottleneck", config.filters(d - 1), config.filters(d), n, k, slope, &mut seeds);
        let mut ups = Vec::new();
        let mut decoders = Vec::new();
        // decoders[i] serves level depth-1-i
        for lvl in (0..d).rev() {
            ups.push(ConvTranspose3d::new(&format!("up{lvl}"), config.filters(lvl + 1), config.filters(lvl), 2, seeds.next_seed()));
            decoders.push(ConvBlock::new(&format!("dec{lvl}"), 2 * config.filters(lvl), config.filters(lvl), n, k, slope, &mut seeds));
        }
        let head = Conv3d::new("head", config.filters(0), config.num_classes, 1, 1, 0, seeds.next_seed());
        Ok(Self { pools: (0..d).map(|_| MaxPool3d::new()).collect(), config, encoders, bottleneck, ups, decoders, head })
    }

    pub fn config(&self) -> &UNet7Config {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.value.numel()).sum()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [_, c, d, h, w] = x.dims5()?;
        if c != self.config.in_channels {
            return Err(TensorError::ShapeMismatch(format!("expected {} channels, got {}", self.config.in_channels, c)).into());
        }
        let div = self.config.divisor();
        if [d, h, w].iter().any(|&s| s == 0 || s % div != 0) {
            return Err(TensorError::ShapeMismatch(format!("spatial dims {:?} must be divisible by {}", [d, h, w], div)).into());
        }
        Ok(())
    }

    /// Training forward pass returning `[N, classes, D, H, W]` logits.
    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut h = x.clone();
        for (enc, pool) in self.encoders.iter_mut().zip(&mut self.pools) {
            let e = enc.forward(&h)?;
            h = pool.forward(&e)?;
            skips.push(e);
        }
        h = self.bottleneck.forward(&h)?;
        for (up, dec) in self.ups.iter_mut().zip(&mut self.decoders) {
            let u = up.forward(&h)?;
            let skip = skips.pop().expect("one skip per level");
            h = dec.forward(&concat_channels(&[&u, &skip])?)?;
        }
        Ok(self.head.forward(&h)?)
    }

    /// Backpropagates `d loss / d logits`; parameter grads are accumulated.
    pub fn backward(&mut self, grad_logits: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = self.head.backward(grad_logits)?;
        let mut skip_grads = Vec::with_capacity(self.config.depth);
        for (i, (up, dec)) in self.ups.iter_mut().zip(&mut self.decoders).enumerate().rev() {
            let lvl = self.config.depth - 1 - i;
            let f = self.config.filters(lvl);
            let gcat = dec.backward(&g)?;
            let mut parts = split_channels(&gcat, &[f, f])?;
            let gskip = parts.pop().expect("two parts");
            skip_grads.push(gskip);
            g = up.backward(&parts.pop().expect("two parts"))?;
        }
        g = self.bottleneck.backward(&g)?;
        for (enc, pool) in self.encoders.iter_mut().zip(&mut self.pools).rev() {
            let mut ge = pool.backward(&g)?;
            ge.add_assign(&skip_grads.pop().expect("one grad per level"))?;
            g = enc.backward(&ge)?;
        }
        Ok(g)
    }

    /// Inference forward pass; safe to call concurrently.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut skips = Vec::with_capacity(self.config.depth);
        let mut h = x.clone();
        for (enc, pool) in self.encoders.iter().zip(&self.pools) {
            let e = enc.infer(&h)?;
            h = pool.infer(&e)?;
            skips.push(e);
        }
        h = self.bottleneck.infer(&h)?;
        for (up, dec) in self.ups.iter().zip(&self.decoders) {
            let u = up.infer(&h)?;
            let skip = skips.pop().expect("one skip per level");
            h = dec.infer(&concat_channels(&[&u, &skip])?)?;
        }
        Ok(self.head.infer(&h)?)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v: Vec<&Param<T>> = self.encoders.iter().flat_map(|e| e.params()).collect();
        v.extend(self.bottleneck.params());
        for (up, dec) in self.ups.iter().zip(&self.decoders) {
            v.extend(up.params());
            v.extend(dec.params());
        }
        v.extend(self.head.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v: Vec<&mut Param<T>> = self.encoders.iter_mut().flat_map(|e| e.params_mut()).collect();
        v.extend(self.bottleneck.params_mut());
        for (up, dec) in self.ups.iter_mut().zip(&mut self.decoders) {
            v.extend(up.params_mut());
            v.extend(dec.params_mut());
        }
        v.extend(self.head.params_mut());
        v
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.zero_grad());
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let cfg = serde_json::to_string(&self.config).expect("config serializes");
        Checkpoint::from_params(UNET_ARCH, cfg, self.params())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.arch != UNET_ARCH {
            return Err(ModelError::Config(format!("checkpoint holds {}, not {}", ck.arch, UNET_ARCH)));
        }
        let config: UNet7Config = serde_json::from_str(&ck.config).map_err(|e| ModelError::Config(e.to_string()))?;
        let mut model = Self::new(config, 0)?;
        ck.load_into(model.params_mut())?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::random_tensor;

    fn closed_form(b: usize, c: usize) -> usize {
        5466 * b * b + (143 + 27 * c) * b + 4
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for b in [4, 8, 16] {
            for c in [3, 4] {
                let m = UNet7::<f32>::new(UNet7Config { in_channels: c, base_filters: b, ..Default::default() }, 0).unwrap();
                assert_eq!(m.num_params(), closed_form(b, c), "b={b} c={c}");
            }
        }
    }

    #[test]
    fn shapes_propagate() {
        let m = UNet7::<f32>::new(UNet7Config { base_filters: 2, ..Default::default() }, 1).unwrap();
        let x = random_tensor(&[1, 4, 16, 8, 24], 3).cast::<f32>();
        assert_eq!(m.predict(&x).unwrap().shape(), &[1, 4, 16, 8, 24]);
        let bad = Tensor::<f32>::zeros(&[1, 4, 30, 32, 32]);
        assert!(m.predict(&bad).is_err());
        let wrong_c = Tensor::<f32>::zeros(&[1, 3, 8, 8, 8]);
        assert!(m.predict(&wrong_c).is_err());
    }

    #[test]
    fn train_and_infer_agree() {
        let mut m = UNet7::<f64>::new(UNet7Config { base_filters: 2, ..Default::default() }, 5).unwrap();
        let x = random_tensor(&[1, 4, 8, 8, 8], 9);
        let a = m.forward(&x).unwrap();
        let b = m.predict(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn whole_network_gradient() {
        use crate::tensor::gradcheck::{check_function, GradCheckConfig};
        let cfg = UNet7Config { in_channels: 3, base_filters: 2, ..Default::default() };
        let mut m = UNet7::<f64>::new(cfg, 11).unwrap();
        let x = random_tensor(&[1, 3, 8, 8, 8], 4);
        let r = random_tensor(&[1, 4, 8, 8, 8], 5);
        m.zero_grad();
        m.forward(&x).unwrap();
        let gx = m.backward(&r).unwrap();
        let mut f = |v: &[f64]| {
            let xt = Tensor::from_vec(x.shape(), v.to_vec()).unwrap();
            m.predict(&xt).unwrap().data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        // Thousands of leaky-ReLU and max-pool kinks sit downstream of every
        // input voxel, so the probe step must be small enough not to cross them.
        let rep = check_function("input", &mut f, x.data(), gx.data(), &GradCheckConfig { max_coords: 24, step: 1e-6, ..Default::default() });
        assert!(rep.max_rel_error < 1e-4, "{rep:?}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = UNet7::<f32>::new(UNet7Config { base_filters: 2, ..Default::default() }, 3).unwrap();
        let ck = crate::tensor::checkpoint::Checkpoint::decode(&m.to_checkpoint().encode()).unwrap();
        let m2 = UNet7::<f32>::from_checkpoint(&ck).unwrap();
        let x = random_tensor(&[1, 4, 8, 8, 8], 1).cast::<f32>();
        assert_eq!(m.predict(&x).unwrap(), m2.predict(&x).unwrap());
    }
}
