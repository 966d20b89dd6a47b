//! Single-channel 3D residual classifier producing one methylation logit.

use serde::{Deserialize, Serialize};

use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::init::SeedSeq;
use crate::tensor::layers::{Conv3d, GlobalAvgPool, InstanceNorm3d, Layer, LeakyRelu, Linear};
use crate::tensor::{Param, Real, Tensor, TensorError};

use super::{ModelError, Result};

pub const CLASSIFIER_ARCH: &str = "resclassifier3d";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResClassifierConfig {
    pub in_channels: usize,
    /// Residual blocks per stage; stage `s` has `base_filters << s` channels
    /// and every stage after the first halves the resolution.
    pub blocks_per_stage: Vec<usize>,
    pub base_filters: usize,
    pub stem_stride: usize,
    /// Depth, height, width every input is resized to.
    pub input_size: [usize; 3],
}

impl Default for ResClassifierConfig {
    fn default() -> Self {
        Self { in_channels: 1, blocks_per_stage: vec![1, 1, 1, 1], base_filters: 8, stem_stride: 2, input_size: [64, 256, 256] }
    }
}

impl ResClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.base_filters == 0 || self.stem_stride == 0 {
            return Err(ModelError::Config("in_channels, base_filters, stem_stride must be >= 1".into()));
        }
        if self.blocks_per_stage.is_empty() || self.blocks_per_stage.contains(&0) {
            return Err(ModelError::Config("every stage needs at least one block".into()));
        }
        if self.input_size.contains(&0) {
            return Err(ModelError::Config("input_size must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ResBlock<T: Real> {
    conv1: Conv3d<T>,
    norm1: InstanceNorm3d<T>,
    act1: LeakyRelu<T>,
    conv2: Conv3d<T>,
    norm2: InstanceNorm3d<T>,
    shortcut: Option<(Conv3d<T>, InstanceNorm3d<T>)>,
    act_out: LeakyRelu<T>,
}

impl<T: Real> ResBlock<T> {
    fn new(name: &str, cin: usize, cout: usize, stride: usize, seeds: &mut SeedSeq) -> Self {
        let conv1 = Conv3d::new(&format!("{name}.conv1"), cin, cout, 3, stride, 1, seeds.next_seed());
        let conv2 = Conv3d::new(&format!("{name}.conv2"), cout, cout, 3, 1, 1, seeds.next_seed());
        let shortcut = (cin != cout || stride != 1).then(|| {
            (
                Conv3d::new(&format!("{name}.proj"), cin, cout, 1, stride, 0, seeds.next_seed()),
                InstanceNorm3d::new(&format!("{name}.proj_norm"), cout),
            )
        });
        Self {
            conv1,
            norm1: InstanceNorm3d::new(&format!("{name}.norm1"), cout),
            act1: LeakyRelu::relu(),
            conv2,
            norm2: InstanceNorm3d::new(&format!("{name}.norm2"), cout),
            shortcut,
            act_out: LeakyRelu::relu(),
        }
    }

    fn forward(&mut self, x: &Tensor<T>) -> crate::tensor::Result<Tensor<T>> {
        let h = self.act1.forward(&self.norm1.forward(&self.conv1.forward(x)?)?)?;
        let mut h = self.norm2.forward(&self.conv2.forward(&h)?)?;
        match &mut self.shortcut {
            Some((c, n)) => h.add_assign(&n.forward(&c.forward(x)?)?)?,
            None => h.add_assign(x)?,
        }
        self.act_out.forward(&h)
    }

    fn infer(&self, x: &Tensor<T>) -> crate::tensor::Result<Tensor<T>> {
        let h = self.act1.infer(&self.norm1.infer(&self.conv1.infer(x)?)?)?;
        let mut h = self.norm2.infer(&self.conv2.infer(&h)?)?;
        match &self.shortcut {
            Some((c, n)) => h.add_assign(&n.infer(&c.infer(x)?)?)?,
            None => h.add_assign(x)?,
        }
        self.act_out.infer(&h)
    }

    fn backward(&mut self, g: &Tensor<T>) -> crate::tensor::Result<Tensor<T>> {
        let g = self.act_out.backward(g)?;
        let gh = self.norm2.backward(&g)?;
        let gh = self.conv2.backward(&gh)?;
        let gh = self.act1.backward(&gh)?;
        let gh = self.norm1.backward(&gh)?;
        let mut gx = self.conv1.backward(&gh)?;
        match &mut self.shortcut {
            Some((c, n)) => gx.add_assign(&c.backward(&n.backward(&g)?)?)?,
            None => gx.add_assign(&g)?,
        }
        Ok(gx)
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.conv1.params();
        v.extend(self.norm1.params());
        v.extend(self.conv2.params());
        v.extend(self.norm2.params());
        if let Some((c, n)) = &self.shortcut {
            v.extend(c.params());
            v.extend(n.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.conv1.params_mut();
        v.extend(self.norm1.params_mut());
        v.extend(self.conv2.params_mut());
        v.extend(self.norm2.params_mut());
        if let Some((c, n)) = &mut self.shortcut {
            v.extend(c.params_mut());
            v.extend(n.params_mut());
        }
        v
    }
}

#[derive(Clone, Debug)]
pub struct ResClassifier3D<T: Real = f32> {
    config: ResClassifierConfig,
    stem: Conv3d<T>,
    stem_norm: InstanceNorm3d<T>,
    stem_act: LeakyRelu<T>,
    blocks: Vec<ResBlock<T>>,
    pool: GlobalAvgPool,
    fc: Linear<T>,
}

impl<T: Real> ResClassifier3D<T> {
    pub fn new(config: ResClassifierConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut seeds = SeedSeq::new(seed);
        let b = config.base_filters;
        let stem = Conv3d::new("stem", config.in_channels, b, 3, config.stem_stride, 1, seeds.next_seed());
        let mut blocks = Vec::new();
        let mut cin = b;
        for (s, &n) in config.blocks_per_stage.iter().enumerate() {
            let cout = b << s;
            for i in 0..n {
                let stride = if s > 0 && i == 0 { 2 } else { 1 };
                blocks.push(ResBlock::new(&format!("stage{s}.block{i}"), cin, cout, stride, &mut seeds));
                cin = cout;
            }
        }
        let fc = Linear::new("fc", cin, 1, seeds.next_seed());
        Ok(Self {
            config,
            stem,
            stem_norm: InstanceNorm3d::new("stem_norm", b),
            stem_act: LeakyRelu::relu(),
            blocks,
            pool: GlobalAvgPool::default(),
            fc,
        })
    }

    pub fn config(&self) -> &ResClassifierConfig {
        &self.config
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [_, c, ..] = x.dims5()?;
        if c != self.config.in_channels {
            return Err(TensorError::ShapeMismatch(format!("expected {} channels, got {}", self.config.in_channels, c)).into());
        }
        Ok(())
    }

    /// Training forward pass: `[N, C, D, H, W] -> [N, 1]` logits.
    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = self.stem_act.forward(&self.stem_norm.forward(&self.stem.forward(x)?)?)?;
        for b in &mut self.blocks {
            h = b.forward(&h)?;
        }
        Ok(self.fc.forward(&self.pool.forward(&h)?)?)
    }

    pub fn backward(&mut self, grad_logit: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = self.pool.backward(&self.fc.backward(grad_logit)?)?;
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g)?;
        }
        Ok(self.stem.backward(&self.stem_norm.backward(&self.stem_act.backward(&g)?)?)?)
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = self.stem_act.infer(&self.stem_norm.infer(&self.stem.infer(x)?)?)?;
        for b in &self.blocks {
            h = b.infer(&h)?;
        }
        Ok(self.fc.infer(&self.pool.infer(&h)?)?)
    }

    /// Logit of a single `[1, C, D, H, W]` input.
    pub fn logit(&self, x: &Tensor<T>) -> Result<f64> {
        Ok(self.predict(x)?.data()[0].as_f64())
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = self.stem.params();
        v.extend(self.stem_norm.params());
        for b in &self.blocks {
            v.extend(b.params());
        }
        v.extend(self.fc.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = self.stem.params_mut();
        v.extend(self.stem_norm.params_mut());
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v.extend(self.fc.params_mut());
        v
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.zero_grad());
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let cfg = serde_json::to_string(&self.config).expect("config serializes");
        Checkpoint::from_params(CLASSIFIER_ARCH, cfg, self.params())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.arch != CLASSIFIER_ARCH {
            return Err(ModelError::Config(format!("checkpoint holds {}, not {}", ck.arch, CLASSIFIER_ARCH)));
        }
        let config: ResClassifierConfig = serde_json::from_str(&ck.config).map_err(|e| ModelError::Config(e.to_string()))?;
        let mut model = Self::new(config, 0)?;
        ck.load_into(model.params_mut())?;
        Ok(model)
    }
}
