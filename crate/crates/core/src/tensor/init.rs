//! Deterministic He-uniform initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Real, Tensor};

/// Seed material for one layer: the run seed and the layer's index in
/// construction order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSeed {
    pub run: u64,
    pub index: u64,
}

impl LayerSeed {
    pub fn new(run: u64, index: u64) -> Self {
        Self { run, index }
    }

    pub fn rng(self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.run);
        rng.set_stream(self.index);
        rng
    }
}

/// Hands out consecutive layer indices.
#[derive(Debug)]
pub struct SeedSeq {
    run: u64,
    next: u64,
}

impl SeedSeq {
    pub fn new(run: u64) -> Self {
        Self { run, next: 0 }
    }

    pub fn next_seed(&mut self) -> LayerSeed {
        let s = LayerSeed::new(self.run, self.next);
        self.next += 1;
        s
    }
}

/// Uniform on `[-sqrt(6 / fan_in), sqrt(6 / fan_in)]`.
pub fn he_uniform<T: Real>(shape: &[usize], fan_in: usize, seed: LayerSeed) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let mut rng = seed.rng();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
    Tensor::from_vec(shape, data).expect("init shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_weights_and_bounded() {
        let a: Tensor<f32> = he_uniform(&[4, 3, 3, 3, 3], 81, LayerSeed::new(7, 2));
        let b: Tensor<f32> = he_uniform(&[4, 3, 3, 3, 3], 81, LayerSeed::new(7, 2));
        let c: Tensor<f32> = he_uniform(&[4, 3, 3, 3, 3], 81, LayerSeed::new(7, 3));
        assert_eq!(a, b);
        assert_ne!(a, c);
        let bound = (6.0f32 / 81.0).sqrt();
        assert!(a.data().iter().all(|v| v.abs() <= bound));
    }
}
