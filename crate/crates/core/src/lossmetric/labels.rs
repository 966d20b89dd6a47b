//! Raw BraTS labels {0, 1, 2, 4}, their dense indices, and the nested
//! evaluation regions.

use serde::{Deserialize, Serialize};

use super::{MetricError, Result};
use crate::tensor::{Real, Tensor};
use crate::volio::{Dtype, Volume3D};

pub const RAW_LABELS: [u8; 4] = [0, 1, 2, 4];
pub const NUM_CLASSES: usize = 4;

pub fn dense_of(raw: u8) -> Option<u8> {
    match raw {
        0 => Some(0),
        1 => Some(1),
        2 => Some(2),
        4 => Some(3),
        _ => None,
    }
}

pub fn raw_of(dense: u8) -> u8 {
    RAW_LABELS[dense as usize]
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionSource {
    /// Tumor core is labels {2, 4}.
    #[default]
    EdemaPlusEnhancing,
    /// Tumor core is labels {1, 4}.
    StandardBrats,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Et,
    Tc,
    Wt,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Et, Region::Tc, Region::Wt];

    pub fn labels(self, source: RegionSource) -> &'static [u8] {
        match (self, source) {
            (Region::Et, _) => &[4],
            (Region::Tc, RegionSource::EdemaPlusEnhancing) => &[2, 4],
            (Region::Tc, RegionSource::StandardBrats) => &[1, 4],
            (Region::Wt, _) => &[1, 2, 4],
        }
    }

    pub fn contains(self, source: RegionSource, raw: u8) -> bool {
        self.labels(source).contains(&raw)
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::Et => "et",
            Region::Tc => "tc",
            Region::Wt => "wt",
        }
    }
}

/// Raw label values as bytes, rejecting anything outside {0, 1, 2, 4}.
pub fn raw_labels(v: &Volume3D) -> Result<Vec<u8>> {
    v.data
        .iter()
        .map(|&x| match x {
            0.0 => Ok(0),
            1.0 => Ok(1),
            2.0 => Ok(2),
            4.0 => Ok(4),
            other => Err(MetricError::IllegalLabel(other)),
        })
        .collect()
}

pub fn to_dense(v: &Volume3D) -> Result<Vec<u8>> {
    Ok(raw_labels(v)?.into_iter().map(|r| dense_of(r).expect("validated")).collect())
}

/// `[1, classes, nz, ny, nx]` one-hot encoding of dense labels.
pub fn one_hot<T: Real>(dense: &[u8], dims: [usize; 3], classes: usize) -> Tensor<T> {
    let n = dense.len();
    let mut data = vec![T::zero(); classes * n];
    for (i, &d) in dense.iter().enumerate() {
        data[d as usize * n + i] = T::one();
    }
    Tensor::from_vec(&[1, classes, dims[2], dims[1], dims[0]], data).expect("consistent shape")
}

/// Label volume (stored as `u8`) from dense class indices.
pub fn raw_volume(dense: &[u8], like: &Volume3D) -> Volume3D {
    let mut v = like.with_data(dense.iter().map(|&d| raw_of(d) as f32).collect());
    v.dtype = Dtype::U8;
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_map_is_a_bijection() {
        for (i, r) in RAW_LABELS.iter().enumerate() {
            assert_eq!(dense_of(*r), Some(i as u8));
            assert_eq!(raw_of(i as u8), *r);
        }
        assert_eq!(dense_of(3), None);
    }

    #[test]
    fn regions() {
        assert_eq!(Region::Tc.labels(RegionSource::EdemaPlusEnhancing), &[2, 4]);
        assert_eq!(Region::Tc.labels(RegionSource::StandardBrats), &[1, 4]);
        assert!(Region::Wt.contains(RegionSource::EdemaPlusEnhancing, 1));
        assert!(!Region::Et.contains(RegionSource::EdemaPlusEnhancing, 2));
    }

    #[test]
    fn illegal_label() {
        let v = Volume3D::new([2, 1, 1], [1.0; 3], vec![0.0, 3.0]).unwrap();
        assert_eq!(raw_labels(&v), Err(MetricError::IllegalLabel(3.0)));
    }
}
