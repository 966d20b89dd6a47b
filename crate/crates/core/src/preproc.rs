//! Intensity normalization, cropping, slice windows and channel stacking.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::modality::Modality;
use crate::tensor::Tensor;
use crate::volio::Volume3D;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PreprocError {
    #[error("volume has no nonzero voxels")]
    EmptyForeground,
    #[error("crop {size:?} does not fit in {dims:?}")]
    CropTooLarge { size: [usize; 3], dims: [usize; 3] },
    #[error("slice window [{lo}, {hi}) selects no slice of {nz}")]
    EmptyWindow { lo: f64, hi: f64, nz: usize },
    #[error("invalid parameters: {0}")]
    Invalid(String),
    #[error("modality {0} has dims {1:?}, expected {2:?}")]
    DimMismatch(Modality, [usize; 3], [usize; 3]),
    #[error("modality {0} is missing")]
    MissingModality(Modality),
}

pub type Result<T> = std::result::Result<T, PreprocError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormVariant {
    /// `(x - min) / (max - min)`, foreground in `[0, 1]`.
    #[default]
    MinMaxStandard,
    /// `(x - mean) / (max - min)`.
    MinMaxCentered,
    /// `(x - mean) / sigma`.
    ZScore,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizationParams {
    pub x_mean: f64,
    pub x_min: f64,
    pub x_max: f64,
    /// Population standard deviation.
    pub sigma: f64,
    pub variant: NormVariant,
}

/// Statistics over the nonzero voxels of `v`.
pub fn compute_norm_params(v: &Volume3D, variant: NormVariant) -> Result<NormalizationParams> {
    let mut n = 0usize;
    let mut sum = 0.0;
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &x in v.data.iter().filter(|&&x| x != 0.0) {
        let x = x as f64;
        n += 1;
        sum += x;
        lo = lo.min(x);
        hi = hi.max(x);
    }
    if n == 0 {
        return Err(PreprocError::EmptyForeground);
    }
    let mean = sum / n as f64;
    // Two-pass variance.
    let var = v.data.iter().filter(|&&x| x != 0.0).map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n as f64;
    Ok(NormalizationParams { x_mean: mean.clamp(lo, hi), x_min: lo, x_max: hi, sigma: var.sqrt(), variant })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Normalized {
    pub volume: Volume3D,
    /// The scale was zero; the output is all zeros.
    pub degenerate: bool,
}

/// Maps nonzero voxels through the variant's affine formula; zeros stay zero.
pub fn normalize(v: &Volume3D, p: &NormalizationParams) -> Normalized {
    let (shift, scale) = match p.variant {
        NormVariant::MinMaxStandard => (p.x_min, p.x_max - p.x_min),
        NormVariant::MinMaxCentered => (p.x_mean, p.x_max - p.x_min),
        NormVariant::ZScore => (p.x_mean, p.sigma),
    };
    if !(scale > 0.0) {
        return Normalized { volume: v.with_data(vec![0.0; v.len()]), degenerate: true };
    }
    let data = v.data.iter().map(|&x| if x == 0.0 { 0.0 } else { ((x as f64 - shift) / scale) as f32 }).collect();
    Normalized { volume: v.with_data(data), degenerate: false }
}

pub fn normalize_volume(v: &Volume3D, variant: NormVariant) -> Result<Normalized> {
    Ok(normalize(v, &compute_norm_params(v, variant)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    Static([usize; 3]),
    Random(u64),
    /// Minimum foreground fraction the chosen crop must reach.
    Foreground(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    pub size: [usize; 3],
    pub mode: CropMode,
}

impl CropSpec {
    pub fn validate(&self, dims: [usize; 3]) -> Result<()> {
        if self.size.contains(&0) || self.size.iter().zip(&dims).any(|(s, d)| s > d) {
            return Err(PreprocError::CropTooLarge { size: self.size, dims });
        }
        if let CropMode::Foreground(f) = self.mode {
            if !(0.0..=1.0).contains(&f) {
                return Err(PreprocError::Invalid(format!("foreground fraction {f} outside [0, 1]")));
            }
        }
        if let CropMode::Static(o) = self.mode {
            if (0..3).any(|a| o[a] + self.size[a] > dims[a]) {
                return Err(PreprocError::Invalid(format!("origin {o:?} + {:?} exceeds {dims:?}", self.size)));
            }
        }
        Ok(())
    }
}

/// Exhaustive origin searches above this many candidates use a coarse grid.
pub const EXHAUSTIVE_LIMIT: usize = 10_000;
pub const GRID_STRIDE: usize = 8;

/// Inclusive 3D prefix sums of a boolean mask.
struct PrefixSum {
    d: [usize; 3],
    s: Vec<u32>,
}

impl PrefixSum {
    fn new(dims: [usize; 3], mask: &[bool]) -> Self {
        let d = [dims[0] + 1, dims[1] + 1, dims[2] + 1];
        let mut s = vec![0u32; d[0] * d[1] * d[2]];
        let at = |x: usize, y: usize, z: usize| x + d[0] * (y + d[1] * z);
        for z in 1..d[2] {
            for y in 1..d[1] {
                for x in 1..d[0] {
                    let m = mask[(x - 1) + dims[0] * ((y - 1) + dims[1] * (z - 1))] as u32;
                    s[at(x, y, z)] = m + s[at(x - 1, y, z)] + s[at(x, y - 1, z)] + s[at(x, y, z - 1)]
                        - s[at(x - 1, y - 1, z)]
                        - s[at(x - 1, y, z - 1)]
                        - s[at(x, y - 1, z - 1)]
                        + s[at(x - 1, y - 1, z - 1)];
                }
            }
        }
        Self { d, s }
    }

    fn count(&self, o: [usize; 3], size: [usize; 3]) -> u32 {
        let d = self.d;
        let g = |x: usize, y: usize, z: usize| self.s[x + d[0] * (y + d[1] * z)] as i64;
        let [x0, y0, z0] = o;
        let [x1, y1, z1] = [o[0] + size[0], o[1] + size[1], o[2] + size[2]];
        (g(x1, y1, z1) - g(x0, y1, z1) - g(x1, y0, z1) - g(x1, y1, z0) + g(x0, y0, z1) + g(x0, y1, z0) + g(x1, y0, z0)
            - g(x0, y0, z0)) as u32
    }
}

fn axis_candidates(max: usize, coarse: bool) -> Vec<usize> {
    if !coarse {
        return (0..=max).collect();
    }
    let mut v: Vec<usize> = (0..=max).step_by(GRID_STRIDE).collect();
    if *v.last().expect("nonempty") != max {
        v.push(max);
    }
    v
}

fn center_origin(dims: [usize; 3], size: [usize; 3]) -> [usize; 3] {
    [0, 1, 2].map(|a| (dims[a] - size[a]) / 2)
}

/// Origin of the crop with the most foreground voxels. Ties go to the crop
/// whose center is nearest the foreground centroid. Returns the center crop
/// when no candidate reaches `min_fraction` or the mask is empty.
pub fn foreground_origin(dims: [usize; 3], mask: &[bool], size: [usize; 3], min_fraction: f64) -> [usize; 3] {
    let total = mask.iter().filter(|&&m| m).count();
    if total == 0 {
        return center_origin(dims, size);
    }
    let mut centroid = [0.0f64; 3];
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        centroid[0] += (i % dims[0]) as f64;
        centroid[1] += ((i / dims[0]) % dims[1]) as f64;
        centroid[2] += (i / (dims[0] * dims[1])) as f64;
    }
    let centroid = centroid.map(|c| c / total as f64);

    let ps = PrefixSum::new(dims, mask);
    let max = [0, 1, 2].map(|a| dims[a] - size[a]);
    let candidates: usize = max.iter().map(|m| m + 1).product();
    let coarse = candidates > EXHAUSTIVE_LIMIT;
    let (xs, ys, zs) = (axis_candidates(max[0], coarse), axis_candidates(max[1], coarse), axis_candidates(max[2], coarse));
    let dist = |o: [usize; 3]| (0..3).map(|a| (o[a] as f64 + (size[a] as f64 - 1.0) / 2.0 - centroid[a]).powi(2)).sum::<f64>();

    let mut best: Option<([usize; 3], u32, f64)> = None;
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                let o = [x, y, z];
                let c = ps.count(o, size);
                let better = match best {
                    None => true,
                    Some((_, bc, bd)) => c > bc || (c == bc && dist(o) < bd),
                };
                if better {
                    best = Some((o, c, dist(o)));
                }
            }
        }
    }
    let (o, c, _) = best.expect("at least one candidate");
    let volume: usize = size.iter().product();
    if (c as f64) / (volume as f64) < min_fraction {
        return center_origin(dims, size);
    }
    o
}

pub fn crop_origin(dims: [usize; 3], spec: &CropSpec, mask: Option<&[bool]>) -> Result<[usize; 3]> {
    spec.validate(dims)?;
    Ok(match spec.mode {
        CropMode::Static(o) => o,
        CropMode::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            [0, 1, 2].map(|a| rng.random_range(0..=dims[a] - spec.size[a]))
        }
        CropMode::Foreground(f) => match mask {
            Some(m) => foreground_origin(dims, m, spec.size, f),
            None => center_origin(dims, spec.size),
        },
    })
}

/// Copies the box at `origin` of extent `size`.
pub fn crop_at(v: &Volume3D, origin: [usize; 3], size: [usize; 3]) -> Volume3D {
    let mut data = Vec::with_capacity(size.iter().product());
    for z in origin[2]..origin[2] + size[2] {
        for y in origin[1]..origin[1] + size[1] {
            let row = v.index(origin[0], y, z);
            data.extend_from_slice(&v.data[row..row + size[0]]);
        }
    }
    Volume3D { dims: size, spacing: v.spacing, orientation: v.orientation, dtype: v.dtype, data }
}

fn nonzero_mask(v: &Volume3D) -> Vec<bool> {
    v.data.iter().map(|&x| x != 0.0).collect()
}

/// Crops an image and, with the same origin, its label map. Foreground is
/// the nonzero labels when given, else the nonzero intensities.
pub fn crop(v: &Volume3D, spec: &CropSpec, labels: Option<&Volume3D>) -> Result<(Volume3D, Option<Volume3D>)> {
    if let Some(l) = labels {
        if l.dims != v.dims {
            return Err(PreprocError::Invalid(format!("labels {:?} vs image {:?}", l.dims, v.dims)));
        }
    }
    let mask = nonzero_mask(labels.unwrap_or(v));
    let o = crop_origin(v.dims, spec, Some(&mask))?;
    Ok((crop_at(v, o, spec.size), labels.map(|l| crop_at(l, o, spec.size))))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceWindow {
    pub lo: f64,
    pub hi: f64,
}

impl SliceWindow {
    pub const CENTRAL_HALF: SliceWindow = SliceWindow { lo: 0.25, hi: 0.75 };

    /// Half-open slice range `[floor(lo * nz), floor(hi * nz))`.
    pub fn range(&self, nz: usize) -> Result<std::ops::Range<usize>> {
        if !(0.0 <= self.lo && self.lo < self.hi && self.hi <= 1.0) {
            return Err(PreprocError::Invalid(format!("slice window [{}, {})", self.lo, self.hi)));
        }
        let a = (self.lo * nz as f64).floor() as usize;
        let b = ((self.hi * nz as f64).floor() as usize).min(nz);
        if a >= b {
            return Err(PreprocError::EmptyWindow { lo: self.lo, hi: self.hi, nz });
        }
        Ok(a..b)
    }
}

impl Default for SliceWindow {
    fn default() -> Self {
        Self::CENTRAL_HALF
    }
}

pub fn select_slice_window(v: &Volume3D, w: &SliceWindow) -> Result<Volume3D> {
    let r = w.range(v.dims[2])?;
    let plane = v.dims[0] * v.dims[1];
    Ok(Volume3D {
        dims: [v.dims[0], v.dims[1], r.len()],
        spacing: v.spacing,
        orientation: v.orientation,
        dtype: v.dtype,
        data: v.data[r.start * plane..r.end * plane].to_vec(),
    })
}

/// Co-registered channels sharing one grid; channel-major storage.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiChannelVolume {
    pub channels: Vec<Modality>,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub data: Vec<f32>,
}

impl MultiChannelVolume {
    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn channel_data(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel(&self, c: usize) -> Volume3D {
        Volume3D::new(self.dims, self.spacing, self.channel_data(c).to_vec()).expect("consistent geometry")
    }

    pub fn from_channels(channels: Vec<Modality>, vols: &[Volume3D]) -> Self {
        let dims = vols[0].dims;
        let data = vols.iter().flat_map(|v| v.data.iter().copied()).collect();
        Self { channels, dims, spacing: vols[0].spacing, data }
    }

    /// `[1, C, nz, ny, nx]`, the layout the networks consume.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let [nx, ny, nz] = self.dims;
        Tensor::from_vec(&[1, self.num_channels(), nz, ny, nx], self.data.clone()).expect("consistent shape")
    }

    pub fn crop_at(&self, origin: [usize; 3], size: [usize; 3]) -> Self {
        let vols: Vec<Volume3D> = (0..self.num_channels()).map(|c| crop_at(&self.channel(c), origin, size)).collect();
        Self::from_channels(self.channels.clone(), &vols)
    }
}

/// Crops every channel (and the labels) at one origin. Foreground is the
/// nonzero labels when given, else voxels nonzero in any channel.
pub fn crop_multi(
    mc: &MultiChannelVolume,
    spec: &CropSpec,
    labels: Option<&Volume3D>,
) -> Result<(MultiChannelVolume, Option<Volume3D>)> {
    let mask: Vec<bool> = match labels {
        Some(l) => nonzero_mask(l),
        None => (0..mc.voxels()).map(|i| (0..mc.num_channels()).any(|c| mc.channel_data(c)[i] != 0.0)).collect(),
    };
    let o = crop_origin(mc.dims, spec, Some(&mask))?;
    Ok((mc.crop_at(o, spec.size), labels.map(|l| crop_at(l, o, spec.size))))
}

pub fn stack_modalities(vols: &BTreeMap<Modality, Volume3D>, order: &[Modality]) -> Result<MultiChannelVolume> {
    let mut picked = Vec::with_capacity(order.len());
    for &m in order {
        picked.push(vols.get(&m).ok_or(PreprocError::MissingModality(m))?.clone());
    }
    let Some(first) = picked.first() else {
        return Err(PreprocError::Invalid("empty channel order".into()));
    };
    let dims = first.dims;
    for (m, v) in order.iter().zip(&picked) {
        if v.dims != dims {
            return Err(PreprocError::DimMismatch(*m, v.dims, dims));
        }
    }
    Ok(MultiChannelVolume::from_channels(order.to_vec(), &picked))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(dims: [usize; 3], data: Vec<f32>) -> Volume3D {
        Volume3D::new(dims, [1.0; 3], data).unwrap()
    }

    #[test]
    fn stats_of_three_values() {
        let v = vol([5, 1, 1], vec![0.0, 2.0, 4.0, 0.0, 6.0]);
        let p = compute_norm_params(&v, NormVariant::ZScore).unwrap();
        assert_eq!((p.x_mean, p.x_min, p.x_max), (4.0, 2.0, 6.0));
        assert!((p.sigma - (8.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn hand_normalizations() {
        let v = vol([4, 1, 1], vec![2.0, 0.0, 4.0, 6.0]);
        let std = normalize_volume(&v, NormVariant::MinMaxStandard).unwrap().volume.data;
        assert_eq!(std, vec![0.0, 0.0, 0.5, 1.0]);
        let centered = normalize_volume(&v, NormVariant::MinMaxCentered).unwrap().volume.data;
        assert_eq!(centered, vec![-0.5, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn degenerate_and_empty() {
        let c = vol([3, 1, 1], vec![5.0, 5.0, 0.0]);
        let p = compute_norm_params(&c, NormVariant::MinMaxStandard).unwrap();
        assert_eq!((p.x_min, p.x_max, p.sigma), (5.0, 5.0, 0.0));
        let n = normalize(&c, &p);
        assert!(n.degenerate);
        assert!(n.volume.data.iter().all(|&x| x == 0.0));
        assert_eq!(compute_norm_params(&vol([2, 1, 1], vec![0.0; 2]), NormVariant::ZScore), Err(PreprocError::EmptyForeground));
    }

    #[test]
    fn slice_window_rule() {
        let w = SliceWindow::CENTRAL_HALF;
        assert_eq!(w.range(100).unwrap(), 25..75);
        assert_eq!(w.range(3).unwrap(), 0..2);
        assert_eq!(SliceWindow { lo: 0.0, hi: 1.0 }.range(7).unwrap(), 0..7);
        assert!(matches!(SliceWindow { lo: 0.5, hi: 0.6 }.range(2), Err(PreprocError::EmptyWindow { .. })));
        assert!(SliceWindow { lo: 0.6, hi: 0.5 }.range(10).is_err());
        let v = vol([1, 1, 100], (0..100).map(|i| i as f32).collect());
        let s = select_slice_window(&v, &w).unwrap();
        assert_eq!(s.data.first(), Some(&25.0));
        assert_eq!(s.data.last(), Some(&74.0));
    }

    #[test]
    fn brats_sized_crops() {
        let dims = [240, 240, 155];
        let mut v = Volume3D::zeros(dims);
        for z in 40..120 {
            for y in 50..200 {
                for x in 60..180 {
                    let i = v.index(x, y, z);
                    v.data[i] = 1.0;
                }
            }
        }
        for size in [[128, 128, 128], [192, 192, 128]] {
            let (c, _) = crop(&v, &CropSpec { size, mode: CropMode::Foreground(0.0) }, None).unwrap();
            assert_eq!(c.dims, size);
        }
        assert!(matches!(
            crop(&v, &CropSpec { size: [128, 128, 160], mode: CropMode::Random(1) }, None),
            Err(PreprocError::CropTooLarge { .. })
        ));
    }

    #[test]
    fn unreachable_fraction_falls_back_to_center() {
        let mut mask = vec![false; 10 * 10 * 10];
        mask[0] = true;
        assert_eq!(foreground_origin([10, 10, 10], &mask, [4, 4, 4], 0.5), [3, 3, 3]);
        assert_eq!(foreground_origin([10, 10, 10], &mask, [4, 4, 4], 0.0), [0, 0, 0]);
    }

    #[test]
    fn random_crop_is_seeded() {
        let spec = CropSpec { size: [3, 3, 3], mode: CropMode::Random(9) };
        let a = crop_origin([10, 12, 14], &spec, None).unwrap();
        assert_eq!(a, crop_origin([10, 12, 14], &spec, None).unwrap());
        assert!(a[0] <= 7 && a[1] <= 9 && a[2] <= 11);
    }

    #[test]
    fn stacking_order_and_errors() {
        let mut m = BTreeMap::new();
        for (i, md) in Modality::ALL.iter().enumerate() {
            m.insert(*md, vol([2, 2, 2], vec![i as f32; 8]));
        }
        let mc = stack_modalities(&m, &Modality::THREE_CHANNEL).unwrap();
        assert_eq!(mc.num_channels(), 3);
        assert_eq!(mc.channel(0).data[0], 1.0);
        assert_eq!(mc.to_tensor().shape(), &[1, 3, 2, 2, 2]);
        m.insert(Modality::T2, vol([2, 2, 1], vec![0.0; 4]));
        assert!(matches!(stack_modalities(&m, &Modality::ALL), Err(PreprocError::DimMismatch(Modality::T2, ..))));
        m.remove(&Modality::T1);
        assert_eq!(stack_modalities(&m, &Modality::ALL), Err(PreprocError::MissingModality(Modality::T1)));
    }
}
