//! Geometric and intensity augmentation: flips, 90° rotations, anisotropic
//! stretch, Gaussian noise and Gaussian blur.
//!
//! Geometric transforms are applied identically to every image channel and
//! to the label map (nearest neighbour for labels); intensity transforms
//! touch image channels only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::preproc::MultiChannelVolume;
use crate::volio::Volume3D;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interp {
    Trilinear,
    Nearest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    /// Flip probability per axis (x, y, z).
    pub flip_prob: [f64; 3],
    /// Planes for 90° rotations, each rotated with `rot90_prob` by a
    /// uniformly drawn quarter-turn count in 1..=3.
    pub rot90_planes: Vec<(usize, usize)>,
    pub rot90_prob: f64,
    pub stretch_prob: f64,
    /// Per-axis stretch factors are drawn uniformly from this range.
    pub stretch_range: (f64, f64),
    pub noise_prob: f64,
    pub noise_sigma: f64,
    pub blur_prob: f64,
    pub blur_sigma: f64,
    pub seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            flip_prob: [0.5; 3],
            rot90_planes: vec![(0, 1)],
            rot90_prob: 0.5,
            stretch_prob: 0.5,
            stretch_range: (0.9, 1.1),
            noise_prob: 0.5,
            noise_sigma: 0.01,
            blur_prob: 0.5,
            blur_sigma: 0.5,
            seed: 0,
        }
    }
}

impl AugmentPolicy {
    /// All probabilities zero: `apply` returns its input.
    pub fn identity() -> Self {
        Self {
            flip_prob: [0.0; 3],
            rot90_planes: Vec::new(),
            rot90_prob: 0.0,
            stretch_prob: 0.0,
            stretch_range: (1.0, 1.0),
            noise_prob: 0.0,
            noise_sigma: 0.0,
            blur_prob: 0.0,
            blur_sigma: 0.0,
            seed: 0,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), String> {
        let probs = self.flip_prob.iter().chain([&self.rot90_prob, &self.stretch_prob, &self.noise_prob, &self.blur_prob]);
        if probs.into_iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err("probabilities must lie in [0, 1]".into());
        }
        let (lo, hi) = self.stretch_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(format!("stretch range ({lo}, {hi}) needs 0 < min <= max"));
        }
        if !(self.noise_sigma >= 0.0 && self.blur_sigma >= 0.0) {
            return Err("sigmas must be non-negative".into());
        }
        if self.rot90_planes.iter().any(|&(a, b)| a > 2 || b > 2 || a == b) {
            return Err("rotation planes need two distinct axes in 0..3".into());
        }
        Ok(())
    }
}

/// Output `(x, y, z)` position to the source position.
fn remap(v: &Volume3D, out_dims: [usize; 3], src: impl Fn([usize; 3]) -> [usize; 3]) -> Volume3D {
    let mut data = Vec::with_capacity(out_dims.iter().product());
    for z in 0..out_dims[2] {
        for y in 0..out_dims[1] {
            for x in 0..out_dims[0] {
                let [i, j, k] = src([x, y, z]);
                data.push(v.get(i, j, k));
            }
        }
    }
    Volume3D { dims: out_dims, spacing: v.spacing, orientation: v.orientation, dtype: v.dtype, data }
}

pub fn flip(v: &Volume3D, axis: usize) -> Volume3D {
    let n = v.dims[axis];
    remap(v, v.dims, |mut c| {
        c[axis] = n - 1 - c[axis];
        c
    })
}

/// One quarter turn in the `(a, b)` plane: `out[a] = n_b - 1 - in[b]`, `out[b] = in[a]`.
pub fn rot90(v: &Volume3D, a: usize, b: usize) -> Volume3D {
    let mut dims = v.dims;
    dims.swap(a, b);
    let nb = v.dims[b];
    let mut out = remap(v, dims, |o| {
        let mut s = o;
        s[a] = o[b];
        s[b] = nb - 1 - o[a];
        s
    });
    out.spacing.swap(a, b);
    out
}

/// Resamples onto `out_dims` with voxel centers aligned.
pub fn resample(v: &Volume3D, out_dims: [usize; 3], interp: Interp) -> Volume3D {
    if out_dims == v.dims {
        return v.clone();
    }
    let axis = |a: usize| -> Vec<(usize, usize, f64)> {
        let (n_in, n_out) = (v.dims[a], out_dims[a]);
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|i| {
                let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                match interp {
                    Interp::Nearest => {
                        let r = (s + 0.5).floor() as usize;
                        (r.min(n_in - 1), r.min(n_in - 1), 0.0)
                    }
                    Interp::Trilinear => {
                        let lo = s.floor() as usize;
                        let hi = (lo + 1).min(n_in - 1);
                        (lo, hi, s - lo as f64)
                    }
                }
            })
            .collect()
    };
    let (ax, ay, az) = (axis(0), axis(1), axis(2));
    let mut data = Vec::with_capacity(out_dims.iter().product());
    for &(z0, z1, tz) in &az {
        for &(y0, y1, ty) in &ay {
            for &(x0, x1, tx) in &ax {
                let val = match interp {
                    Interp::Nearest => v.get(x0, y0, z0),
                    Interp::Trilinear => {
                        let g = |x, y, z| v.get(x, y, z) as f64;
                        let lerp = |p: f64, q: f64, t: f64| (1.0 - t) * p + t * q;
                        let c00 = lerp(g(x0, y0, z0), g(x1, y0, z0), tx);
                        let c10 = lerp(g(x0, y1, z0), g(x1, y1, z0), tx);
                        let c01 = lerp(g(x0, y0, z1), g(x1, y0, z1), tx);
                        let c11 = lerp(g(x0, y1, z1), g(x1, y1, z1), tx);
                        lerp(lerp(c00, c10, ty), lerp(c01, c11, ty), tz) as f32
                    }
                };
                data.push(val);
            }
        }
    }
    let spacing = [0, 1, 2].map(|a| v.spacing[a] * v.dims[a] as f64 / out_dims[a] as f64);
    Volume3D { dims: out_dims, spacing, orientation: v.orientation, dtype: v.dtype, data }
}

pub fn stretched_dims(dims: [usize; 3], factors: [f64; 3]) -> [usize; 3] {
    [0, 1, 2].map(|a| ((dims[a] as f64 * factors[a]).round() as usize).max(1))
}

/// Scales each axis by its factor; output length `round(n * f)`, at least 1.
pub fn stretch(v: &Volume3D, factors: [f64; 3], interp: Interp) -> Volume3D {
    resample(v, stretched_dims(v.dims, factors), interp)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|x| x / s).collect()
}

/// Separable Gaussian blur, radius `ceil(3 sigma)`, edge-clamped.
pub fn gaussian_blur(v: &Volume3D, sigma: f64) -> Volume3D {
    if sigma <= 0.0 {
        return v.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let mut cur: Vec<f64> = v.data.iter().map(|&x| x as f64).collect();
    let d = v.dims;
    let strides = [1, d[0], d[0] * d[1]];
    for a in 0..3 {
        let n = d[a] as i64;
        let mut next = vec![0.0; cur.len()];
        for (idx, out) in next.iter_mut().enumerate() {
            let pos = ((idx / strides[a]) % d[a]) as i64;
            let base = idx as i64 - pos * strides[a] as i64;
            *out = k
                .iter()
                .enumerate()
                .map(|(t, w)| {
                    let p = (pos + t as i64 - r).clamp(0, n - 1);
                    w * cur[(base + p * strides[a] as i64) as usize]
                })
                .sum();
        }
        cur = next;
    }
    v.with_data(cur.into_iter().map(|x| x as f32).collect())
}

pub fn add_noise(v: &Volume3D, sigma: f64, rng: &mut ChaCha8Rng) -> Volume3D {
    if sigma <= 0.0 {
        return v.clone();
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    v.with_data(v.data.iter().map(|&x| x + normal.sample(rng) as f32).collect())
}

fn map_channels(mc: &MultiChannelVolume, f: impl Fn(&Volume3D) -> Volume3D) -> MultiChannelVolume {
    let vols: Vec<Volume3D> = (0..mc.num_channels()).map(|c| f(&mc.channel(c))).collect();
    MultiChannelVolume::from_channels(mc.channels.clone(), &vols)
}

/// Applies the policy with its seed. Stretch factors are raised where
/// needed so each output axis is at least `min_dims`.
pub fn apply(
    policy: &AugmentPolicy,
    image: &MultiChannelVolume,
    labels: Option<&Volume3D>,
    min_dims: Option<[usize; 3]>,
) -> (MultiChannelVolume, Option<Volume3D>) {
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    let mut img = image.clone();
    let mut lab = labels.cloned();

    // Draw everything up front so the random stream does not depend on outcomes.
    let flips: Vec<bool> = policy.flip_prob.iter().map(|&p| rng.random::<f64>() < p).collect();
    let rots: Vec<usize> = policy
        .rot90_planes
        .iter()
        .map(|_| {
            let hit = rng.random::<f64>() < policy.rot90_prob;
            let k = rng.random_range(1..=3usize);
            if hit { k } else { 0 }
        })
        .collect();
    let do_stretch = rng.random::<f64>() < policy.stretch_prob;
    let (lo, hi) = policy.stretch_range;
    let mut factors = [0, 1, 2].map(|_| if hi > lo { rng.random_range(lo..=hi) } else { lo });
    let do_noise = rng.random::<f64>() < policy.noise_prob;
    let do_blur = rng.random::<f64>() < policy.blur_prob;
    let noise_seed: u64 = rng.random();

    for (axis, &f) in flips.iter().enumerate() {
        if f {
            img = map_channels(&img, |v| flip(v, axis));
            lab = lab.map(|l| flip(&l, axis));
        }
    }
    for (&(a, b), &k) in policy.rot90_planes.iter().zip(&rots) {
        for _ in 0..k {
            img = map_channels(&img, |v| rot90(v, a, b));
            lab = lab.map(|l| rot90(&l, a, b));
        }
    }
    if do_stretch {
        if let Some(m) = min_dims {
            for a in 0..3 {
                factors[a] = factors[a].max(m[a] as f64 / img.dims[a] as f64);
            }
        }
        if factors != [1.0; 3] {
            img = map_channels(&img, |v| stretch(v, factors, Interp::Trilinear));
            lab = lab.map(|l| stretch(&l, factors, Interp::Nearest));
        }
    }
    if do_noise && policy.noise_sigma > 0.0 {
        let mut nrng = ChaCha8Rng::seed_from_u64(noise_seed);
        let vols: Vec<Volume3D> = (0..img.num_channels()).map(|c| add_noise(&img.channel(c), policy.noise_sigma, &mut nrng)).collect();
        img = MultiChannelVolume::from_channels(img.channels.clone(), &vols);
    }
    if do_blur && policy.blur_sigma > 0.0 {
        img = map_channels(&img, |v| gaussian_blur(v, policy.blur_sigma));
    }
    (img, lab)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(dims: [usize; 3]) -> Volume3D {
        let n: usize = dims.iter().product();
        Volume3D::new(dims, [1.0, 1.5, 2.0], (0..n).map(|i| (i * 7 % 11) as f32).collect()).unwrap()
    }

    #[test]
    fn flip_is_an_involution() {
        let v = ramp([3, 4, 5]);
        for a in 0..3 {
            assert_eq!(flip(&flip(&v, a), a), v);
            assert_ne!(flip(&v, a), v);
        }
    }

    #[test]
    fn four_quarter_turns() {
        let v = ramp([3, 4, 5]);
        for (a, b) in [(0, 1), (1, 2), (0, 2)] {
            let mut r = v.clone();
            for _ in 0..4 {
                r = rot90(&r, a, b);
            }
            assert_eq!(r, v);
            let once = rot90(&v, a, b);
            assert_eq!(once.dims[a], v.dims[b]);
        }
    }

    #[test]
    fn nearest_doubling_replicates_blocks() {
        let v = Volume3D::new([2, 2, 2], [1.0; 3], (1..=8).map(|i| i as f32).collect()).unwrap();
        let s = stretch(&v, [2.0; 3], Interp::Nearest);
        assert_eq!(s.dims, [4, 4, 4]);
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    assert_eq!(s.get(x, y, z), v.get(x / 2, y / 2, z / 2));
                }
            }
        }
    }

    #[test]
    fn unit_stretch_is_bitwise_identity() {
        let v = ramp([5, 3, 4]);
        assert_eq!(stretch(&v, [1.0; 3], Interp::Trilinear), v);
    }

    #[test]
    fn trilinear_stays_in_range() {
        let v = ramp([5, 6, 7]);
        let s = stretch(&v, [1.37, 0.61, 1.9], Interp::Trilinear);
        let (lo, hi) = v.data.iter().fold((f32::MAX, f32::MIN), |(a, b), &x| (a.min(x), b.max(x)));
        assert!(s.data.iter().all(|&x| x >= lo && x <= hi));
        assert_eq!(s.dims, [7, 4, 13]);
    }

    #[test]
    fn blur_preserves_constants_and_mass_center() {
        let v = Volume3D::new([6, 6, 6], [1.0; 3], vec![3.0; 216]).unwrap();
        assert!(gaussian_blur(&v, 0.8).data.iter().all(|&x| (x - 3.0).abs() < 1e-5));
        assert_eq!(gaussian_kernel(0.5).len(), 5);
    }

    #[test]
    fn neutral_policy_is_identity() {
        let img = MultiChannelVolume::from_channels(vec![crate::modality::Modality::T1], &[ramp([4, 4, 4])]);
        let lab = ramp([4, 4, 4]);
        let (i, l) = apply(&AugmentPolicy::identity(), &img, Some(&lab), None);
        assert_eq!(i, img);
        assert_eq!(l.unwrap(), lab);
    }

    #[test]
    fn stretch_respects_min_dims() {
        let policy = AugmentPolicy { stretch_prob: 1.0, stretch_range: (0.5, 0.6), ..AugmentPolicy::identity() };
        let img = MultiChannelVolume::from_channels(vec![crate::modality::Modality::T1], &[ramp([10, 10, 10])]);
        let (i, _) = apply(&policy, &img, None, Some([8, 8, 8]));
        assert_eq!(i.dims, [8, 8, 8]);
    }
}
