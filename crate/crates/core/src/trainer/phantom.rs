//! Synthetic brain phantoms with known geometry.
//!
//! A skull-stripped ellipsoidal brain holds a nested tumor: necrotic core
//! (label 1) inside an enhancing rim (label 4) inside an edema halo
//! (label 2). Each modality gives the tissues different contrasts. When
//! `mgmt = 1`, the whole tumor carries a high-frequency ripple, which is the
//! only thing separating the two classes.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{derive_seed, CaseRecord};
use crate::modality::Modality;
use crate::volio::{Dtype, Volume3D};

/// Base intensities per tissue (brain, edema, rim, core) for T1, T1ce,
/// T2 and FLAIR, in modality order.
const CONTRAST: [[f64; 4]; 4] = [
    // brain, edema, rim, core
    [0.60, 0.50, 0.55, 0.30],
    [0.55, 0.50, 1.00, 0.25],
    [0.45, 0.85, 0.60, 0.90],
    [0.50, 0.95, 0.70, 0.40],
];
const SCALE: f64 = 1000.0;
const NOISE_SIGMA: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub modalities: Vec<Modality>,
    /// Drawn from the seed when `None`.
    pub mgmt: Option<u8>,
    /// Ripple amplitude relative to a unit-contrast tissue.
    pub ripple: f64,
    pub spacing: [f64; 3],
}

impl PhantomSpec {
    pub fn new(dims: [usize; 3]) -> Self {
        Self { dims, modalities: Modality::ALL.to_vec(), mgmt: None, ripple: 0.3, spacing: [1.0; 3] }
    }

    pub fn cube(n: usize) -> Self {
        Self::new([n; 3])
    }
}

/// Construction parameters, in voxel units.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomGeometry {
    pub brain_center: [f64; 3],
    pub brain_radii: [f64; 3],
    pub tumor_center: [f64; 3],
    pub edema_radii: [f64; 3],
    pub rim_radii: [f64; 3],
    pub core_radii: [f64; 3],
}

impl PhantomGeometry {
    /// Inclusive voxel bounds of the enhancing rim's outer ellipsoid.
    pub fn tumor_bbox(&self) -> ([f64; 3], [f64; 3]) {
        let lo = std::array::from_fn(|a| self.tumor_center[a] - self.rim_radii[a]);
        let hi = std::array::from_fn(|a| self.tumor_center[a] + self.rim_radii[a]);
        (lo, hi)
    }
}

fn ellipsoid_r2(p: [f64; 3], c: [f64; 3], r: [f64; 3]) -> f64 {
    (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum()
}

fn draw_geometry(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> PhantomGeometry {
    let n: [f64; 3] = dims.map(|d| d as f64);
    let brain_center = std::array::from_fn(|a| (n[a] - 1.0) / 2.0 + rng.random_range(-0.02..0.02) * n[a]);
    let brain_radii = std::array::from_fn(|a| n[a] * rng.random_range(0.40..0.45));
    let scale = n.iter().cloned().fold(f64::INFINITY, f64::min);
    let edema_r = scale * rng.random_range(0.20..0.26);
    let edema_radii: [f64; 3] = std::array::from_fn(|_| edema_r * rng.random_range(0.85..1.15));
    let rim_f = rng.random_range(0.65..0.75);
    let core_f = rng.random_range(0.55..0.65);
    let rim_radii = edema_radii.map(|r| r * rim_f);
    let core_radii = rim_radii.map(|r| r * core_f);
    // Keep the whole halo inside the brain; z stays in the central half.
    let mut tumor_center = [0.0; 3];
    for a in 0..3 {
        let slack = (brain_radii[a] - edema_radii[a] - 1.0).max(0.0) * 0.6;
        let off = if a == 2 { (0.1 * n[a]).min(slack) } else { slack };
        tumor_center[a] = brain_center[a] + rng.random_range(-1.0..=1.0) * off;
    }
    PhantomGeometry { brain_center, brain_radii, tumor_center, edema_radii, rim_radii, core_radii }
}

/// Deterministic phantom with all four modalities at `dims`.
pub fn generate_phantom(seed: u64, dims: [usize; 3], modalities: &[Modality]) -> CaseRecord {
    let spec = PhantomSpec { modalities: modalities.to_vec(), ..PhantomSpec::new(dims) };
    generate_phantom_with(seed, &spec).0
}

pub fn generate_phantom_with(seed: u64, spec: &PhantomSpec) -> (CaseRecord, PhantomGeometry) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mgmt = spec.mgmt.unwrap_or_else(|| rng.random_range(0..2u8));
    let geo = draw_geometry(&mut rng, spec.dims);
    let [nx, ny, nz] = spec.dims;
    let n = nx * ny * nz;

    // tissue map: 0 outside, 1 brain, 2 edema, 3 rim, 4 core
    let mut tissue = vec![0u8; n];
    let mut labels = vec![0f32; n];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [x as f64, y as f64, z as f64];
                let i = x + nx * (y + ny * z);
                if ellipsoid_r2(p, geo.brain_center, geo.brain_radii) > 1.0 {
                    continue;
                }
                let (t, l) = if ellipsoid_r2(p, geo.tumor_center, geo.core_radii) <= 1.0 {
                    (4, 1.0)
                } else if ellipsoid_r2(p, geo.tumor_center, geo.rim_radii) <= 1.0 {
                    (3, 4.0)
                } else if ellipsoid_r2(p, geo.tumor_center, geo.edema_radii) <= 1.0 {
                    (2, 2.0)
                } else {
                    (1, 0.0)
                };
                tissue[i] = t;
                labels[i] = l;
            }
        }
    }

    let ripple_phase: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..2.0 * PI));
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let mut volumes = BTreeMap::new();
    // Draw per-modality parameters for all four modalities so that the
    // requested subset does not change any other channel.
    for m in Modality::ALL {
        let jitter: [f64; 4] = std::array::from_fn(|_| 1.0 + rng.random_range(-0.05..0.05));
        let bias_phase: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..2.0 * PI));
        let tex_phase: [f64; 2] = std::array::from_fn(|_| rng.random_range(0.0..2.0 * PI));
        let mut mrng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[m.index() as u64]));
        if !spec.modalities.contains(&m) {
            continue;
        }
        let mut data = vec![0f32; n];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let i = x + nx * (y + ny * z);
                    let t = tissue[i];
                    if t == 0 {
                        continue;
                    }
                    let (fx, fy, fz) = (x as f64 / nx as f64, y as f64 / ny as f64, z as f64 / nz as f64);
                    let mut v = CONTRAST[m.index()][t as usize - 1] * jitter[t as usize - 1];
                    // slow anatomical texture
                    v *= 1.0 + 0.05 * (2.0 * PI * 2.0 * fx + tex_phase[0]).sin() * (2.0 * PI * 3.0 * fy + tex_phase[1]).cos();
                    if t >= 2 && mgmt == 1 {
                        let r = (0..3)
                            .map(|a| (PI / 2.0 * [x, y, z][a] as f64 + ripple_phase[a]).cos())
                            .product::<f64>();
                        v += spec.ripple * r;
                    }
                    let bias = 1.0
                        + 0.08 * (2.0 * PI * fx + bias_phase[0]).sin()
                        + 0.06 * (2.0 * PI * fy + bias_phase[1]).sin()
                        + 0.04 * (2.0 * PI * fz + bias_phase[2]).sin();
                    v = v * bias + noise.sample(&mut mrng);
                    data[i] = (v.max(0.01) * SCALE) as f32;
                }
            }
        }
        let vol = Volume3D::new(spec.dims, spec.spacing, data).expect("consistent geometry");
        volumes.insert(m, vol);
    }

    let mut label_vol = Volume3D::new(spec.dims, spec.spacing, labels).expect("consistent geometry");
    label_vol.dtype = Dtype::U8;
    let record = CaseRecord {
        case_id: format!("phantom_{seed:016x}"),
        volumes,
        labels: Some(label_vol),
        mgmt: Some(mgmt),
        fold: None,
    };
    (record, geo)
}

/// `count` phantoms named `phantom_000`, ... with alternating mgmt bits.
pub fn phantom_cohort(count: usize, spec: &PhantomSpec, seed: u64) -> Vec<CaseRecord> {
    (0..count)
        .map(|i| {
            let s = PhantomSpec { mgmt: spec.mgmt.or(Some((i % 2) as u8)), ..spec.clone() };
            let (mut rec, _) = generate_phantom_with(derive_seed(seed, &[i as u64]), &s);
            rec.case_id = format!("phantom_{i:03}");
            rec
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_histogram_and_containment() {
        for seed in 0..6 {
            let (rec, geo) = generate_phantom_with(seed, &PhantomSpec::cube(32));
            let l = rec.labels.as_ref().unwrap();
            let mut hist = BTreeMap::new();
            for &v in &l.data {
                *hist.entry(v as u8).or_insert(0usize) += 1;
            }
            assert_eq!(hist.keys().copied().collect::<Vec<_>>(), vec![0, 1, 2, 4]);
            assert!(hist[&0] * 2 > l.len());
            let (lo, hi) = geo.tumor_bbox();
            let [nx, ny, _] = l.dims;
            for (i, &v) in l.data.iter().enumerate() {
                if v == 4.0 {
                    let p = [i % nx, (i / nx) % ny, i / (nx * ny)].map(|c| c as f64);
                    assert!((0..3).all(|a| p[a] >= lo[a] && p[a] <= hi[a]));
                }
            }
            // brain voxels are nonzero on every modality
            for v in rec.volumes.values() {
                assert_eq!(v.data.iter().filter(|&&x| x != 0.0).count(), l.data.len() - background(&rec));
            }
        }
    }

    fn background(rec: &CaseRecord) -> usize {
        rec.volumes[&Modality::T1].data.iter().filter(|&&x| x == 0.0).count()
    }

    #[test]
    fn deterministic_and_subset_consistent() {
        let a = generate_phantom(9, [32, 32, 32], &Modality::ALL);
        let b = generate_phantom(9, [32, 32, 32], &Modality::ALL);
        assert_eq!(a, b);
        let c = generate_phantom(9, [32, 32, 32], &[Modality::Flair]);
        assert_eq!(c.volumes.len(), 1);
        assert_eq!(c.volumes[&Modality::Flair], a.volumes[&Modality::Flair]);
        assert_ne!(generate_phantom(10, [32, 32, 32], &Modality::ALL), a);
    }

    #[test]
    fn contrasts() {
        let rec = generate_phantom(3, [48, 48, 48], &Modality::ALL);
        let l = rec.labels.unwrap();
        let mean = |m: Modality, lab: f32| {
            let v = &rec.volumes[&m];
            let (s, c) = v.data.iter().zip(&l.data).filter(|(&x, &t)| t == lab && x > 0.0).fold((0.0, 0), |(s, c), (&x, _)| (s + x as f64, c + 1));
            s / c as f64
        };
        assert!(mean(Modality::Flair, 2.0) > 1.5 * mean(Modality::Flair, 0.0));
        assert!(mean(Modality::T1ce, 4.0) > 1.5 * mean(Modality::T1ce, 2.0));
    }

    #[test]
    fn cohort_alternates() {
        let c = phantom_cohort(4, &PhantomSpec::cube(32), 1);
        assert_eq!(c.iter().map(|r| r.mgmt.unwrap()).collect::<Vec<_>>(), vec![0, 1, 0, 1]);
        assert_eq!(c[2].case_id, "phantom_002");
    }
}
