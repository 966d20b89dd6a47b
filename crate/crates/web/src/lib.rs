//! Static browser demo over the gliopipe core.
//!
//! Everything runs client-side on a synthetic phantom: slice viewing with
//! the label overlay, intensity histograms under each normalization, and
//! previews of seeded augmentations. The plain functions are testable on
//! the host; the `wasm_bindgen` wrappers only move bytes.

use gliopipe::augment::{apply, AugmentPolicy};
use gliopipe::modality::Modality;
use gliopipe::preproc::{normalize_volume, MultiChannelVolume, NormVariant};
use gliopipe::render::{render_slice, Axis, Raster};
use gliopipe::trainer::phantom::generate_phantom;
use gliopipe::trainer::CaseRecord;
use gliopipe::volio::Volume3D;
use wasm_bindgen::prelude::*;

fn err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

pub fn parse_variant(s: &str) -> Result<NormVariant, String> {
    match s {
        "minmax" | "min_max_standard" => Ok(NormVariant::MinMaxStandard),
        "centered" | "min_max_centered" => Ok(NormVariant::MinMaxCentered),
        "zscore" | "z_score" => Ok(NormVariant::ZScore),
        _ => Err(format!("unknown normalization {s:?}")),
    }
}

/// Histogram of the normalized foreground (nonzero input voxels), with
/// `bins` equal-width bins over its own range. Returns `(lo, hi, counts)`.
pub fn foreground_histogram(v: &Volume3D, variant: NormVariant, bins: usize) -> Result<(f32, f32, Vec<u32>), String> {
    if bins == 0 {
        return Err("bins must be >= 1".into());
    }
    let n = normalize_volume(v, variant).map_err(|e| e.to_string())?;
    let fg: Vec<f32> = v.data.iter().zip(&n.volume.data).filter(|(&x, _)| x != 0.0).map(|(_, &y)| y).collect();
    let mut counts = vec![0u32; bins];
    if fg.is_empty() {
        return Ok((0.0, 0.0, counts));
    }
    let lo = fg.iter().cloned().fold(f32::INFINITY, f32::min);
    let hi = fg.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let width = (hi - lo) as f64;
    for &y in &fg {
        let b = if width > 0.0 { (((y - lo) as f64 / width) * bins as f64) as usize } else { 0 };
        counts[b.min(bins - 1)] += 1;
    }
    Ok((lo, hi, counts))
}

/// Augmentation toggles exposed in the page.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PreviewOptions {
    pub flip: bool,
    pub rotate: bool,
    pub stretch: bool,
    pub noise: bool,
    pub blur: bool,
}

impl PreviewOptions {
    pub fn policy(self, seed: u64) -> AugmentPolicy {
        let on = |b: bool| if b { 1.0 } else { 0.0 };
        AugmentPolicy {
            flip_prob: [on(self.flip) * 0.5; 3],
            rot90_prob: on(self.rotate),
            stretch_prob: on(self.stretch),
            stretch_range: (0.8, 1.2),
            noise_prob: on(self.noise),
            noise_sigma: 0.05,
            blur_prob: on(self.blur),
            blur_sigma: 1.0,
            seed,
            ..AugmentPolicy::default()
        }
    }
}

/// Augments image and labels together, as training does.
pub fn augment_case(case: &CaseRecord, m: Modality, opts: PreviewOptions, seed: u64) -> (Volume3D, Option<Volume3D>) {
    let image = MultiChannelVolume::from_channels(vec![m], &[case.volumes[&m].clone()]);
    let (img, lab) = apply(&opts.policy(seed), &image, case.labels.as_ref(), None);
    (img.channel(0), lab)
}

#[wasm_bindgen]
pub struct Demo {
    case: CaseRecord,
    augmented: Option<(Volume3D, Option<Volume3D>)>,
    last: Raster,
}

#[wasm_bindgen]
impl Demo {
    /// A cube phantom of side `size` with all four modalities.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, size: usize) -> Result<Demo, JsError> {
        if !(8..=160).contains(&size) {
            return Err(JsError::new("size must be in 8..=160"));
        }
        let case = generate_phantom(seed, [size; 3], &Modality::ALL);
        Ok(Demo { case, augmented: None, last: Raster { width: 0, height: 0, rgba: Vec::new() } })
    }

    pub fn mgmt(&self) -> u8 {
        self.case.mgmt.unwrap_or(0)
    }

    pub fn dims(&self) -> Vec<u32> {
        self.case.labels.as_ref().map(|l| l.dims).unwrap_or([0; 3]).iter().map(|&d| d as u32).collect()
    }

    /// Renders a slice of the phantom (or of the current augmentation when
    /// `augmented` is set); read the pixels with `rgba`, `width`, `height`.
    pub fn render(&mut self, modality: &str, axis: &str, index: usize, alpha: f64, augmented: bool) -> Result<(), JsError> {
        let m: Modality = modality.parse().map_err(err)?;
        let axis: Axis = axis.parse().map_err(err)?;
        let (image, labels) = match (&self.augmented, augmented) {
            (Some((img, lab)), true) => (img, lab.as_ref()),
            (None, true) => return Err(JsError::new("no augmentation yet")),
            _ => (&self.case.volumes[&m], self.case.labels.as_ref()),
        };
        self.last = render_slice(image, labels, axis, index, alpha).map_err(err)?;
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.last.width
    }

    pub fn height(&self) -> usize {
        self.last.height
    }

    pub fn rgba(&self) -> Vec<u8> {
        self.last.rgba.clone()
    }

    /// Foreground histogram after normalization: `[lo, hi, c0, c1, ...]`.
    pub fn histogram(&self, modality: &str, variant: &str, bins: usize) -> Result<Vec<f64>, JsError> {
        let m: Modality = modality.parse().map_err(err)?;
        let variant = parse_variant(variant).map_err(err)?;
        let (lo, hi, counts) = foreground_histogram(&self.case.volumes[&m], variant, bins).map_err(err)?;
        Ok([lo as f64, hi as f64].into_iter().chain(counts.into_iter().map(f64::from)).collect())
    }

    /// Draws a seeded augmentation of one modality; returns its dims.
    #[allow(clippy::too_many_arguments)]
    pub fn augment(&mut self, modality: &str, seed: u64, flip: bool, rotate: bool, stretch: bool, noise: bool, blur: bool) -> Result<Vec<u32>, JsError> {
        let m: Modality = modality.parse().map_err(err)?;
        let opts = PreviewOptions { flip, rotate, stretch, noise, blur };
        let (img, lab) = augment_case(&self.case, m, opts, seed);
        let dims = img.dims.iter().map(|&d| d as u32).collect();
        self.augmented = Some((img, lab));
        Ok(dims)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_counts_the_foreground() {
        let case = generate_phantom(1, [16; 3], &[Modality::T2]);
        let v = &case.volumes[&Modality::T2];
        let fg = v.data.iter().filter(|&&x| x != 0.0).count() as u32;
        for variant in [NormVariant::MinMaxStandard, NormVariant::MinMaxCentered, NormVariant::ZScore] {
            let (lo, hi, c) = foreground_histogram(v, variant, 20).unwrap();
            assert_eq!(c.iter().sum::<u32>(), fg);
            assert!(lo < hi);
            if variant == NormVariant::MinMaxStandard {
                assert!(lo >= 0.0 && hi <= 1.0);
            }
        }
        assert!(foreground_histogram(v, NormVariant::ZScore, 0).is_err());
    }

    #[test]
    fn preview_is_seeded_and_keeps_labels_aligned() {
        let case = generate_phantom(2, [16; 3], &Modality::ALL);
        let opts = PreviewOptions { flip: true, rotate: true, stretch: true, ..Default::default() };
        let a = augment_case(&case, Modality::T1ce, opts, 9);
        let b = augment_case(&case, Modality::T1ce, opts, 9);
        assert_eq!(a, b);
        let (img, lab) = a;
        let lab = lab.unwrap();
        assert_eq!(img.dims, lab.dims);
        // background in the image is background in the labels
        for (x, l) in img.data.iter().zip(&lab.data) {
            if *l != 0.0 {
                assert!(*x > 0.0);
            }
        }
        let off = augment_case(&case, Modality::T1ce, PreviewOptions::default(), 9).0;
        assert_eq!(off, case.volumes[&Modality::T1ce]);
    }

    #[test]
    fn variants_parse() {
        assert_eq!(parse_variant("zscore").unwrap(), NormVariant::ZScore);
        assert!(parse_variant("log").is_err());
    }
}
