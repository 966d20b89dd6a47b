//! Turning uploaded files into a study, and summarising masks.

use std::collections::BTreeMap;

use gliopipe::lossmetric::{Region, RegionSource};
use gliopipe::modality::Modality;
use gliopipe::volio::{canonicalize, read_any, Volume3D};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum StudyError {
    #[error("{field}: {message}")]
    UnsupportedFormat { field: String, message: String },
    #[error("unknown upload field {0:?}")]
    UnknownField(String),
    #[error("missing modality {0}")]
    MissingModality(Modality),
    #[error("{0} has dims {1:?}, expected {2:?}")]
    DimMismatch(Modality, [usize; 3], [usize; 3]),
    #[error("no modality uploaded")]
    NoModalities,
}

impl StudyError {
    pub fn code(&self) -> &'static str {
        match self {
            StudyError::UnsupportedFormat { .. } => "UnsupportedFormat",
            StudyError::UnknownField(_) => "UnknownField",
            StudyError::MissingModality(_) => "MissingModality",
            StudyError::DimMismatch(..) => "DimMismatch",
            StudyError::NoModalities => "NoModalities",
        }
    }
}

/// Field name to modality; `t1ce[]`-style names are accepted.
pub fn field_modality(name: &str) -> Result<Modality, StudyError> {
    name.trim_end_matches("[]").parse().map_err(|_| StudyError::UnknownField(name.to_string()))
}

/// Groups files by modality. One file is NIfTI (or a single DICOM slice);
/// several files under one name form a DICOM series. Volumes are brought
/// to the canonical grid and must agree in dims.
pub fn parse_study(files: Vec<(String, Vec<u8>)>) -> Result<BTreeMap<Modality, Volume3D>, StudyError> {
    let mut grouped: BTreeMap<Modality, (String, Vec<Vec<u8>>)> = BTreeMap::new();
    for (name, bytes) in files {
        let m = field_modality(&name)?;
        grouped.entry(m).or_insert_with(|| (name, Vec::new())).1.push(bytes);
    }
    let mut out = BTreeMap::new();
    let mut dims: Option<(Modality, [usize; 3])> = None;
    for (m, (name, blobs)) in grouped {
        let refs: Vec<&[u8]> = blobs.iter().map(|b| b.as_slice()).collect();
        let v = read_any(&refs).map_err(|e| StudyError::UnsupportedFormat { field: name, message: e.to_string() })?;
        let v = canonicalize(&v);
        match dims {
            None => dims = Some((m, v.dims)),
            Some((_, d)) if d != v.dims => return Err(StudyError::DimMismatch(m, v.dims, d)),
            _ => {}
        }
        out.insert(m, v);
    }
    if out.is_empty() {
        return Err(StudyError::NoModalities);
    }
    Ok(out)
}

pub fn require(study: &BTreeMap<Modality, Volume3D>, order: &[Modality]) -> Result<(), StudyError> {
    match order.iter().find(|m| !study.contains_key(m)) {
        Some(&m) => Err(StudyError::MissingModality(m)),
        None => Ok(()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelCount {
    pub name: String,
    pub voxels: u64,
    pub volume_mm3: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationSummary {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Raw labels 1, 2, 4.
    pub labels: Vec<VoxelCount>,
    /// ET, TC, WT under `region_source`.
    pub regions: Vec<VoxelCount>,
    pub region_source: RegionSource,
}

pub fn summarize(mask: &Volume3D, source: RegionSource) -> SegmentationSummary {
    let voxel = mask.voxel_volume();
    let count = |f: &dyn Fn(u8) -> bool| mask.data.iter().filter(|&&v| f(v as u8)).count() as u64;
    let entry = |name: String, voxels: u64| VoxelCount { name, voxels, volume_mm3: voxels as f64 * voxel };
    let labels = [1u8, 2, 4].iter().map(|&l| entry(format!("label_{l}"), count(&|v| v == l))).collect();
    let regions = Region::ALL
        .iter()
        .map(|&r| entry(r.name().to_string(), count(&|v| r.contains(source, v))))
        .collect();
    SegmentationSummary { dims: mask.dims, spacing: mask.spacing, labels, regions, region_source: source }
}

#[cfg(test)]
mod tests {
    use super::*;
    use gliopipe::volio::write_nifti;

    fn vol(dims: [usize; 3]) -> Vec<u8> {
        let n = dims.iter().product::<usize>();
        write_nifti(&Volume3D::new(dims, [1.0; 3], (0..n).map(|i| i as f32 + 1.0).collect()).unwrap())
    }

    #[test]
    fn parse_rules() {
        let s = parse_study(vec![("t1ce".into(), vol([4, 4, 4])), ("FLAIR".into(), vol([4, 4, 4]))]).unwrap();
        assert_eq!(s.keys().copied().collect::<Vec<_>>(), vec![Modality::T1ce, Modality::Flair]);
        assert_eq!(require(&s, &Modality::ALL), Err(StudyError::MissingModality(Modality::T1)));
        let e = parse_study(vec![("t1".into(), vol([4, 4, 4])), ("t2".into(), vol([4, 4, 3]))]).unwrap_err();
        assert_eq!(e.code(), "DimMismatch");
        let e = parse_study(vec![("t1".into(), b"not an image at all".to_vec())]).unwrap_err();
        assert_eq!(e.code(), "UnsupportedFormat");
        assert_eq!(parse_study(vec![]).unwrap_err(), StudyError::NoModalities);
        assert_eq!(parse_study(vec![("pd".into(), vol([2, 2, 2]))]).unwrap_err().code(), "UnknownField");
    }

    #[test]
    fn volumes_in_mm3() {
        let mut m = Volume3D::new([2, 2, 2], [1.0, 2.0, 0.5], vec![0.0, 1.0, 2.0, 4.0, 4.0, 0.0, 0.0, 0.0]).unwrap();
        m.dtype = gliopipe::volio::Dtype::U8;
        let s = summarize(&m, RegionSource::EdemaPlusEnhancing);
        assert_eq!(s.labels[2], VoxelCount { name: "label_4".into(), voxels: 2, volume_mm3: 2.0 });
        let wt = s.regions.iter().find(|r| r.name == "wt").unwrap();
        assert_eq!(wt.voxels, 4);
        let tc = s.regions.iter().find(|r| r.name == "tc").unwrap();
        assert_eq!(tc.voxels, 3);
    }
}
