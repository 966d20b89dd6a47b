//! Dataset manifest: a CSV file with one row per case.
//!
//! Columns: `case_id,t1,t1ce,t2,flair,label,mgmt`. Image columns hold a
//! NIfTI file or a directory of DICOM slices, relative to the manifest's
//! directory; empty cells mean "not available".

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CaseRecord, Result, TrainError};
use crate::modality::Modality;
use crate::volio::{read_any, write_nifti_gz, Dtype, Volume3D};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub case_id: String,
    #[serde(default)]
    pub t1: Option<String>,
    #[serde(default)]
    pub t1ce: Option<String>,
    #[serde(default)]
    pub t2: Option<String>,
    #[serde(default)]
    pub flair: Option<String>,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub mgmt: Option<u8>,
}

impl ManifestEntry {
    pub fn image(&self, m: Modality) -> Option<&str> {
        match m {
            Modality::T1 => self.t1.as_deref(),
            Modality::T1ce => self.t1ce.as_deref(),
            Modality::T2 => self.t2.as_deref(),
            Modality::Flair => self.flair.as_deref(),
        }
        .filter(|s| !s.is_empty())
    }

    fn set_image(&mut self, m: Modality, path: String) {
        let slot = match m {
            Modality::T1 => &mut self.t1,
            Modality::T1ce => &mut self.t1ce,
            Modality::T2 => &mut self.t2,
            Modality::Flair => &mut self.flair,
        };
        *slot = Some(path);
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> TrainError {
    TrainError::Io { path: path.display().to_string(), message: e.to_string() }
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let e: ManifestEntry = row.map_err(|e| TrainError::Config(format!("manifest: {e}")))?;
        if let Some(b) = e.mgmt {
            if b > 1 {
                return Err(TrainError::Config(format!("case {}: mgmt must be 0 or 1, got {b}", e.case_id)));
            }
        }
        out.push(e);
    }
    Ok(out)
}

pub fn manifest_to_csv(entries: &[ManifestEntry]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for e in entries {
        w.serialize(e).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory write")).expect("utf-8")
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_manifest(&text)
}

/// Reads a NIfTI file, or every file of a DICOM directory (sorted by name).
pub fn read_volume(path: &Path) -> Result<Volume3D> {
    let blobs: Vec<Vec<u8>> = if path.is_dir() {
        let mut names: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| io_err(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        names.sort();
        names.iter().map(|p| fs::read(p).map_err(|e| io_err(p, e))).collect::<Result<_>>()?
    } else {
        vec![fs::read(path).map_err(|e| io_err(path, e))?]
    };
    let refs: Vec<&[u8]> = blobs.iter().map(|b| b.as_slice()).collect();
    read_any(&refs).map_err(|e| io_err(path, e))
}

/// Loads one case; paths resolve against `base`.
pub fn load_case(entry: &ManifestEntry, base: &Path) -> Result<CaseRecord> {
    let mut volumes = BTreeMap::new();
    for m in Modality::ALL {
        if let Some(p) = entry.image(m) {
            volumes.insert(m, read_volume(&base.join(p))?);
        }
    }
    let labels = match entry.label.as_deref().filter(|s| !s.is_empty()) {
        Some(p) => {
            let mut l = read_volume(&base.join(p))?;
            l.dtype = Dtype::U8;
            Some(l)
        }
        None => None,
    };
    let rec = CaseRecord { case_id: entry.case_id.clone(), volumes, labels, mgmt: entry.mgmt, fold: None };
    check_case(&rec)?;
    Ok(rec)
}

/// All volumes and the label map share one grid.
pub fn check_case(rec: &CaseRecord) -> Result<()> {
    let mut dims = None;
    for (m, v) in &rec.volumes {
        match dims {
            None => dims = Some(v.dims),
            Some(d) if d != v.dims => {
                return Err(TrainError::Preproc(crate::preproc::PreprocError::DimMismatch(*m, v.dims, d)));
            }
            _ => {}
        }
    }
    if let (Some(d), Some(l)) = (dims, &rec.labels) {
        if l.dims != d {
            return Err(TrainError::Config(format!("case {}: label dims {:?} differ from image dims {:?}", rec.case_id, l.dims, d)));
        }
    }
    Ok(())
}

pub fn load_cases(manifest: &Path) -> Result<Vec<CaseRecord>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(manifest)?.iter().map(|e| load_case(e, base)).collect()
}

/// Writes `case_id/<modality>.nii.gz` (and `label.nii.gz`) under `dir`.
pub fn write_case(dir: &Path, rec: &CaseRecord) -> Result<ManifestEntry> {
    let case_dir = dir.join(&rec.case_id);
    fs::create_dir_all(&case_dir).map_err(|e| io_err(&case_dir, e))?;
    let mut entry = ManifestEntry { case_id: rec.case_id.clone(), mgmt: rec.mgmt, ..Default::default() };
    let put = |name: &str, v: &Volume3D| -> Result<String> {
        let rel = format!("{}/{name}.nii.gz", rec.case_id);
        let p = dir.join(&rel);
        fs::write(&p, write_nifti_gz(v)).map_err(|e| io_err(&p, e))?;
        Ok(rel)
    };
    for (m, v) in &rec.volumes {
        let rel = put(m.name(), v)?;
        entry.set_image(*m, rel);
    }
    if let Some(l) = &rec.labels {
        entry.label = Some(put("label", l)?);
    }
    Ok(entry)
}

/// Writes every case plus `manifest.csv`; returns the manifest path.
pub fn write_dataset(dir: &Path, cases: &[CaseRecord]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let entries = cases.iter().map(|c| write_case(dir, c)).collect::<Result<Vec<_>>>()?;
    let path = dir.join("manifest.csv");
    fs::write(&path, manifest_to_csv(&entries)).map_err(|e| io_err(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::phantom::{phantom_cohort, PhantomSpec};

    #[test]
    fn csv_round_trip_with_gaps() {
        let text = "case_id,t1,t1ce,t2,flair,label,mgmt\na,a/t1.nii,,a/t2.nii,a/flair.nii,,1\nb,,b/t1ce.nii,,,b/seg.nii,\n";
        let e = parse_manifest(text).unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!(e[0].image(Modality::T1ce), None);
        assert_eq!(e[0].mgmt, Some(1));
        assert_eq!(e[1].mgmt, None);
        assert_eq!(e[1].label.as_deref(), Some("b/seg.nii"));
        assert_eq!(parse_manifest(&manifest_to_csv(&e)).unwrap(), e);
        assert!(parse_manifest("case_id,t1,t1ce,t2,flair,label,mgmt\nx,,,,,,3\n").is_err());
    }

    #[test]
    fn dataset_round_trip_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let cases = phantom_cohort(2, &PhantomSpec::cube(32), 4);
        let m = write_dataset(dir.path(), &cases).unwrap();
        let back = load_cases(&m).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in cases.iter().zip(&back) {
            assert_eq!(a.case_id, b.case_id);
            assert_eq!(a.mgmt, b.mgmt);
            assert_eq!(a.labels.as_ref().unwrap().data, b.labels.as_ref().unwrap().data);
            for (m, v) in &a.volumes {
                assert_eq!(v.data, b.volumes[m].data);
            }
        }
        fs::remove_file(dir.path().join("phantom_001/t2.nii.gz")).unwrap();
        let err = load_cases(&m).unwrap_err().to_string();
        assert!(err.contains("phantom_001/t2.nii.gz"), "{err}");
    }
}
