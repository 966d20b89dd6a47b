//! Offline evaluation of trained models against ground truth.

use serde::{Deserialize, Serialize};

use super::{CaseRecord, Result, TrainError};
use crate::lossmetric::labels::raw_labels;
use crate::lossmetric::metrics::dice_raw;
use crate::lossmetric::{accuracy, auroc, Region, RegionSource};
use crate::modality::Modality;
use crate::models::inference::{predict_methylation, MethylationModel, SegmentationModel};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionDice {
    pub et: f64,
    pub tc: f64,
    pub wt: f64,
}

impl RegionDice {
    pub fn compute(pred: &[u8], gt: &[u8], source: RegionSource) -> Self {
        Self {
            et: dice_raw(pred, gt, Region::Et, source),
            tc: dice_raw(pred, gt, Region::Tc, source),
            wt: dice_raw(pred, gt, Region::Wt, source),
        }
    }

    pub fn mean(&self) -> f64 {
        (self.et + self.tc + self.wt) / 3.0
    }

    fn map3(items: &[RegionDice], f: impl Fn(Vec<f64>) -> f64) -> Self {
        Self {
            et: f(items.iter().map(|d| d.et).collect()),
            tc: f(items.iter().map(|d| d.tc).collect()),
            wt: f(items.iter().map(|d| d.wt).collect()),
        }
    }
}

fn mean(v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Which tumor-core definition(s) to report.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionSelection {
    #[default]
    EdemaPlusEnhancing,
    StandardBrats,
    Both,
}

impl RegionSelection {
    /// Source used for the `dice` field.
    pub fn primary(self) -> RegionSource {
        match self {
            RegionSelection::StandardBrats => RegionSource::StandardBrats,
            _ => RegionSource::EdemaPlusEnhancing,
        }
    }
}

impl From<RegionSource> for RegionSelection {
    fn from(s: RegionSource) -> Self {
        match s {
            RegionSource::EdemaPlusEnhancing => RegionSelection::EdemaPlusEnhancing,
            RegionSource::StandardBrats => RegionSelection::StandardBrats,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegCaseReport {
    pub case_id: String,
    pub dice: RegionDice,
    /// TC under the {1, 4} definition; present when both are requested.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tc_standard_brats: Option<f64>,
    pub voxel_accuracy: f64,
}

impl SegCaseReport {
    pub fn from_labels(case_id: &str, pred: &[u8], gt: &[u8], selection: RegionSelection) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(TrainError::Config(format!("case {case_id}: prediction and truth differ in size")));
        }
        let dice = RegionDice::compute(pred, gt, selection.primary());
        let tc_standard_brats =
            (selection == RegionSelection::Both).then(|| dice_raw(pred, gt, Region::Tc, RegionSource::StandardBrats));
        Ok(Self { case_id: case_id.to_string(), dice, tc_standard_brats, voxel_accuracy: accuracy(pred, gt)? })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegReport {
    pub selection: RegionSelection,
    pub cases: Vec<SegCaseReport>,
    pub mean: RegionDice,
    pub median: RegionDice,
}

impl SegReport {
    pub fn from_cases(selection: RegionSelection, cases: Vec<SegCaseReport>) -> Self {
        let d: Vec<RegionDice> = cases.iter().map(|c| c.dice).collect();
        Self { selection, mean: RegionDice::map3(&d, mean), median: RegionDice::map3(&d, median), cases }
    }
}

pub fn evaluate_segmentation(model: &SegmentationModel, cases: &[CaseRecord], selection: RegionSelection) -> Result<SegReport> {
    let mut out = Vec::with_capacity(cases.len());
    for c in cases {
        let gt = c.labels.as_ref().ok_or_else(|| TrainError::MissingLabels(c.case_id.clone()))?;
        let pred = model.segment(&c.volumes)?;
        if pred.dims != gt.dims {
            return Err(TrainError::Config(format!("case {}: truth dims {:?} differ from image dims {:?}", c.case_id, gt.dims, pred.dims)));
        }
        out.push(SegCaseReport::from_labels(&c.case_id, &raw_labels(&pred)?, &raw_labels(gt)?, selection)?);
    }
    Ok(SegReport::from_cases(selection, out))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClsCaseReport {
    pub case_id: String,
    pub mgmt: u8,
    pub probability: f64,
    pub status_bit: u8,
    pub per_modality: Vec<(Modality, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClsReport {
    pub cases: Vec<ClsCaseReport>,
    pub auroc: Option<f64>,
    pub per_modality_auroc: Vec<(Modality, Option<f64>)>,
    /// Case-level accuracy at threshold 0.5.
    pub accuracy: f64,
}

pub fn evaluate_classification(model: &MethylationModel, cases: &[CaseRecord]) -> Result<ClsReport> {
    let mut out = Vec::with_capacity(cases.len());
    for c in cases {
        let mgmt = c.mgmt.ok_or_else(|| TrainError::MissingMgmt(c.case_id.clone()))?;
        let p = predict_methylation(model, &c.volumes)?;
        out.push(ClsCaseReport {
            case_id: c.case_id.clone(),
            mgmt,
            probability: p.probability,
            status_bit: p.status_bit,
            per_modality: p.per_modality.iter().map(|e| (e.modality, e.probability)).collect(),
        });
    }
    let labels: Vec<u8> = out.iter().map(|c| c.mgmt).collect();
    let scores: Vec<f64> = out.iter().map(|c| c.probability).collect();
    let per_modality_auroc = Modality::ALL
        .iter()
        .enumerate()
        .map(|(k, &m)| {
            let s: Vec<f64> = out.iter().map(|c| c.per_modality[k].1).collect();
            (m, auroc(&s, &labels).ok())
        })
        .collect();
    let preds: Vec<u8> = out.iter().map(|c| c.status_bit).collect();
    Ok(ClsReport {
        auroc: auroc(&scores, &labels).ok(),
        per_modality_auroc,
        accuracy: accuracy(&preds, &labels)?,
        cases: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn both_tc_definitions() {
        // pred: core voxel predicted as edema
        let gt = [0u8, 1, 2, 4, 4];
        let pred = [0u8, 2, 2, 4, 0];
        let r = SegCaseReport::from_labels("c", &pred, &gt, RegionSelection::Both).unwrap();
        // edema+enhancing TC {2,4}: pred {1,2,3}, gt {2,3,4} -> 2*2/6
        assert_eq!(r.dice.tc, 4.0 / 6.0);
        // standard TC {1,4}: pred {3}, gt {1,3,4} -> 2*1/4
        assert_eq!(r.tc_standard_brats, Some(0.5));
        assert_eq!(r.dice.et, 2.0 / 3.0);
        assert_eq!(r.voxel_accuracy, 0.6);
        let p = SegCaseReport::from_labels("c", &pred, &gt, RegionSelection::EdemaPlusEnhancing).unwrap();
        assert_eq!(p.tc_standard_brats, None);
        let s = SegCaseReport::from_labels("c", &pred, &gt, RegionSelection::StandardBrats).unwrap();
        assert_eq!(s.dice.tc, 0.5);
    }

    #[test]
    fn aggregates() {
        let mk = |id: &str, et: f64| SegCaseReport {
            case_id: id.into(),
            dice: RegionDice { et, tc: 1.0, wt: 0.5 },
            tc_standard_brats: None,
            voxel_accuracy: 1.0,
        };
        let r = SegReport::from_cases(RegionSelection::EdemaPlusEnhancing, vec![mk("a", 0.2), mk("b", 0.4), mk("c", 0.9)]);
        assert!((r.mean.et - 0.5).abs() < 1e-15);
        assert_eq!(r.median.et, 0.4);
        assert_eq!(r.median.wt, 0.5);
    }
}
