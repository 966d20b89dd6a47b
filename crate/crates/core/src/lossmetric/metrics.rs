//! Region Dice, AUROC and accuracy.

use super::labels::{raw_labels, Region, RegionSource};
use super::{MetricError, Result};
use crate::volio::Volume3D;

/// Dice of the region masks of two raw label arrays; 1 when both are empty.
pub fn dice_raw(pred: &[u8], gt: &[u8], region: Region, source: RegionSource) -> f64 {
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        let (ia, ib) = (region.contains(source, a), region.contains(source, b));
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    if p + g == 0 {
        1.0
    } else {
        2.0 * both as f64 / (p + g) as f64
    }
}

pub fn dice_score(pred: &Volume3D, gt: &Volume3D, region: Region, source: RegionSource) -> Result<f64> {
    if pred.dims != gt.dims {
        return Err(MetricError::DimMismatch(pred.dims, gt.dims));
    }
    Ok(dice_raw(&raw_labels(pred)?, &raw_labels(gt)?, region, source))
}

/// Mann–Whitney AUROC with midranks for ties.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(MetricError::ShapeMismatch(format!("{} scores, {} labels", scores.len(), labels.len())));
    }
    let pos = labels.iter().filter(|&&y| y != 0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k] != 0).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Fraction of equal entries.
pub fn accuracy<T: PartialEq>(pred: &[T], gt: &[T]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(MetricError::ShapeMismatch(format!("{} vs {} entries", pred.len(), gt.len())));
    }
    if pred.is_empty() {
        return Ok(1.0);
    }
    Ok(pred.iter().zip(gt).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_auroc() {
        assert_eq!(auroc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(auroc(&[0.1, 0.2, 0.3, 0.4], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 5], &[0, 1, 0, 1, 1]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.5, 0.2], &[1, 1]), Err(MetricError::SingleClass));
    }

    #[test]
    fn half_overlap_dice() {
        let mut p = vec![0u8; 16];
        let mut g = vec![0u8; 16];
        p[..8].fill(4);
        g[4..12].fill(4);
        assert_eq!(dice_raw(&p, &g, Region::Et, RegionSource::EdemaPlusEnhancing), 0.5);
        assert_eq!(dice_raw(&[0; 4], &[0; 4], Region::Wt, RegionSource::EdemaPlusEnhancing), 1.0);
        assert_eq!(dice_raw(&[0; 4], &[1, 0, 0, 0], Region::Wt, RegionSource::EdemaPlusEnhancing), 0.0);
    }

    #[test]
    fn accuracy_counts() {
        let mut gt = vec![0u8; 100];
        gt[0] = 4;
        assert_eq!(accuracy(&[0u8; 100], &gt).unwrap(), 0.99);
        assert_eq!(accuracy(&[1, 2], &[1, 3]).unwrap(), 0.5);
    }
}
