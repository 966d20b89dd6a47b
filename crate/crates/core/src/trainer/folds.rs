//! Case-level fold assignment. Every crop and slice of a case stays in the
//! fold of its case.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Result, TrainError};

/// Shuffles case indices and deals them to folds round-robin. Returns the
/// fold of each case; fold sizes differ by at most one.
pub fn make_folds(n_cases: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(TrainError::Config("folds must be >= 2".into()));
    }
    if n_cases < k {
        return Err(TrainError::TooFewCases { need: k, have: n_cases });
    }
    let mut order: Vec<usize> = (0..n_cases).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![0; n_cases];
    for (pos, &case) in order.iter().enumerate() {
        folds[case] = pos % k;
    }
    Ok(folds)
}

/// Like [`make_folds`], dealing positives first and continuing the same
/// round-robin with negatives, so each fold's positive count differs from
/// any other fold's by at most one.
pub fn stratified_folds(labels: &[u8], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(TrainError::Config("folds must be >= 2".into()));
    }
    if labels.len() < k {
        return Err(TrainError::TooFewCases { need: k, have: labels.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != 0).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut folds = vec![0; labels.len()];
    for (slot, &case) in pos.iter().chain(&neg).enumerate() {
        folds[case] = slot % k;
    }
    Ok(folds)
}

/// Case-level hold-out: returns `(train, val)` index lists with
/// `round(n * val_fraction)` validation cases (at least one).
pub fn split_train_val(n_cases: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n_cases < 2 {
        return Err(TrainError::TooFewCases { need: 2, have: n_cases });
    }
    if !(0.0 < val_fraction && val_fraction < 1.0) {
        return Err(TrainError::Config(format!("validation fraction {val_fraction} outside (0, 1)")));
    }
    let mut order: Vec<usize> = (0..n_cases).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n_cases as f64 * val_fraction).round() as usize).clamp(1, n_cases - 1);
    let val = order[..n_val].to_vec();
    let train = order[n_val..].to_vec();
    Ok((train, val))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sizes(f: &[usize], k: usize) -> Vec<usize> {
        let mut s = vec![0; k];
        for &x in f {
            s[x] += 1;
        }
        s
    }

    #[test]
    fn balanced_sizes() {
        assert_eq!(sizes(&make_folds(100, 4, 1).unwrap(), 4), vec![25; 4]);
        let mut s = sizes(&make_folds(10, 4, 1).unwrap(), 4);
        s.sort_unstable();
        assert_eq!(s, vec![2, 2, 3, 3]);
        assert_eq!(make_folds(10, 4, 5).unwrap(), make_folds(10, 4, 5).unwrap());
        assert!(matches!(make_folds(3, 4, 0), Err(TrainError::TooFewCases { .. })));
    }

    #[test]
    fn stratified_positive_counts() {
        let labels: Vec<u8> = (0..30).map(|i| (i % 3 == 0) as u8).collect();
        let f = stratified_folds(&labels, 4, 2).unwrap();
        let mut pos = [0; 4];
        for (i, &fold) in f.iter().enumerate() {
            pos[fold] += labels[i] as usize;
        }
        assert!(pos.iter().max().unwrap() - pos.iter().min().unwrap() <= 1);
        let s = sizes(&f, 4);
        assert!(s.iter().max().unwrap() - s.iter().min().unwrap() <= 1);
    }

    #[test]
    fn split_is_disjoint() {
        let (t, v) = split_train_val(10, 0.2, 3).unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(t.len(), 8);
        assert!(t.iter().all(|i| !v.contains(i)));
    }
}
