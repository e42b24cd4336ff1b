//! Per-class stratified train/test splits.

use rand::seq::SliceRandom;

use super::{PatchSet, SplitIndex};
use crate::error::{Error, Result};
use crate::nn::seeded_rng;

/// Splits the labeled samples of a patch set class by class.
///
/// Each class with `n_c` samples contributes `max(1, round(fraction * n_c))`
/// training samples (round half up); the remaining labeled samples form the
/// test side. Unlabeled samples (label 0) appear in neither list.
pub fn stratified_split(patchset: &PatchSet, fraction: f64, seed: u64) -> Result<SplitIndex> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Validation(format!("split fraction must be in (0, 1], got {fraction}")));
    }
    let classes = patchset.classes();
    if classes.is_empty() {
        return Err(Error::Validation("patch set has no labeled samples".into()));
    }
    let mut rng = seeded_rng(seed, "stratified-split");
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for class in classes {
        let mut idx: Vec<usize> = patchset
            .labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        idx.shuffle(&mut rng);
        let n_c = idx.len();
        let take = ((fraction * n_c as f64 + 0.5).floor() as usize).clamp(1, n_c);
        train_idx.extend_from_slice(&idx[..take]);
        test_idx.extend_from_slice(&idx[take..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok(SplitIndex { train_idx, test_idx, seed })
}
