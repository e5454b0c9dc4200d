use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::record::LongitudinalDataset;
use crate::error::{Error, Result};

/// Subject-level fold assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, subject_id: &str) -> Option<usize> {
        self.assignments.get(subject_id).copied()
    }

    pub fn test_subjects(&self, fold: usize) -> Vec<&str> {
        self.assignments
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(s, _)| s.as_str())
            .collect()
    }

    /// Subject indices of `ds` split into (train, test) for `fold`.
    pub fn split(&self, ds: &LongitudinalDataset, fold: usize) -> (Vec<usize>, Vec<usize>) {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, s) in ds.subjects.iter().enumerate() {
            if self.fold_of(&s.id) == Some(fold) {
                test.push(i);
            } else {
                train.push(i);
            }
        }
        (train, test)
    }
}

/// Assign subjects to `k` folds. Subjects are grouped by diagnosis label
/// when present, shuffled within each group, and dealt round-robin so fold
/// sizes differ by at most one subject.
pub fn stratified_kfold(ds: &LongitudinalDataset, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Config(format!("k-fold needs k ≥ 2, got {k}")));
    }
    if ds.n_subjects() < k {
        return Err(Error::Config(format!(
            "{} subjects cannot fill {k} folds",
            ds.n_subjects()
        )));
    }
    let mut strata: BTreeMap<Option<&str>, Vec<&str>> = BTreeMap::new();
    for s in &ds.subjects {
        strata.entry(s.diagnosis()).or_default().push(s.id.as_str());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignments = BTreeMap::new();
    let mut next = 0;
    for (_, mut ids) in strata {
        ids.shuffle(&mut rng);
        for id in ids {
            assignments.insert(id.to_string(), next % k);
            next += 1;
        }
    }
    Ok(FoldPlan {
        k,
        seed,
        assignments,
    })
}

/// Hold out `frac` of `subjects` (at least one when possible) for
/// validation. Returns (train, validation).
pub fn split_validation(subjects: &[usize], frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut shuffled = subjects.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = if subjects.len() < 2 || frac <= 0.0 {
        0
    } else {
        ((subjects.len() as f64 * frac).round() as usize).clamp(1, subjects.len() - 1)
    };
    let val = shuffled[..n_val].to_vec();
    let mut train = shuffled[n_val..].to_vec();
    train.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    (train, val)
}
