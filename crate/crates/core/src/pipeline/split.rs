//! Group-stratified fold assignment and train/validation/test splits.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Subject indices per group, groups in sorted order, each list shuffled.
fn shuffled_groups(groups: &[String], seed: u64) -> BTreeMap<&str, Vec<usize>> {
    let mut by_group: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, g) in groups.iter().enumerate() {
        by_group.entry(g.as_str()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for members in by_group.values_mut() {
        members.shuffle(&mut rng);
    }
    by_group
}

/// Fold index in `0..k` for every subject. Each group is dealt round-robin
/// over the folds, continuing where the previous group stopped, so per-group
/// and total fold sizes differ by at most one.
pub fn stratified_kfold(groups: &[String], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    let by_group = shuffled_groups(groups, seed);
    if let Some((g, m)) = by_group.iter().find(|(_, m)| m.len() < k) {
        return Err(Error::Stratification(format!(
            "group {g:?} has {} members, fewer than {k} folds",
            m.len()
        )));
    }
    let mut fold = vec![0; groups.len()];
    let mut next = 0;
    for members in by_group.values() {
        for &i in members {
            fold[i] = next;
            next = (next + 1) % k;
        }
    }
    Ok(fold)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// Per-group split by fractions; whatever remains is labelled test.
pub fn train_val_test_split(groups: &[String], train_fraction: f64, val_fraction: f64, seed: u64) -> Result<Vec<Split>> {
    let ok = |f: f64| (0.0..=1.0).contains(&f);
    if !ok(train_fraction) || !ok(val_fraction) || train_fraction + val_fraction > 1.0 + 1e-12 {
        return Err(Error::Config(vec![format!(
            "split fractions {train_fraction} + {val_fraction} must be in [0, 1] and sum to at most 1"
        )]));
    }
    let mut out = vec![Split::Test; groups.len()];
    for members in shuffled_groups(groups, seed).values() {
        let n = members.len();
        let n_train = ((n as f64 * train_fraction).round() as usize).min(n);
        let n_val = ((n as f64 * val_fraction).round() as usize).min(n - n_train);
        for (j, &i) in members.iter().enumerate() {
            out[i] = if j < n_train {
                Split::Train
            } else if j < n_train + n_val {
                Split::Validation
            } else {
                Split::Test
            };
        }
    }
    Ok(out)
}
