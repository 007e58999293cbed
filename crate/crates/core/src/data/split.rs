use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
    pub group_aware: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train: 0.7, val: 0.1, test: 0.2, seed: 0, group_aware: true }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Partitions instances into train/validation/test index sets.  With
/// `group_aware` whole groups are assigned to one partition.  Index sets are
/// sorted ascending.
pub fn split(group_ids: &[u64], spec: &SplitSpec) -> Result<Split> {
    let fr = [spec.train, spec.val, spec.test];
    if fr.iter().any(|f| !(*f > 0.0)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Split("fractions must be positive and sum to 1".into()));
    }
    let units: Vec<u64> = if spec.group_aware {
        group_ids.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    } else {
        (0..group_ids.len() as u64).collect()
    };
    if units.len() < 3 {
        let what = if spec.group_aware { "groups" } else { "instances" };
        return Err(Error::Split(format!("need at least 3 {what}, found {}", units.len())));
    }
    let mut order = units.clone();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));

    let m = units.len();
    let mut n_train = ((spec.train * m as f64).round() as usize).clamp(1, m - 2);
    let mut n_val = ((spec.val * m as f64).round() as usize).max(1);
    if n_train + n_val > m - 1 {
        n_val = m - 1 - n_train;
        if n_val == 0 {
            n_train -= 1;
            n_val = 1;
        }
    }
    let part_of = |u: u64| {
        let pos = order.iter().position(|&o| o == u).expect("unit is in the order");
        if pos < n_train {
            0
        } else if pos < n_train + n_val {
            1
        } else {
            2
        }
    };
    let lookup: std::collections::HashMap<u64, usize> = units.iter().map(|&u| (u, part_of(u))).collect();
    let mut out = Split { train: vec![], val: vec![], test: vec![] };
    for (i, g) in group_ids.iter().enumerate() {
        let unit = if spec.group_aware { *g } else { i as u64 };
        match lookup[&unit] {
            0 => out.train.push(i),
            1 => out.val.push(i),
            _ => out.test.push(i),
        }
    }
    Ok(out)
}

/// Group-aware k-fold partitions: fold `i` tests on the `i`-th of `k`
/// near-equal slices of shuffled groups; of the remaining groups a
/// `val_fraction` share (at least one) validates and the rest train.
pub fn kfold(group_ids: &[u64], k: usize, val_fraction: f64, seed: u64) -> Result<Vec<Split>> {
    if k < 2 {
        return Err(Error::Split("k-fold needs k >= 2".into()));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Split("validation fraction must lie in [0, 1)".into()));
    }
    let mut groups: Vec<u64> = group_ids.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if groups.len() < k + 1 {
        return Err(Error::Split(format!("{} groups cannot form {k} folds", groups.len())));
    }
    groups.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let m = groups.len();
    let mut folds = Vec::with_capacity(k);
    for f in 0..k {
        let (lo, hi) = (f * m / k, (f + 1) * m / k);
        let rest: Vec<u64> = groups[..lo].iter().chain(&groups[hi..]).copied().collect();
        let n_val = ((val_fraction * rest.len() as f64).round() as usize).clamp(1, rest.len() - 1);
        let part = |g: u64| {
            if groups[lo..hi].contains(&g) {
                2
            } else if rest[..n_val].contains(&g) {
                1
            } else {
                0
            }
        };
        let mut out = Split { train: vec![], val: vec![], test: vec![] };
        for (i, g) in group_ids.iter().enumerate() {
            match part(*g) {
                0 => out.train.push(i),
                1 => out.val.push(i),
                _ => out.test.push(i),
            }
        }
        folds.push(out);
    }
    Ok(folds)
}
