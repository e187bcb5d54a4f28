use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios { train: 0.7, val: 0.2, test: 0.1 }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [("ratios.train", self.train), ("ratios.val", self.val), ("ratios.test", self.test)];
        if let Some((name, v)) = parts.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::param(*name, format!("{v} is not a non-negative number")));
        }
        let sum = self.train + self.val + self.test;
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::param("ratios", format!("train + val + test = {sum}, expected 1")));
        }
        Ok(())
    }
}

/// `(floor(train * n), round(val * n), remainder)`.
pub fn split_counts(n: usize, ratios: &SplitRatios) -> (usize, usize, usize) {
    // the epsilon keeps products like 0.7 * 10 from landing just under an integer
    let train = ((ratios.train * n as f64 + 1e-9).floor() as usize).min(n);
    let val = ((ratios.val * n as f64).round() as usize).min(n - train);
    (train, val, n - train - val)
}

/// Train / validation / test partition built class by class.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
    pub seed: u64,
    /// Per class `[train, val, test]`.
    pub counts: BTreeMap<String, [usize; 3]>,
}

/// Shuffles each class with its own seeded stream and cuts it by
/// [`split_counts`]. Classes are visited in name order.
pub fn split_dataset<T: Clone>(
    groups: &BTreeMap<String, Vec<T>>,
    ratios: &SplitRatios,
    seed: u64,
) -> Result<DatasetSplit<T>> {
    ratios.validate()?;
    let mut split = DatasetSplit { train: vec![], val: vec![], test: vec![], seed, counts: BTreeMap::new() };
    for (class, items) in groups {
        if items.is_empty() {
            log::warn!("class `{class}` has no records and contributes nothing to the split");
            continue;
        }
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(crate::derive_seed(seed, class)));
        let (tr, va, te) = split_counts(items.len(), ratios);
        split.train.extend(order[..tr].iter().map(|&i| items[i].clone()));
        split.val.extend(order[tr..tr + va].iter().map(|&i| items[i].clone()));
        split.test.extend(order[tr + va..].iter().map(|&i| items[i].clone()));
        split.counts.insert(class.clone(), [tr, va, te]);
    }
    Ok(split)
}
