use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::csv_io::Dataset;
use crate::error::{Error, Result};

pub const DEFAULT_TRAIN_RATIO: f64 = 0.8;

#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub train_individuals: BTreeSet<String>,
    pub test_individuals: BTreeSet<String>,
    pub ratio: f64,
}

impl SplitSpec {
    pub fn apply(&self, data: &Dataset) -> (Dataset, Dataset) {
        (data.subset(&self.train_individuals), data.subset(&self.test_individuals))
    }
}

/// Shuffles individuals with `seed`, then moves them to train until the
/// train share of cells first reaches `ratio`. Each side keeps at least one
/// individual.
pub fn split_by_individual(data: &Dataset, ratio: f64, seed: u64) -> Result<SplitSpec> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("split ratio {ratio} outside [0, 1]")));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &data.records {
        *counts.entry(r.individual_id.as_str()).or_default() += 1;
    }
    if counts.len() < 2 {
        return Err(Error::Data(format!(
            "need at least 2 individuals to split, found {}",
            counts.len()
        )));
    }
    let mut order: Vec<&str> = counts.keys().copied().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let total = data.len() as f64;
    let mut train = BTreeSet::new();
    let mut cells = 0usize;
    for (i, id) in order.iter().enumerate() {
        let remaining = order.len() - i;
        if !train.is_empty() && (cells as f64 / total >= ratio || remaining == 1) {
            break;
        }
        train.insert(id.to_string());
        cells += counts[id];
    }
    let test = order
        .iter()
        .filter(|id| !train.contains(**id))
        .map(|s| s.to_string())
        .collect();
    Ok(SplitSpec {
        train_individuals: train,
        test_individuals: test,
        ratio,
    })
}
