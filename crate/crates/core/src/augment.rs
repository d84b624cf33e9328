//! Random over-sampling (ROS) for class balancing.
//!
//! Every class present in the input is topped up to the size of the largest
//! class by duplicating uniformly drawn members of that class, with
//! replacement. The originals are kept in input order and the duplicates are
//! appended after them.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DialogueRecord;
use crate::label::{UnknownLabel, VulnerabilityLabel};

#[derive(Debug, Error)]
#[error("record {index}: {source}")]
pub struct HistogramError {
    pub index: usize,
    #[source]
    pub source: UnknownLabel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassHistogram {
    pub counts: BTreeMap<VulnerabilityLabel, usize>,
}

impl ClassHistogram {
    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn get(&self, label: VulnerabilityLabel) -> usize {
        self.counts.get(&label).copied().unwrap_or(0)
    }

    pub fn max(&self) -> usize {
        self.counts.values().copied().max().unwrap_or(0)
    }
}

impl fmt::Display for ClassHistogram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (label, n) in &self.counts {
            writeln!(f, "{:<22}{:>8}", label.canonical_name(), n)?;
        }
        write!(f, "{:<22}{:>8}", "total", self.total())
    }
}

/// Counts labels over all five classes; absent classes are reported as zero.
pub fn histogram(records: &[DialogueRecord]) -> Result<ClassHistogram, HistogramError> {
    let mut counts: BTreeMap<VulnerabilityLabel, usize> =
        VulnerabilityLabel::ALL.iter().map(|&l| (l, 0)).collect();
    for (index, r) in records.iter().enumerate() {
        let label = r.label().map_err(|source| HistogramError { index, source })?;
        *counts.get_mut(&label).expect("all labels pre-seeded") += 1;
    }
    Ok(ClassHistogram { counts })
}

/// Generic ROS over any keyed items.
///
/// Classes are topped up in ascending key order, each drawing from one shared
/// `ChaCha8Rng` stream seeded with `seed`.
pub fn oversample<T, K, E, F>(items: &[T], key_of: F, seed: u64) -> Result<Vec<T>, E>
where
    T: Clone,
    K: Ord,
    F: Fn(&T) -> Result<K, E>,
{
    let mut classes: BTreeMap<K, Vec<usize>> = BTreeMap::new();
    for (i, item) in items.iter().enumerate() {
        classes.entry(key_of(item)?).or_default().push(i);
    }
    let majority = classes.values().map(Vec::len).max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<T> = items.to_vec();
    out.reserve(majority * classes.len() - items.len());
    for members in classes.values() {
        for _ in members.len()..majority {
            let pick = members[rng.random_range(0..members.len())];
            out.push(items[pick].clone());
        }
    }
    Ok(out)
}

/// Balances dialogue records by label.
pub fn ros_balance(records: &[DialogueRecord], seed: u64) -> Result<Vec<DialogueRecord>, HistogramError> {
    let labels: Vec<VulnerabilityLabel> = records
        .iter()
        .enumerate()
        .map(|(index, r)| r.label().map_err(|source| HistogramError { index, source }))
        .collect::<Result<_, _>>()?;
    let indexed: Vec<usize> = (0..records.len()).collect();
    let picks = oversample(&indexed, |&i| Ok::<_, HistogramError>(labels[i]), seed)?;
    Ok(picks.into_iter().map(|i| records[i].clone()).collect())
}
