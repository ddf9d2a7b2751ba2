//! Seeded train/validation/test splits, class balancing and out-of-distribution
//! partitions.
//!
//! All randomness comes from ChaCha8 seeded with the caller's `u64` seed, so a
//! given (corpus, seed) pair produces the same assignment on every platform.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labeling::Label;
use crate::report::Report;

/// Name of the generator behind every seeded operation, echoed into run configs.
pub const RNG_ALGORITHM: &str = "ChaCha8 (rand_chacha 0.9, seed_from_u64)";

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("duplicate report id {0}")]
    DuplicateId(String),
    #[error("class {0} has no examples")]
    MissingClass(Label),
    #[error("invalid split ratios {0:?}")]
    InvalidRatios(Vec<f64>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Subset {
    Train,
    Val,
    Test,
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Subset::Train => "train",
            Subset::Val => "val",
            Subset::Test => "test",
        })
    }
}

/// Train/validation/test proportions. Validation and test take the floor of
/// their share; train takes the remainder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.8, val: 0.1, test: 0.1 }
    }
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self, CorpusError> {
        let r = Self { train, val, test };
        let ok =
            [train, val, test].iter().all(|v| v.is_finite() && *v >= 0.0) && ((train + val + test) - 1.0).abs() < 1e-9;
        if ok {
            Ok(r)
        } else {
            Err(CorpusError::InvalidRatios(vec![train, val, test]))
        }
    }

    /// (train, val, test) counts for `n` items.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let floor = |r: f64| ((r * n as f64) + 1e-9).floor() as usize;
        let val = floor(self.val);
        let test = floor(self.test);
        (n - val - test, val, test)
    }
}

impl FromStr for SplitRatios {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>().unwrap_or(f64::NAN)).collect();
        match parts.as_slice() {
            [a, b, c] => SplitRatios::new(*a, *b, *c),
            _ => Err(CorpusError::InvalidRatios(parts)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub assignment: BTreeMap<String, Subset>,
}

impl SplitAssignment {
    pub fn ids(&self, subset: Subset) -> Vec<String> {
        self.assignment.iter().filter(|(_, s)| **s == subset).map(|(id, _)| id.clone()).collect()
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        let mut c = (0, 0, 0);
        for s in self.assignment.values() {
            match s {
                Subset::Train => c.0 += 1,
                Subset::Val => c.1 += 1,
                Subset::Test => c.2 += 1,
            }
        }
        c
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "report_id,subset")?;
        for (id, s) in &self.assignment {
            writeln!(w, "{id},{s}")?;
        }
        Ok(())
    }
}

/// Stratified seeded split.
///
/// Ids are sorted, then shuffled within each label stratum (reports without a
/// label form their own stratum). Strata are interleaved by relative rank so
/// that cutting the merged order at the subset sizes keeps every stratum's
/// proportions within one item of the target.
pub fn split(
    corpus: &[Report],
    labels: &BTreeMap<String, Label>,
    seed: u64,
    ratios: SplitRatios,
) -> Result<SplitAssignment, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let mut strata: BTreeMap<Option<Label>, Vec<&str>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for r in corpus {
        if !seen.insert(r.id.as_str()) {
            return Err(CorpusError::DuplicateId(r.id.clone()));
        }
        strata.entry(labels.get(&r.id).copied()).or_default().push(&r.id);
    }
    let mut rng = seeded_rng(seed);
    let mut merged: Vec<(f64, usize, &str)> = Vec::with_capacity(corpus.len());
    for (stratum_idx, ids) in strata.values_mut().enumerate() {
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        let n = ids.len() as f64;
        for (i, id) in ids.iter().enumerate() {
            merged.push(((i as f64 + 0.5) / n, stratum_idx, id));
        }
    }
    merged.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let (train, val, _) = ratios.sizes(merged.len());
    let assignment = merged
        .into_iter()
        .enumerate()
        .map(|(i, (_, _, id))| {
            let s = if i < train {
                Subset::Train
            } else if i < train + val {
                Subset::Val
            } else {
                Subset::Test
            };
            (id.to_string(), s)
        })
        .collect();
    Ok(SplitAssignment { seed, assignment })
}

/// All minority-class ids plus an equal-size seeded sample of the majority.
/// Output is sorted by id.
pub fn balance(train_ids: &[String], labels: &BTreeMap<String, Label>, seed: u64) -> Result<Vec<String>, CorpusError> {
    let mut normal: Vec<&String> = Vec::new();
    let mut abnormal: Vec<&String> = Vec::new();
    for id in train_ids {
        match labels.get(id) {
            Some(Label::Normal) => normal.push(id),
            Some(Label::Abnormal) => abnormal.push(id),
            _ => {}
        }
    }
    if normal.is_empty() {
        return Err(CorpusError::MissingClass(Label::Normal));
    }
    if abnormal.is_empty() {
        return Err(CorpusError::MissingClass(Label::Abnormal));
    }
    normal.sort();
    abnormal.sort();
    let (minority, mut majority) = if normal.len() <= abnormal.len() { (normal, abnormal) } else { (abnormal, normal) };
    let mut rng = seeded_rng(seed);
    majority.shuffle(&mut rng);
    majority.truncate(minority.len());
    let mut out: Vec<String> = minority.into_iter().chain(majority).cloned().collect();
    out.sort();
    Ok(out)
}

/// In-distribution reports predate `cutoff_year` and come from any site but
/// the held-out one; everything else is out of distribution.
pub fn ood_partition<'a>(
    corpus: &'a [Report],
    cutoff_year: i32,
    holdout_site: Option<&str>,
) -> (Vec<&'a Report>, Vec<&'a Report>) {
    corpus
        .iter()
        .partition(|r| r.exam_year < cutoff_year && holdout_site.is_none_or(|h| !r.site.eq_ignore_ascii_case(h)))
}
