//! Censored survival records, time-bin discretization and stratified
//! K-fold assignment.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub case_id: String,
    pub survival_months: f64,
    /// `true` when the event was not observed during follow-up.
    pub censored: bool,
    /// Time bin, set by [`discretize`].
    pub bin: Option<usize>,
}

impl PatientRecord {
    pub fn new(case_id: impl Into<String>, survival_months: f64, censored: bool) -> Self {
        PatientRecord {
            case_id: case_id.into(),
            survival_months,
            censored,
            bin: None,
        }
    }
}

/// `B − 1` strictly increasing cut points splitting time into `B`
/// right-open intervals; the last interval is unbounded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinEdges {
    pub edges: Vec<f64>,
}

impl BinEdges {
    pub fn bins(&self) -> usize {
        self.edges.len() + 1
    }

    pub fn bin_of(&self, t: f64) -> usize {
        self.edges.iter().take_while(|&&e| e <= t).count()
    }
}

/// Cuts time at the `B`-quantiles of the distinct uncensored survival times
/// of the whole cohort and labels every patient with its interval.
///
/// The `k`-th edge is the sorted distinct time at index `⌊k·n/B⌋`, so for
/// `{10, 20, 30, 40}` and `B = 4` the edges are `{20, 30, 40}`.
pub fn discretize(records: &mut [PatientRecord], bins: usize) -> Result<BinEdges> {
    if bins < 2 {
        return Err(Error::Config(format!("need at least 2 bins, got {bins}")));
    }
    let mut times: Vec<f64> = records
        .iter()
        .filter(|r| !r.censored)
        .map(|r| r.survival_months)
        .collect();
    times.sort_by(|a, b| a.total_cmp(b));
    times.dedup();
    if times.len() < bins {
        return Err(Error::DegenerateCohort(format!(
            "{} distinct uncensored survival times, need at least {bins}",
            times.len()
        )));
    }
    let n = times.len();
    let edges = BinEdges {
        edges: (1..bins).map(|k| times[k * n / bins]).collect(),
    };
    for r in records.iter_mut() {
        r.bin = Some(edges.bin_of(r.survival_months));
    }
    Ok(edges)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub k: usize,
    pub assignments: BTreeMap<String, usize>,
}

impl FoldSplit {
    pub fn fold_of(&self, case_id: &str) -> Option<usize> {
        self.assignments.get(case_id).copied()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = alloc::vec![0; self.k];
        for &f in self.assignments.values() {
            sizes[f] += 1;
        }
        sizes
    }

    /// `(training, validation)` case ids for `fold`, each in case-id order.
    pub fn partition(&self, fold: usize) -> (Vec<&str>, Vec<&str>) {
        let (val, train): (Vec<_>, Vec<_>) = self.assignments.iter().partition(|(_, &f)| f == fold);
        (
            train.into_iter().map(|(c, _)| c.as_str()).collect(),
            val.into_iter().map(|(c, _)| c.as_str()).collect(),
        )
    }
}

/// Stratified, seeded K-fold assignment.
///
/// Uncensored then censored patients are each shuffled and dealt round-robin,
/// the censored stratum continuing where the uncensored one stopped. Fold
/// sizes therefore differ by at most one overall and within each stratum.
pub fn split_kfold(records: &[PatientRecord], k: usize, rng: &mut Rng) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::Config(format!("K must be at least 2, got {k}")));
    }
    if records.len() < k {
        return Err(Error::Config(format!("K={k} exceeds cohort size {}", records.len())));
    }
    let mut assignments = BTreeMap::new();
    let mut next = 0;
    for censored in [false, true] {
        let mut stratum: Vec<&PatientRecord> = records.iter().filter(|r| r.censored == censored).collect();
        rng.shuffle(&mut stratum);
        for r in stratum {
            if assignments.insert(r.case_id.clone(), next).is_some() {
                return Err(Error::Ingestion(format!("duplicate case_id '{}'", r.case_id)));
            }
            next = (next + 1) % k;
        }
    }
    Ok(FoldSplit { k, assignments })
}
