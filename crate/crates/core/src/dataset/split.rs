use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Cohort;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Assignment {
    Test,
    Fold(usize),
}

impl fmt::Display for Assignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Assignment::Test => write!(f, "test"),
            Assignment::Fold(i) => write!(f, "fold{i}"),
        }
    }
}

impl FromStr for Assignment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "test" {
            return Ok(Assignment::Test);
        }
        s.strip_prefix("fold")
            .and_then(|i| i.parse().ok())
            .map(Assignment::Fold)
            .ok_or_else(|| Error::Schema(format!("unknown split assignment `{s}`")))
    }
}

/// Held-out test set plus k cross-validation folds over the remainder.
///
/// `seed` is `None` when the split was read from a sidecar file that does
/// not record how it was generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: Option<u64>,
    pub test_fraction: f64,
    pub k: usize,
    pub assignments: BTreeMap<String, Assignment>,
}

/// Shuffles the sorted ids with a seeded generator, takes the first
/// `round(n * test_fraction)` as test and deals the rest round-robin.
pub fn make_splits(cohort: &Cohort, seed: u64, test_fraction: f64, k: usize) -> Result<SplitSpec> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "test_fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {k}")));
    }
    let mut ids = cohort.ids();
    ids.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);

    let n_test = (ids.len() as f64 * test_fraction).round() as usize;
    let n_train = ids.len() - n_test;
    if k > n_train {
        return Err(Error::InvalidArgument(format!(
            "{k} folds requested but only {n_train} training records"
        )));
    }
    let mut assignments = BTreeMap::new();
    for (i, id) in ids.into_iter().enumerate() {
        let a = if i < n_test {
            Assignment::Test
        } else {
            Assignment::Fold((i - n_test) % k)
        };
        assignments.insert(id, a);
    }
    Ok(SplitSpec {
        seed: Some(seed),
        test_fraction,
        k,
        assignments,
    })
}

impl SplitSpec {
    fn ids_where(&self, pred: impl Fn(Assignment) -> bool) -> Vec<String> {
        self.assignments
            .iter()
            .filter(|(_, &a)| pred(a))
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn test_ids(&self) -> Vec<String> {
        self.ids_where(|a| a == Assignment::Test)
    }

    /// Every non-test id.
    pub fn train_ids(&self) -> Vec<String> {
        self.ids_where(|a| a != Assignment::Test)
    }

    pub fn fold_ids(&self, fold: usize) -> Vec<String> {
        self.ids_where(|a| a == Assignment::Fold(fold))
    }

    /// Training ids for cross-validation round `fold` (all other folds).
    pub fn train_ids_excluding(&self, fold: usize) -> Vec<String> {
        self.ids_where(|a| matches!(a, Assignment::Fold(i) if i != fold))
    }

    pub fn write_sidecar(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["id", "assignment"])?;
        for (id, a) in &self.assignments {
            w.write_record([id.as_str(), &a.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_sidecar(path: &Path, test_fraction: f64) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut assignments = BTreeMap::new();
        let mut k = 0;
        for row in rdr.records() {
            let row = row?;
            let (id, a) = (row.get(0).unwrap_or(""), row.get(1).unwrap_or(""));
            let a: Assignment = a.trim().parse()?;
            if let Assignment::Fold(i) = a {
                k = k.max(i + 1);
            }
            if assignments.insert(id.trim().to_string(), a).is_some() {
                return Err(Error::validation(id, "listed twice in split file"));
            }
        }
        Ok(Self {
            seed: None,
            test_fraction,
            k,
            assignments,
        })
    }

    /// Checks that the split covers exactly the cohort's ids.
    pub fn check_against(&self, cohort: &Cohort) -> Result<()> {
        if self.assignments.len() != cohort.len() {
            return Err(Error::Schema(format!(
                "split lists {} ids but the cohort has {}",
                self.assignments.len(),
                cohort.len()
            )));
        }
        for r in &cohort.records {
            if !self.assignments.contains_key(&r.id) {
                return Err(Error::validation(&r.id, "missing from split file"));
            }
        }
        Ok(())
    }
}
