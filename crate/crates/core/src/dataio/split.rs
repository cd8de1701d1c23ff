use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    pub fn new(train: f64, val: f64, test: f64) -> Self {
        SplitFractions { train, val, test }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.val, self.test];
        if all.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(Error::InvalidConfig("split fractions must be non-negative".into()));
        }
        if (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig("split fractions must sum to 1".into()));
        }
        Ok(())
    }

    /// Patient counts per split: val and test are rounded, train takes the rest.
    pub fn patient_counts(&self, total: usize) -> (usize, usize, usize) {
        let val = ((self.val * total as f64).round() as usize).min(total);
        let test = ((self.test * total as f64).round() as usize).min(total - val);
        (total - val - test, val, test)
    }
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions::new(0.7, 0.1, 0.2)
    }
}

/// Patient-disjoint train/val/test split. All slices of a patient land in the
/// same output; rounding remainders go to train.
pub fn split_by_patient(
    manifest: &DatasetManifest,
    fractions: SplitFractions,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest, DatasetManifest)> {
    fractions.validate()?;
    if manifest.is_empty() {
        return Err(Error::InvalidInput("cannot split an empty manifest".into()));
    }
    let mut patients = manifest.patient_ids();
    patients.shuffle(&mut rng::rng(seed));
    let (n_train, n_val, _) = fractions.patient_counts(patients.len());
    let train: BTreeSet<&str> = patients[..n_train].iter().map(String::as_str).collect();
    let val: BTreeSet<&str> = patients[n_train..n_train + n_val].iter().map(String::as_str).collect();
    let test: BTreeSet<&str> = patients[n_train + n_val..].iter().map(String::as_str).collect();
    let part = |set: &BTreeSet<&str>, split: Split, suffix: &str| {
        manifest.filter_records(&format!("{}-{suffix}", manifest.name), split, |r| {
            set.contains(r.patient_id.as_str())
        })
    };
    Ok((
        part(&train, Split::Train, "train"),
        part(&val, Split::Val, "val"),
        part(&test, Split::Test, "test"),
    ))
}
