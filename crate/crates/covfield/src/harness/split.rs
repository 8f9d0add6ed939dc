//! Train/validation/test splits: per-condition stratified trial splits and
//! whole-condition holdouts for interpolation experiments.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::util::rng_for_task;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitScheme {
    /// Per-condition stratified split; rounding rule: train = floor(f*K),
    /// val = floor(f*K), test = remainder.
    TrialFraction {
        train: f64,
        val: f64,
        test: f64,
        seed: u64,
    },
    /// Hold out whole conditions (interpolation experiments).
    HoldoutConditions { indices: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum CvPlan {
    /// One trial split per condition.
    Trials(Vec<TrialSplit>),
    /// Conditions kept for training vs held out entirely.
    Conditions {
        train: Vec<usize>,
        held_out: Vec<usize>,
    },
}

pub fn split(dataset: &Dataset, scheme: &SplitScheme) -> Result<CvPlan> {
    dataset.validate()?;
    match scheme {
        SplitScheme::TrialFraction {
            train,
            val,
            test,
            seed,
        } => {
            if !(*train >= 0.0 && *val >= 0.0 && *test >= 0.0) {
                return Err(Error::invalid_parameter("fractions must be nonnegative"));
            }
            if ((train + val + test) - 1.0).abs() > 1e-9 {
                return Err(Error::invalid_parameter(
                    "split fractions must sum to 1 within 1e-9",
                ));
            }
            let mut per_condition = Vec::with_capacity(dataset.c());
            for (ci, y) in dataset.trials.iter().enumerate() {
                let k = y.nrows();
                let n_train = (train * k as f64).floor() as usize;
                let n_val = (val * k as f64).floor() as usize;
                if n_train == 0 {
                    return Err(Error::invalid_input(format!(
                        "condition {ci}: split leaves zero train trials"
                    )));
                }
                // deterministic shuffle, one stream per condition
                let mut idx: Vec<usize> = (0..k).collect();
                let mut rng = rng_for_task(*seed, ci as u64);
                for i in (1..k).rev() {
                    let j = rng.random_range(0..(i + 1) as u64) as usize;
                    idx.swap(i, j);
                }
                let train_idx = idx[..n_train].to_vec();
                let val_idx = idx[n_train..n_train + n_val].to_vec();
                let test_idx = idx[n_train + n_val..].to_vec();
                per_condition.push(TrialSplit {
                    train: train_idx,
                    val: val_idx,
                    test: test_idx,
                });
            }
            Ok(CvPlan::Trials(per_condition))
        }
        SplitScheme::HoldoutConditions { indices } => {
            let c = dataset.c();
            let mut held = indices.clone();
            held.sort_unstable();
            held.dedup();
            if held.len() != indices.len() {
                return Err(Error::invalid_input("duplicate holdout indices"));
            }
            if let Some(&bad) = held.iter().find(|&&i| i >= c) {
                return Err(Error::invalid_input(format!(
                    "holdout index {bad} out of range (C = {c})"
                )));
            }
            if held.len() == c {
                return Err(Error::invalid_input("cannot hold out every condition"));
            }
            let train = (0..c).filter(|i| !held.contains(i)).collect();
            Ok(CvPlan::Conditions {
                train,
                held_out: held,
            })
        }
    }
}

impl CvPlan {
    /// Train/val/test trial blocks for a trial-level plan.
    pub fn partition(
        &self,
        dataset: &Dataset,
    ) -> Result<(
        Vec<nalgebra::DMatrix<f64>>,
        Vec<nalgebra::DMatrix<f64>>,
        Vec<nalgebra::DMatrix<f64>>,
    )> {
        match self {
            CvPlan::Trials(splits) => {
                let train: Vec<Vec<usize>> = splits.iter().map(|s| s.train.clone()).collect();
                let val: Vec<Vec<usize>> = splits.iter().map(|s| s.val.clone()).collect();
                let test: Vec<Vec<usize>> = splits.iter().map(|s| s.test.clone()).collect();
                Ok((
                    dataset.select_trials(&train)?,
                    dataset.select_trials(&val)?,
                    dataset.select_trials(&test)?,
                ))
            }
            CvPlan::Conditions { .. } => Err(Error::invalid_input(
                "condition-holdout plans have no trial-level partition",
            )),
        }
    }
}
