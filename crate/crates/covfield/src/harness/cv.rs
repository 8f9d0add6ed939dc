//! Hyperparameter selection by cross-validated held-out likelihood.
//!
//! Hyperparameters are re-selected per fold and the full (cell x fold) score
//! table is returned alongside pooled scores, so both per-fold winners and
//! the pooled argmax are available.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::split::{split, CvPlan, SplitScheme};
use super::Dataset;
use crate::error::{Error, Result};
use crate::inference::{fit, FitConfig};
use crate::model::{CovarianceVariant, ModelSpec};
use crate::posterior::{heldout_loglik, HeldoutMode};
use crate::util::derive_seed;

/// Hyperparameter grid; every combination is scored.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvConfig {
    pub lambda_mu: Vec<f64>,
    pub lambda_sigma: Vec<f64>,
    pub p: Vec<usize>,
    pub variant: Vec<CovarianceVariant>,
    #[serde(default = "default_folds")]
    pub folds: usize,
    /// Train/val fractions inside each fold (test is the remainder).
    #[serde(default = "default_train_fraction")]
    pub train: f64,
    #[serde(default = "default_val_fraction")]
    pub val: f64,
}

fn default_folds() -> usize {
    5
}
fn default_train_fraction() -> f64 {
    0.6
}
fn default_val_fraction() -> f64 {
    0.25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvCell {
    pub lambda_mu: f64,
    pub lambda_sigma: f64,
    pub p: usize,
    pub variant: CovarianceVariant,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvRow {
    pub cell: CvCell,
    pub fold: usize,
    /// Validation log-likelihood (single-sample mode); -inf when the fit
    /// failed, with the failure recorded.
    pub score: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvOutcome {
    pub best: CvCell,
    pub best_pooled_score: f64,
    /// Per-fold winners (hyperparameters re-selected per fold).
    pub per_fold_best: Vec<CvCell>,
    pub table: Vec<CvRow>,
}

/// Fit every (cell, fold) pair, score single-sample validation
/// log-likelihood, return the pooled argmax and the full table.
pub fn cv_select(
    dataset: &Dataset,
    base_spec: &ModelSpec,
    grid_cfg: &CvConfig,
    fit_cfg: &FitConfig,
    seed: u64,
) -> Result<CvOutcome> {
    dataset.validate()?;
    let mut cells = Vec::new();
    for &lm in &grid_cfg.lambda_mu {
        for &ls in &grid_cfg.lambda_sigma {
            for &p in &grid_cfg.p {
                for &variant in &grid_cfg.variant {
                    cells.push(CvCell {
                        lambda_mu: lm,
                        lambda_sigma: ls,
                        p,
                        variant,
                    });
                }
            }
        }
    }
    if cells.is_empty() || grid_cfg.folds == 0 {
        return Err(Error::invalid_input("empty cross-validation grid"));
    }

    // One trial split per fold, seeds derived from the base seed.
    let mut fold_plans = Vec::with_capacity(grid_cfg.folds);
    for f in 0..grid_cfg.folds {
        let scheme = SplitScheme::TrialFraction {
            train: grid_cfg.train,
            val: grid_cfg.val,
            test: 1.0 - grid_cfg.train - grid_cfg.val,
            seed: derive_seed(seed, 0x666f_6c64 ^ f as u64),
        };
        fold_plans.push(split(dataset, &scheme)?);
    }

    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|ci| (0..grid_cfg.folds).map(move |f| (ci, f)))
        .collect();

    let rows: Vec<CvRow> = jobs
        .par_iter()
        .map(|&(ci, f)| {
            let cell = &cells[ci];
            let run = || -> Result<f64> {
                let (train, val, _) = match &fold_plans[f] {
                    CvPlan::Trials(_) => fold_plans[f].partition(dataset)?,
                    _ => unreachable!(),
                };
                let spec = ModelSpec {
                    p: cell.p,
                    variant: cell.variant,
                    k_mu: kernel_with_lambda(&base_spec.k_mu, cell.lambda_mu)?,
                    k_sigma: kernel_with_lambda(&base_spec.k_sigma, cell.lambda_sigma)?,
                    ..base_spec.clone()
                };
                spec.validate()?;
                let cfg = FitConfig {
                    seed: derive_seed(seed, (ci * grid_cfg.folds + f) as u64),
                    ..fit_cfg.clone()
                };
                let post = fit(&spec, &dataset.grid, &train, &cfg)?;
                heldout_loglik(
                    &post,
                    &dataset.grid,
                    &val,
                    HeldoutMode::SingleSample {
                        seed: derive_seed(seed, 0x7363 ^ (ci * grid_cfg.folds + f) as u64),
                    },
                )
            };
            match run() {
                Ok(score) => CvRow {
                    cell: cell.clone(),
                    fold: f,
                    score,
                    error: None,
                },
                Err(e) => CvRow {
                    cell: cell.clone(),
                    fold: f,
                    score: f64::NEG_INFINITY,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();

    // Pooled scores per cell and per-fold winners.
    let mut pooled = vec![0.0f64; cells.len()];
    for row in &rows {
        let ci = cells.iter().position(|c| c == &row.cell).unwrap();
        pooled[ci] += row.score / grid_cfg.folds as f64;
    }
    let best_idx = pooled
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
        .map(|(i, _)| i)
        .unwrap();

    let mut per_fold_best = Vec::with_capacity(grid_cfg.folds);
    for f in 0..grid_cfg.folds {
        let winner = rows
            .iter()
            .filter(|r| r.fold == f)
            .max_by(|a, b| a.score.partial_cmp(&b.score).unwrap_or(std::cmp::Ordering::Equal))
            .unwrap();
        per_fold_best.push(winner.cell.clone());
    }

    Ok(CvOutcome {
        best: cells[best_idx].clone(),
        best_pooled_score: pooled[best_idx],
        per_fold_best,
        table: rows,
    })
}

fn kernel_with_lambda(
    kernel: &crate::kernels::ProductKernel,
    lambda: f64,
) -> Result<crate::kernels::ProductKernel> {
    let axes: Result<Vec<_>> = kernel.axes().iter().map(|a| a.with_lambda(lambda)).collect();
    crate::kernels::ProductKernel::new(axes?)
}
