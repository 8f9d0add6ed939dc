//! Data model, file formats, synthetic generation, cross-validation, and
//! experiment orchestration.

mod config;
mod cv;
mod experiment;
mod formats;
mod split;
mod synth;

pub use config::{
    DataConfig, DecodeConfig, EvaluateConfig, ExperimentConfig, FisherConfig, HeldoutModeName,
    MethodName, ModelConfig, PredictConfig, SplitConfig,
};
pub use cv::{cv_select, CvCell, CvConfig, CvOutcome, CvRow};
pub use experiment::{
    interpolate_heldout_conditions, run_experiment, InterpolationRow, Metric, Report,
};
pub use formats::{
    export_moment_field, read_dataset, read_moment_field, read_posterior_bundle, write_dataset,
    write_elbo_trace, write_posterior_bundle,
};
pub use split::{split, CvPlan, SplitScheme, TrialSplit};
pub use synth::{generate_synthetic, ScaleMode, SyntheticParams};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::grid::ConditionGrid;
use crate::model::MomentField;

/// Trials arranged per condition, possibly ragged across conditions.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub grid: ConditionGrid,
    /// One K_c x N matrix per condition (rows are trials).
    pub trials: Vec<DMatrix<f64>>,
    /// Ground-truth moments, synthetic data only.
    pub truth: Option<MomentField>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        if self.trials.len() != self.grid.len() {
            return Err(Error::dim(format!(
                "{} conditions but {} trial blocks",
                self.grid.len(),
                self.trials.len()
            )));
        }
        if self.trials.is_empty() {
            return Err(Error::invalid_input("dataset has no conditions"));
        }
        let n = self.trials[0].ncols();
        for (ci, y) in self.trials.iter().enumerate() {
            if y.ncols() != n {
                return Err(Error::dim(format!(
                    "condition {ci} has {} neurons, expected {n}",
                    y.ncols()
                )));
            }
            if y.nrows() == 0 {
                return Err(Error::invalid_input(format!(
                    "condition {ci} has no trials"
                )));
            }
        }
        if let Some(t) = &self.truth {
            if t.len() != self.grid.len() {
                return Err(Error::dim("ground truth length != condition count"));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.trials.first().map(|y| y.ncols()).unwrap_or(0)
    }

    pub fn c(&self) -> usize {
        self.grid.len()
    }

    pub fn k_per_condition(&self) -> Vec<usize> {
        self.trials.iter().map(|y| y.nrows()).collect()
    }

    /// Rows of every condition restricted to the given trial indices.
    pub fn select_trials(&self, rows: &[Vec<usize>]) -> Result<Vec<DMatrix<f64>>> {
        if rows.len() != self.trials.len() {
            return Err(Error::dim("one index list per condition required"));
        }
        let mut out = Vec::with_capacity(rows.len());
        for (y, idx) in self.trials.iter().zip(rows.iter()) {
            let mut m = DMatrix::<f64>::zeros(idx.len(), y.ncols());
            for (ri, &k) in idx.iter().enumerate() {
                if k >= y.nrows() {
                    return Err(Error::invalid_input(format!("trial index {k} out of range")));
                }
                m.row_mut(ri).copy_from(&y.row(k));
            }
            out.push(m);
        }
        Ok(out)
    }
}
