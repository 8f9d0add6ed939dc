//! Versioned JSON configuration consumed by the CLI and `run_experiment`.

use serde::{Deserialize, Serialize};

use super::cv::CvConfig;
use super::formats::SCHEMA_VERSION;
use super::split::SplitScheme;
use super::synth::SyntheticParams;
use crate::baselines::LedoitWolfTarget;
use crate::error::{Error, Result};
use crate::inference::FitConfig;
use crate::kernels::{AxisKernel, ProductKernel};
use crate::model::{CovarianceVariant, ModelSpec, Observation};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataConfig {
    Synthetic(SyntheticParams),
    Load { path: String },
}

/// Model section; `n` comes from the data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub p: usize,
    pub variant: CovarianceVariant,
    #[serde(default)]
    pub use_diag: bool,
    #[serde(default = "default_observation")]
    pub observation: Observation,
    /// One axis kernel per grid axis (keys: kind, gamma, beta, lambda, period).
    pub kernel_mu: Vec<AxisKernel>,
    pub kernel_sigma: Vec<AxisKernel>,
}

fn default_observation() -> Observation {
    Observation::Normal
}

impl ModelConfig {
    pub fn to_spec(&self, n: usize) -> Result<ModelSpec> {
        let spec = ModelSpec {
            n,
            p: self.p,
            k_mu: ProductKernel::new(self.kernel_mu.clone())?,
            k_sigma: ProductKernel::new(self.kernel_sigma.clone())?,
            variant: self.variant,
            use_diag: self.use_diag,
            observation: self.observation,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    Wishart,
    Empirical,
    Grand,
    Wa,
    Lw,
    Glasso,
}

impl MethodName {
    pub fn as_str(&self) -> &'static str {
        match self {
            MethodName::Wishart => "wishart",
            MethodName::Empirical => "empirical",
            MethodName::Grand => "grand",
            MethodName::Wa => "wa",
            MethodName::Lw => "lw",
            MethodName::Glasso => "glasso",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeldoutModeName {
    SingleSample,
    Mc,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluateConfig {
    #[serde(default = "default_heldout_mode")]
    pub heldout: HeldoutModeName,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    /// Operator-norm error against ground truth (synthetic data only; on
    /// real data the metric is reported unavailable, never fabricated).
    #[serde(default = "default_true")]
    pub opnorm_vs_truth: bool,
}

fn default_heldout_mode() -> HeldoutModeName {
    HeldoutModeName::SingleSample
}
fn default_mc_samples() -> usize {
    100
}
fn default_true() -> bool {
    true
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            heldout: default_heldout_mode(),
            mc_samples: default_mc_samples(),
            opnorm_vs_truth: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictConfig {
    pub targets: Vec<Vec<f64>>,
    #[serde(default = "default_predict_samples")]
    pub samples: usize,
    /// Mean-field plug-in mode (point estimates) instead of posterior draws.
    #[serde(default)]
    pub plugin: bool,
}

fn default_predict_samples() -> usize {
    100
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FisherConfig {
    #[serde(default)]
    pub axis: usize,
    /// Explicit evaluation points; when absent, `n_points` equispaced points
    /// along the (periodic) first axis are used.
    #[serde(default)]
    pub points: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_fisher_points")]
    pub n_points: usize,
    #[serde(default = "default_fisher_samples")]
    pub samples: usize,
}

fn default_fisher_points() -> usize {
    36
}
fn default_fisher_samples() -> usize {
    500
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// Methods to decode with (wishart uses QDA on plug-in moments; grand
    /// uses LDA with the pooled covariance; others use QDA on their
    /// per-condition estimates).
    pub methods: Vec<MethodName>,
}

/// Split section of the config; the seed defaults to the experiment seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitConfig {
    TrialFraction { train: f64, val: f64, test: f64 },
    HoldoutConditions { indices: Vec<usize> },
}

impl SplitConfig {
    pub fn to_scheme(&self, seed: u64) -> SplitScheme {
        match self {
            SplitConfig::TrialFraction { train, val, test } => SplitScheme::TrialFraction {
                train: *train,
                val: *val,
                test: *test,
                seed,
            },
            SplitConfig::HoldoutConditions { indices } => SplitScheme::HoldoutConditions {
                indices: indices.clone(),
            },
        }
    }
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig::TrialFraction {
            train: 0.6,
            val: 0.25,
            test: 0.15,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub fit: Option<FitConfig>,
    #[serde(default)]
    pub split: Option<SplitConfig>,
    #[serde(default)]
    pub methods: Vec<MethodName>,
    #[serde(default = "default_wa_alphas")]
    pub wa_alphas: Vec<f64>,
    #[serde(default = "default_glasso_rho")]
    pub glasso_rho: f64,
    #[serde(default = "default_lw_target")]
    pub lw_target: LedoitWolfTarget,
    #[serde(default)]
    pub evaluate: EvaluateConfig,
    #[serde(default)]
    pub cv: Option<CvConfig>,
    #[serde(default)]
    pub predict: Option<PredictConfig>,
    #[serde(default)]
    pub fisher: Option<FisherConfig>,
    #[serde(default)]
    pub decode: Option<DecodeConfig>,
}

fn default_wa_alphas() -> Vec<f64> {
    vec![0.0, 0.25, 0.5, 0.75, 1.0]
}
fn default_glasso_rho() -> f64 {
    0.1
}
fn default_lw_target() -> LedoitWolfTarget {
    LedoitWolfTarget::ScaledIdentity
}

impl ExperimentConfig {
    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (this build reads {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        for &a in &self.wa_alphas {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!("wa alpha {a} outside [0, 1]")));
            }
        }
        if self.glasso_rho < 0.0 {
            return Err(Error::Config("glasso_rho must be >= 0".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parses_with_defaults() {
        let json = r#"{
            "schema_version": 1,
            "seed": 7,
            "data": { "synthetic": { "n": 10, "c": 8, "k": 5 } },
            "methods": ["wishart", "grand", "lw"]
        }"#;
        let cfg: ExperimentConfig = serde_json::from_str(json).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.wa_alphas.len(), 5);
        assert!(matches!(cfg.data, DataConfig::Synthetic(_)));
    }

    #[test]
    fn kernel_config_uses_documented_keys() {
        let json = r#"{
            "p": 2,
            "variant": "scaled-lrd",
            "kernel_mu": [{"kind": "periodic", "gamma": 0.001, "beta": 1.0, "lambda": 1.0, "period": 6.283185307179586}],
            "kernel_sigma": [{"kind": "squared-exponential", "gamma": 0.001, "beta": 1.0, "lambda": 2.0}]
        }"#;
        let mc: ModelConfig = serde_json::from_str(json).unwrap();
        let spec = mc.to_spec(5).unwrap();
        assert_eq!(spec.p, 2);
        assert_eq!(spec.k_mu.dim(), 1);
    }

    #[test]
    fn wrong_schema_version_rejected() {
        let json = r#"{ "schema_version": 99, "data": { "load": { "path": "x" } } }"#;
        let cfg: ExperimentConfig = serde_json::from_str(json).unwrap();
        assert!(cfg.validate().is_err());
    }
}
