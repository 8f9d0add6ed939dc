//! Experiment orchestration: generate/load -> split -> fit methods ->
//! evaluate -> report bundle on disk. Fully reproducible from
//! (config, seed); reports carry no timestamps, so identical runs produce
//! byte-identical artifacts.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::config::{
    DataConfig, ExperimentConfig, HeldoutModeName, MethodName,
};
use super::formats::{
    read_dataset, write_elbo_trace, write_posterior_bundle, SCHEMA_VERSION,
};
use super::split::{split, CvPlan};
use super::synth::generate_synthetic;
use super::Dataset;
use crate::analysis::{operator_norm_error, ClassModel};
use crate::baselines::{
    empirical, graphical_lasso, grand_empirical, ledoit_wolf, trial_mean, weighted_average,
};
use crate::error::{Error, Result};
use crate::inference::{fit, FitConfig, Posterior};
use crate::model::{loglik_normal, ModelSpec, Observation};
use crate::posterior::{
    heldout_loglik, marginal_loglik_poisson, predict_moments, predict_moments_plugin,
    HeldoutMode,
};
use crate::util::derive_seed;

const FIT_SEED_TAG: u64 = 0x6669_7400;
const EVAL_SEED_TAG: u64 = 0x6576_616c;
const PREDICT_SEED_TAG: u64 = 0x7072_6564;
const FISHER_SEED_TAG: u64 = 0x6669_7368;

/// JSON-safe float: non-finite values serialize as strings ("-inf", "inf",
/// "nan") instead of null, so reports stay machine-readable and lossless.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metric(pub f64);

impl Serialize for Metric {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            s.serialize_f64(self.0)
        } else if self.0 == f64::NEG_INFINITY {
            s.serialize_str("-inf")
        } else if self.0 == f64::INFINITY {
            s.serialize_str("inf")
        } else {
            s.serialize_str("nan")
        }
    }
}

impl<'de> Deserialize<'de> for Metric {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        let v = match Raw::deserialize(d)? {
            Raw::Num(x) => x,
            Raw::Str(s) => match s.as_str() {
                "-inf" => f64::NEG_INFINITY,
                "inf" => f64::INFINITY,
                _ => f64::NAN,
            },
        };
        Ok(Metric(v))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n: usize,
    pub c: usize,
    pub k_per_condition: Vec<usize>,
    pub synthetic: bool,
    pub has_ground_truth: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WaAlphaEntry {
    pub alpha: f64,
    pub heldout_loglik: Metric,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub opnorm_error_mean: Option<Metric>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub heldout_loglik: Metric,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub opnorm_error_mean: Option<Metric>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub opnorm_unavailable_reason: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_elbo: Option<Metric>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lw_intensity_mean: Option<Metric>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wa_best_alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wa_table: Option<Vec<WaAlphaEntry>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub glasso_converged: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeReport {
    pub method: String,
    pub accuracy: f64,
    pub test_trials: usize,
    /// Row = true class, column = predicted; flattened row-major.
    pub confusion: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FisherPoint {
    pub x: Vec<f64>,
    pub mean: Metric,
    pub lo90: Metric,
    pub hi90: Metric,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: String,
    pub error: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub seed: u64,
    pub dataset: DatasetSummary,
    pub methods: Vec<MethodReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decode: Option<Vec<DecodeReport>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fisher: Option<Vec<FisherPoint>>,
    pub incomplete: Vec<StageFailure>,
}

/// Per-condition covariance estimates plus the means used for scoring.
pub(crate) struct MethodEstimate {
    pub sigmas: Vec<DMatrix<f64>>,
    pub means: Vec<DVector<f64>>,
}

/// Baseline estimate on the training split.
pub(crate) fn baseline_estimate(
    method: MethodName,
    cfg: &ExperimentConfig,
    train: &[DMatrix<f64>],
) -> Result<(MethodEstimate, MethodReport)> {
    let means: Vec<DVector<f64>> = train.iter().map(trial_mean).collect();
    let mut report = MethodReport {
        method: method.as_str().to_string(),
        heldout_loglik: Metric(f64::NAN),
        opnorm_error_mean: None,
        opnorm_unavailable_reason: None,
        final_elbo: None,
        lw_intensity_mean: None,
        wa_best_alpha: None,
        wa_table: None,
        glasso_converged: None,
    };
    let sigmas = match method {
        MethodName::Empirical => train.iter().map(empirical).collect::<Result<Vec<_>>>()?,
        MethodName::Grand => {
            let g = grand_empirical(train)?;
            vec![g; train.len()]
        }
        MethodName::Lw => {
            let mut out = Vec::with_capacity(train.len());
            let mut acc = 0.0;
            for y in train {
                let (s, intensity) = ledoit_wolf(y, cfg.lw_target)?;
                acc += intensity;
                out.push(s);
            }
            report.lw_intensity_mean = Some(Metric(acc / train.len() as f64));
            out
        }
        MethodName::Glasso => {
            let mut out = Vec::with_capacity(train.len());
            let mut all_converged = true;
            for y in train {
                let s = empirical(y)?;
                let fit = graphical_lasso(&s, cfg.glasso_rho)?;
                all_converged &= fit.converged;
                out.push(fit.covariance);
            }
            report.glasso_converged = Some(all_converged);
            out
        }
        MethodName::Wa | MethodName::Wishart => {
            return Err(Error::Internal("not a simple baseline".into()))
        }
    };
    Ok((MethodEstimate { sigmas, means }, report))
}

/// Sum of test log-densities under fixed per-condition moments; a singular
/// estimate scores -inf instead of erroring (that is the honest value of a
/// degenerate density).
pub(crate) fn heldout_under_estimate(
    est: &MethodEstimate,
    test: &[DMatrix<f64>],
) -> Result<f64> {
    let mut total = 0.0;
    for (ci, y) in test.iter().enumerate() {
        if y.nrows() == 0 {
            continue;
        }
        match loglik_normal(y, &est.means[ci], &est.sigmas[ci]) {
            Ok(v) => total += v,
            Err(Error::Singular(_)) => return Ok(f64::NEG_INFINITY),
            Err(e) => return Err(e),
        }
    }
    Ok(total)
}

pub(crate) fn opnorm_vs_truth(
    sigmas: &[DMatrix<f64>],
    truth: &crate::model::MomentField,
) -> Result<f64> {
    let mut acc = 0.0;
    for (ci, s) in sigmas.iter().enumerate() {
        acc += operator_norm_error(s, &truth.covariances[ci])?;
    }
    Ok(acc / sigmas.len() as f64)
}

/// Plug-in covariance field of a fitted posterior at its training grid.
pub(crate) fn wishart_plugin_estimate(post: &Posterior) -> Result<MethodEstimate> {
    let mut sigmas = Vec::with_capacity(post.grid.len());
    let mut means = Vec::with_capacity(post.grid.len());
    for x in post.grid.points() {
        let d = predict_moments_plugin(post, x)?;
        sigmas.push(d.cov);
        means.push(d.mean);
    }
    Ok(MethodEstimate { sigmas, means })
}

fn resolve_model_spec(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<ModelSpec> {
    match (&cfg.model, &cfg.data) {
        (Some(mc), _) => mc.to_spec(dataset.n()),
        // Well-specified default on synthetic data: the generating spec.
        (None, DataConfig::Synthetic(sp)) => {
            let mut spec = sp.model_spec()?;
            spec.n = dataset.n();
            Ok(spec)
        }
        (None, DataConfig::Load { .. }) => Err(Error::Config(
            "a model section is required when loading external data".into(),
        )),
    }
}

fn resolve_fit_config(cfg: &ExperimentConfig, spec: &ModelSpec, seed: u64) -> FitConfig {
    let mut fc = cfg.fit.clone().unwrap_or_else(|| match spec.observation {
        Observation::Normal => FitConfig::normal_defaults(0),
        Observation::Poisson => FitConfig::poisson_defaults(0),
    });
    fc.seed = derive_seed(seed, FIT_SEED_TAG);
    fc
}

/// Execute the full pipeline described by the config and write the report
/// bundle into `out_dir`. Per-stage failures are recorded in the report
/// rather than aborting the run (a failed stage marks its sections
/// incomplete).
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Report> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let seed = cfg.seed;

    // data
    let dataset = match &cfg.data {
        DataConfig::Synthetic(params) => {
            let mut p = params.clone();
            p.seed = seed;
            generate_synthetic(&p)?
        }
        DataConfig::Load { path } => read_dataset(Path::new(path))?,
    };
    dataset.validate()?;
    let synthetic = matches!(cfg.data, DataConfig::Synthetic(_));

    // split
    let split_cfg = cfg.split.clone().unwrap_or_default();
    let plan = split(&dataset, &split_cfg.to_scheme(seed))?;
    let (train, _val, test) = match &plan {
        CvPlan::Trials(_) => plan.partition(&dataset)?,
        CvPlan::Conditions { .. } => {
            return Err(Error::Config(
                "run_experiment expects a trial-level split; use the interpolate command for condition holdouts"
                    .into(),
            ))
        }
    };

    let mut incomplete = Vec::new();
    let mut method_reports = Vec::new();
    let mut decode_models: Vec<(String, ClassModel)> = Vec::new();
    let mut wishart_posterior: Option<Posterior> = None;

    let eval_seed = derive_seed(seed, EVAL_SEED_TAG);
    let heldout_of = |est: &MethodEstimate| heldout_under_estimate(est, &test);

    for method in &cfg.methods {
        let stage = format!("method:{}", method.as_str());
        let outcome: Result<(MethodEstimate, MethodReport)> = (|| match method {
            MethodName::Wishart => {
                let spec = resolve_model_spec(cfg, &dataset)?;
                let fit_cfg = resolve_fit_config(cfg, &spec, seed);
                let post = fit(&spec, &dataset.grid, &train, &fit_cfg)?;
                let heldout = match spec.observation {
                    Observation::Normal => {
                        let mode = match cfg.evaluate.heldout {
                            HeldoutModeName::SingleSample => {
                                HeldoutMode::SingleSample { seed: eval_seed }
                            }
                            HeldoutModeName::Mc => HeldoutMode::MonteCarlo {
                                samples: cfg.evaluate.mc_samples,
                                seed: eval_seed,
                            },
                        };
                        heldout_loglik(&post, &dataset.grid, &test, mode)?
                    }
                    Observation::Poisson => marginal_loglik_poisson(
                        &post,
                        &dataset.grid,
                        &test,
                        cfg.evaluate.mc_samples,
                        eval_seed,
                    )?,
                };
                let est = wishart_plugin_estimate(&post)?;
                let mut rep = MethodReport {
                    method: "wishart".into(),
                    heldout_loglik: Metric(heldout),
                    opnorm_error_mean: None,
                    opnorm_unavailable_reason: None,
                    final_elbo: post.final_elbo().map(Metric),
                    lw_intensity_mean: None,
                    wa_best_alpha: None,
                    wa_table: None,
                    glasso_converged: None,
                };
                write_posterior_bundle(&post, &out_dir.join("posterior.json"))?;
                write_elbo_trace(&post.elbo_trace, &out_dir.join("elbo_trace.csv"))?;
                rep.final_elbo = post.final_elbo().map(Metric);
                wishart_posterior = Some(post);
                Ok((est, rep))
            }
            MethodName::Wa => {
                let means: Vec<DVector<f64>> = train.iter().map(trial_mean).collect();
                let mut table = Vec::new();
                let mut best: Option<(f64, usize, Vec<DMatrix<f64>>)> = None;
                for &alpha in &cfg.wa_alphas {
                    let sigmas = weighted_average(&train, alpha)?;
                    let est = MethodEstimate {
                        sigmas: sigmas.clone(),
                        means: means.clone(),
                    };
                    let h = heldout_of(&est)?;
                    let opn = match (&dataset.truth, cfg.evaluate.opnorm_vs_truth) {
                        (Some(t), true) => Some(Metric(opnorm_vs_truth(&sigmas, t)?)),
                        _ => None,
                    };
                    table.push(WaAlphaEntry {
                        alpha,
                        heldout_loglik: Metric(h),
                        opnorm_error_mean: opn,
                    });
                    let better = match &best {
                        None => true,
                        Some((bh, _, _)) => h > *bh,
                    };
                    if better {
                        best = Some((h, table.len() - 1, sigmas));
                    }
                }
                let (best_h, best_idx, best_sigmas) =
                    best.ok_or_else(|| Error::Config("wa_alphas is empty".into()))?;
                let rep = MethodReport {
                    method: "wa".into(),
                    heldout_loglik: Metric(best_h),
                    opnorm_error_mean: None,
                    opnorm_unavailable_reason: None,
                    final_elbo: None,
                    lw_intensity_mean: None,
                    wa_best_alpha: Some(cfg.wa_alphas[best_idx]),
                    wa_table: Some(table),
                    glasso_converged: None,
                };
                Ok((
                    MethodEstimate {
                        sigmas: best_sigmas,
                        means,
                    },
                    rep,
                ))
            }
            simple => baseline_estimate(*simple, cfg, &train).and_then(|(est, mut rep)| {
                rep.heldout_loglik = Metric(heldout_of(&est)?);
                Ok((est, rep))
            }),
        })();

        match outcome {
            Ok((est, mut rep)) => {
                if rep.heldout_loglik.0.is_nan() {
                    rep.heldout_loglik = Metric(heldout_of(&est)?);
                }
                match (&dataset.truth, cfg.evaluate.opnorm_vs_truth) {
                    (Some(t), true) => {
                        rep.opnorm_error_mean = Some(Metric(opnorm_vs_truth(&est.sigmas, t)?));
                    }
                    (None, true) => {
                        rep.opnorm_unavailable_reason =
                            Some("no ground truth available".into());
                    }
                    _ => {}
                }
                if cfg
                    .decode
                    .as_ref()
                    .map(|d| d.methods.contains(method))
                    .unwrap_or(false)
                {
                    let model = if *method == MethodName::Grand {
                        ClassModel::lda(est.means.clone(), est.sigmas[0].clone())
                    } else {
                        ClassModel::qda(est.means.clone(), est.sigmas.clone())
                    };
                    match model {
                        Ok(m) => decode_models.push((method.as_str().to_string(), m)),
                        Err(e) => incomplete.push(StageFailure {
                            stage: format!("decode-model:{}", method.as_str()),
                            error: e.to_string(),
                        }),
                    }
                }
                method_reports.push(rep);
            }
            Err(e) => incomplete.push(StageFailure {
                stage,
                error: e.to_string(),
            }),
        }
    }

    // decode stage
    let decode = if cfg.decode.is_some() && !decode_models.is_empty() {
        let mut labeled = Vec::new();
        for (ci, y) in test.iter().enumerate() {
            for ki in 0..y.nrows() {
                labeled.push((y.row(ki).transpose(), ci));
            }
        }
        let mut out = Vec::new();
        for (name, model) in &decode_models {
            match (model.decode_accuracy(&labeled), model.confusion(&labeled)) {
                (Ok(acc), Ok(conf)) => out.push(DecodeReport {
                    method: name.clone(),
                    accuracy: acc,
                    test_trials: labeled.len(),
                    confusion: conf.iter().cloned().collect(),
                }),
                (Err(e), _) | (_, Err(e)) => incomplete.push(StageFailure {
                    stage: format!("decode:{name}"),
                    error: e.to_string(),
                }),
            }
        }
        Some(out)
    } else {
        None
    };

    // fisher stage
    let fisher = match (&cfg.fisher, &wishart_posterior) {
        (Some(fc), Some(post)) => {
            let points: Vec<Vec<f64>> = match &fc.points {
                Some(p) => p.clone(),
                None => default_fisher_grid(&dataset, fc.n_points),
            };
            match crate::analysis::fisher_curve(
                post,
                &points,
                fc.axis,
                fc.samples,
                derive_seed(seed, FISHER_SEED_TAG),
            ) {
                Ok(curve) => {
                    let rows: Vec<FisherPoint> = curve
                        .iter()
                        .map(|e| FisherPoint {
                            x: e.x.clone(),
                            mean: Metric(e.mean),
                            lo90: Metric(e.interval.0),
                            hi90: Metric(e.interval.1),
                        })
                        .collect();
                    write_fisher_csv(&rows, &out_dir.join("fisher.csv"))?;
                    Some(rows)
                }
                Err(e) => {
                    incomplete.push(StageFailure {
                        stage: "fisher".into(),
                        error: e.to_string(),
                    });
                    None
                }
            }
        }
        (Some(_), None) => {
            incomplete.push(StageFailure {
                stage: "fisher".into(),
                error: "fisher requires the wishart method".into(),
            });
            None
        }
        _ => None,
    };

    // predict stage
    if let (Some(pc), Some(post)) = (&cfg.predict, &wishart_posterior) {
        let dir = out_dir.join("predict");
        if let Err(e) = export_predictions(post, pc, derive_seed(seed, PREDICT_SEED_TAG), &dir) {
            incomplete.push(StageFailure {
                stage: "predict".into(),
                error: e.to_string(),
            });
        }
    }

    let report = Report {
        schema_version: SCHEMA_VERSION,
        seed,
        dataset: DatasetSummary {
            n: dataset.n(),
            c: dataset.c(),
            k_per_condition: dataset.k_per_condition(),
            synthetic,
            has_ground_truth: dataset.truth.is_some(),
        },
        methods: method_reports,
        decode,
        fisher,
        incomplete,
    };

    std::fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    write_metrics_csv(&report, &out_dir.join("metrics.csv"))?;
    Ok(report)
}

fn default_fisher_grid(dataset: &Dataset, n_points: usize) -> Vec<Vec<f64>> {
    // Equispaced along the first axis, other coordinates at the first grid
    // point's values.
    let base = dataset.grid.points()[0].clone();
    let span = match dataset.grid.axes()[0].topology {
        crate::grid::AxisTopology::Periodic { period } => period,
        crate::grid::AxisTopology::Linear => {
            let lo = dataset
                .grid
                .points()
                .iter()
                .map(|p| p[0])
                .fold(f64::INFINITY, f64::min);
            let hi = dataset
                .grid
                .points()
                .iter()
                .map(|p| p[0])
                .fold(f64::NEG_INFINITY, f64::max);
            return (0..n_points)
                .map(|i| {
                    let mut x = base.clone();
                    x[0] = lo + (hi - lo) * i as f64 / (n_points.max(2) - 1) as f64;
                    x
                })
                .collect();
        }
    };
    (0..n_points)
        .map(|i| {
            let mut x = base.clone();
            x[0] = span * i as f64 / n_points as f64;
            x
        })
        .collect()
}

fn write_fisher_csv(rows: &[FisherPoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let dim = rows.first().map(|r| r.x.len()).unwrap_or(1);
    let mut header: Vec<String> = (0..dim).map(|i| format!("x{i}")).collect();
    header.extend(["fi_mean".into(), "fi_lo90".into(), "fi_hi90".into()]);
    w.write_record(&header)?;
    for r in rows {
        let mut rec: Vec<String> = r.x.iter().map(|v| format!("{v}")).collect();
        rec.push(format!("{}", r.mean.0));
        rec.push(format!("{}", r.lo90.0));
        rec.push(format!("{}", r.hi90.0));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn write_metrics_csv(report: &Report, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["method", "heldout_loglik", "opnorm_error_mean"])?;
    for m in &report.methods {
        w.write_record([
            m.method.clone(),
            format!("{}", m.heldout_loglik.0),
            m.opnorm_error_mean
                .map(|v| format!("{}", v.0))
                .unwrap_or_else(|| "unavailable".into()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn export_predictions(
    post: &Posterior,
    pc: &super::config::PredictConfig,
    seed: u64,
    dir: &Path,
) -> Result<()> {
    use crate::model::MomentField;
    let mut means = Vec::new();
    let mut covs = Vec::new();
    let mut coords = Vec::new();
    let mut lift_total = 0usize;
    for (ti, target) in pc.targets.iter().enumerate() {
        let (mean, cov) = if pc.plugin {
            let d = predict_moments_plugin(post, target)?;
            (d.mean, d.cov)
        } else {
            let samples = predict_moments(post, target, pc.samples, derive_seed(seed, ti as u64))?;
            lift_total += samples.lift_count;
            let s = samples.draws.len() as f64;
            let mut mean = DVector::zeros(post.spec.n);
            let mut cov = DMatrix::zeros(post.spec.n, post.spec.n);
            for d in &samples.draws {
                mean += &d.mean;
                cov += &d.cov;
            }
            (mean / s, cov / s)
        };
        means.push(mean);
        covs.push(cov);
        coords.push(target.clone());
    }
    let field = MomentField {
        means,
        covariances: covs,
        precisions: None,
    };
    let grid = crate::grid::ConditionGrid::new(post.grid.axes().to_vec(), coords)?;
    super::formats::export_moment_field(&field, &grid, dir)?;
    let meta = serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "samples": if pc.plugin { 0 } else { pc.samples },
        "plugin": pc.plugin,
        "seed": seed,
        "lift_count": lift_total,
    });
    std::fs::write(dir.join("predict_meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

/// Interpolation experiment: predict moments at entirely held-out conditions
/// and compare against ground truth (when present) and the held-out trials'
/// own empirical moments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InterpolationRow {
    pub condition: usize,
    pub coordinates: Vec<f64>,
    pub nearest_trained: usize,
    pub nearest_distance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub opnorm_vs_truth: Option<Metric>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub opnorm_vs_truth_at_nearest: Option<Metric>,
    pub heldout_loglik: Metric,
}

pub fn interpolate_heldout_conditions(
    post: &Posterior,
    dataset: &Dataset,
    held_out: &[usize],
    eval_seed: u64,
) -> Result<Vec<InterpolationRow>> {
    let mut rows = Vec::with_capacity(held_out.len());
    for &ci in held_out {
        let coords = dataset
            .grid
            .points()
            .get(ci)
            .ok_or_else(|| Error::invalid_input(format!("condition {ci} out of range")))?
            .clone();
        let plug = predict_moments_plugin(post, &coords)?;
        let nearest = post.grid.nearest(&coords)?;
        let nearest_distance = post
            .grid
            .distance(&post.grid.points()[nearest], &coords)?;
        let (opn, opn_near) = match &dataset.truth {
            Some(t) => {
                let at_holdout = operator_norm_error(&plug.cov, &t.covariances[ci])?;
                // error of the fitted model at its nearest trained condition
                let near_plug = predict_moments_plugin(post, &post.grid.points()[nearest].clone())?;
                let truth_near_idx = dataset.grid.exact_match(&post.grid.points()[nearest]);
                let at_near = truth_near_idx
                    .map(|idx| operator_norm_error(&near_plug.cov, &t.covariances[idx]))
                    .transpose()?;
                (Some(Metric(at_holdout)), at_near.map(Metric))
            }
            None => (None, None),
        };
        let sub_grid = dataset.grid.subset(&[ci])?;
        let heldout = heldout_loglik(
            post,
            &sub_grid,
            &[dataset.trials[ci].clone()],
            HeldoutMode::SingleSample { seed: eval_seed },
        )?;
        rows.push(InterpolationRow {
            condition: ci,
            coordinates: coords,
            nearest_trained: nearest,
            nearest_distance,
            opnorm_vs_truth: opn,
            opnorm_vs_truth_at_nearest: opn_near,
            heldout_loglik: Metric(heldout),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::SyntheticParams;

    fn tiny_config(methods: Vec<MethodName>) -> ExperimentConfig {
        serde_json::from_value(serde_json::json!({
            "schema_version": 1,
            "seed": 5,
            "data": { "synthetic": { "n": 6, "c": 8, "k": 6, "seed": 5 } },
            "fit": { "family": "gaussian", "step": 0.01, "iterations": 120, "elbo_samples": 1 },
            "methods": methods.iter().map(|m| m.as_str()).collect::<Vec<_>>(),
        }))
        .unwrap()
    }

    #[test]
    fn pipeline_contract_two_methods() {
        let cfg = tiny_config(vec![MethodName::Grand, MethodName::Lw]);
        let dir = tempfile::tempdir().unwrap();
        let report = run_experiment(&cfg, dir.path()).unwrap();
        assert_eq!(report.methods.len(), 2);
        for m in &report.methods {
            assert!(m.heldout_loglik.0.is_finite(), "{}: {}", m.method, m.heldout_loglik.0);
            assert!(m.opnorm_error_mean.is_some());
        }
        assert!(report.incomplete.is_empty());
        assert!(dir.path().join("report.json").exists());
        assert!(dir.path().join("metrics.csv").exists());
    }

    #[test]
    fn reruns_are_byte_identical() {
        let cfg = tiny_config(vec![MethodName::Wishart, MethodName::Grand, MethodName::Wa]);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        run_experiment(&cfg, d1.path()).unwrap();
        run_experiment(&cfg, d2.path()).unwrap();
        for name in ["report.json", "metrics.csv", "posterior.json", "elbo_trace.csv"] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between reruns");
        }
    }

    #[test]
    fn missing_ground_truth_marks_metric_unavailable() {
        // Round-trip the synthetic data through disk, stripping the truth.
        let ds = crate::harness::generate_synthetic(&SyntheticParams {
            n: 4,
            c: 6,
            k: 5,
            seed: 8,
            ..Default::default()
        })
        .unwrap();
        let stripped = Dataset {
            truth: None,
            ..ds
        };
        let data_dir = tempfile::tempdir().unwrap();
        crate::harness::write_dataset(&stripped, data_dir.path()).unwrap();
        let cfg: ExperimentConfig = serde_json::from_value(serde_json::json!({
            "schema_version": 1,
            "seed": 3,
            "data": { "load": { "path": data_dir.path().to_str().unwrap() } },
            "model": {
                "p": 2,
                "variant": "scaled-lrd",
                "kernel_mu": [{"kind": "periodic", "gamma": 0.001, "beta": 1.0, "lambda": 1.0, "period": 6.283185307179586}],
                "kernel_sigma": [{"kind": "periodic", "gamma": 0.001, "beta": 1.0, "lambda": 1.0, "period": 6.283185307179586}]
            },
            "methods": ["grand"],
        }))
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let report = run_experiment(&cfg, dir.path()).unwrap();
        let grand = &report.methods[0];
        assert!(grand.opnorm_error_mean.is_none());
        assert_eq!(
            grand.opnorm_unavailable_reason.as_deref(),
            Some("no ground truth available")
        );
    }

    #[test]
    fn metric_serialization_round_trips_non_finite() {
        let vals = [1.5, f64::NEG_INFINITY, f64::INFINITY];
        for v in vals {
            let s = serde_json::to_string(&Metric(v)).unwrap();
            let back: Metric = serde_json::from_str(&s).unwrap();
            assert_eq!(back.0, v);
        }
        let s = serde_json::to_string(&Metric(f64::NAN)).unwrap();
        let back: Metric = serde_json::from_str(&s).unwrap();
        assert!(back.0.is_nan());
    }
}
