//! Command-line interface over the covfield library.
//!
//! Every subcommand reads the JSON config (`--config`), honors the global
//! `--seed` / `--out` / `--threads` flags, exits 0 on success and nonzero
//! with a machine-readable JSON error on stderr otherwise.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use covfield::error::{Error, Result};
use covfield::harness::{
    self, cv_select, generate_synthetic, interpolate_heldout_conditions, read_dataset,
    read_posterior_bundle, run_experiment, write_dataset, write_elbo_trace,
    write_posterior_bundle, DataConfig, Dataset, ExperimentConfig, MethodName, SplitConfig,
};
use covfield::inference::{fit, FitConfig};
use covfield::model::Observation;

#[derive(Parser)]
#[command(
    name = "covfield",
    about = "Condition-dependent noise covariance fields: Gaussian/Wishart process estimation, classical baselines, decoding and Fisher information",
    version
)]
struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (default "out").
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArg {
    /// Dataset directory; overrides the config's data section.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct PosteriorArg {
    /// Fitted posterior bundle (posterior.json).
    #[arg(long)]
    posterior: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and write it as a dataset directory.
    Simulate,
    /// Fit the Wishart-process model and write the posterior bundle.
    Fit(DataArg),
    /// Classical covariance estimates over the full dataset.
    Estimate {
        #[command(flatten)]
        data: DataArg,
        /// empirical | grand | wa | lw | glasso
        #[arg(long)]
        method: String,
        /// Weighted-average mixing weight (method wa).
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
    },
    /// Posterior moments at the config's predict targets.
    Predict(PosteriorArg),
    /// Interpolate moments at entirely held-out conditions.
    Interpolate {
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        posterior: PosteriorArg,
        /// Held-out condition indices (comma separated); defaults to the
        /// config's holdout_conditions split.
        #[arg(long, value_delimiter = ',')]
        holdout: Option<Vec<usize>>,
    },
    /// Decoding accuracy of the configured methods (QDA / LDA).
    Decode(DataArg),
    /// Fisher information curve from a fitted posterior.
    Fisher(PosteriorArg),
    /// Full comparison pipeline: split, fit, evaluate, report.
    Evaluate(DataArg),
    /// Cross-validated hyperparameter selection.
    Cv(DataArg),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        // Ignore the error if a pool already exists (tests, repeated init).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = match &e {
                Error::DimensionMismatch(_) => "dimension_mismatch",
                Error::InvalidParameter(_) => "invalid_parameter",
                Error::InvalidInput(_) => "invalid_input",
                Error::Singular(_) => "singular",
                Error::NonFiniteElbo { .. } => "non_finite_elbo",
                Error::Config(_) => "config",
                Error::Io(_) => "io",
                Error::Json(_) => "json",
                Error::Csv(_) => "csv",
                Error::Internal(_) => "internal",
            };
            eprintln!(
                "{}",
                serde_json::json!({ "error": e.to_string(), "kind": kind })
            );
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config <json> is required".into()))?;
    let mut cfg = ExperimentConfig::from_path(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn load_data(cfg: &ExperimentConfig, arg: &Option<PathBuf>) -> Result<Dataset> {
    match arg {
        Some(dir) => read_dataset(dir),
        None => match &cfg.data {
            DataConfig::Synthetic(params) => {
                let mut p = params.clone();
                p.seed = cfg.seed;
                generate_synthetic(&p)
            }
            DataConfig::Load { path } => read_dataset(Path::new(path)),
        },
    }
}

fn model_spec_for(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<covfield::model::ModelSpec> {
    match (&cfg.model, &cfg.data) {
        (Some(mc), _) => mc.to_spec(dataset.n()),
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

fn fit_config_for(cfg: &ExperimentConfig, spec: &covfield::model::ModelSpec) -> FitConfig {
    let mut fc = cfg.fit.clone().unwrap_or_else(|| match spec.observation {
        Observation::Normal => FitConfig::normal_defaults(0),
        Observation::Poisson => FitConfig::poisson_defaults(0),
    });
    fc.seed = cfg.seed;
    fc
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    std::fs::create_dir_all(&cli.out)?;
    match &cli.command {
        Command::Simulate => {
            let params = match &cfg.data {
                DataConfig::Synthetic(p) => {
                    let mut p = p.clone();
                    p.seed = cfg.seed;
                    p
                }
                DataConfig::Load { .. } => {
                    return Err(Error::Config(
                        "simulate needs a synthetic data section".into(),
                    ))
                }
            };
            let ds = generate_synthetic(&params)?;
            write_dataset(&ds, &cli.out)?;
            println!(
                "wrote synthetic dataset: N={} C={} K={:?} -> {}",
                ds.n(),
                ds.c(),
                ds.trials[0].nrows(),
                cli.out.display()
            );
            Ok(())
        }
        Command::Fit(data) => {
            let ds = load_data(&cfg, &data.data)?;
            let spec = model_spec_for(&cfg, &ds)?;
            let fc = fit_config_for(&cfg, &spec);
            // A holdout_conditions split restricts the fit to the retained
            // conditions (the interpolation workflow); trial-level splits
            // belong to the evaluate pipeline, so the full data is used here.
            let (grid, trials) = match &cfg.split {
                Some(SplitConfig::HoldoutConditions { indices }) => {
                    let keep: Vec<usize> = (0..ds.c()).filter(|i| !indices.contains(i)).collect();
                    let grid = ds.grid.subset(&keep)?;
                    let trials: Vec<nalgebra::DMatrix<f64>> =
                        keep.iter().map(|&i| ds.trials[i].clone()).collect();
                    (grid, trials)
                }
                _ => (ds.grid.clone(), ds.trials.clone()),
            };
            let post = fit(&spec, &grid, &trials, &fc)?;
            write_posterior_bundle(&post, &cli.out.join("posterior.json"))?;
            write_elbo_trace(&post.elbo_trace, &cli.out.join("elbo_trace.csv"))?;
            println!(
                "fit complete: {} iterations, final elbo {:.6}",
                post.elbo_trace.len(),
                post.final_elbo().unwrap_or(f64::NAN)
            );
            Ok(())
        }
        Command::Estimate {
            data,
            method,
            alpha,
        } => {
            let ds = load_data(&cfg, &data.data)?;
            let method = parse_method(method)?;
            let field = estimate_field(&cfg, &ds, method, *alpha)?;
            let dir = cli.out.join(method_dir(method));
            harness::export_moment_field(&field, &ds.grid, &dir)?;
            println!("wrote {} estimates -> {}", method_dir(method), dir.display());
            Ok(())
        }
        Command::Predict(parg) => {
            let post = read_posterior_bundle(&parg.posterior)?;
            let pc = cfg
                .predict
                .clone()
                .ok_or_else(|| Error::Config("config has no predict section".into()))?;
            let mut means = Vec::new();
            let mut covs = Vec::new();
            for (ti, target) in pc.targets.iter().enumerate() {
                let (mean, cov) = if pc.plugin {
                    let d = covfield::posterior::predict_moments_plugin(&post, target)?;
                    (d.mean, d.cov)
                } else {
                    let samples = covfield::posterior::predict_moments(
                        &post,
                        target,
                        pc.samples,
                        covfield::util::derive_seed(cfg.seed, ti as u64),
                    )?;
                    let s = samples.draws.len() as f64;
                    let mut mean = nalgebra::DVector::zeros(post.spec.n);
                    let mut cov = nalgebra::DMatrix::zeros(post.spec.n, post.spec.n);
                    for d in &samples.draws {
                        mean += &d.mean;
                        cov += &d.cov;
                    }
                    (mean / s, cov / s)
                };
                means.push(mean);
                covs.push(cov);
            }
            let field = covfield::model::MomentField {
                means,
                covariances: covs,
                precisions: None,
            };
            let grid =
                covfield::grid::ConditionGrid::new(post.grid.axes().to_vec(), pc.targets.clone())?;
            let dir = cli.out.join("predict");
            harness::export_moment_field(&field, &grid, &dir)?;
            println!("wrote {} predicted moments -> {}", pc.targets.len(), dir.display());
            Ok(())
        }
        Command::Interpolate {
            data,
            posterior,
            holdout,
        } => {
            let ds = load_data(&cfg, &data.data)?;
            let post = read_posterior_bundle(&posterior.posterior)?;
            let held: Vec<usize> = match holdout {
                Some(h) => h.clone(),
                None => match &cfg.split {
                    Some(SplitConfig::HoldoutConditions { indices }) => indices.clone(),
                    _ => {
                        return Err(Error::Config(
                            "interpolate needs --holdout or a holdout_conditions split".into(),
                        ))
                    }
                },
            };
            let rows = interpolate_heldout_conditions(&post, &ds, &held, cfg.seed)?;
            std::fs::write(
                cli.out.join("interpolation.json"),
                serde_json::to_string_pretty(&rows)?,
            )?;
            let field = covfield::model::MomentField {
                means: held
                    .iter()
                    .map(|&ci| {
                        covfield::posterior::predict_moments_plugin(&post, &ds.grid.points()[ci])
                            .map(|d| d.mean)
                    })
                    .collect::<Result<_>>()?,
                covariances: held
                    .iter()
                    .map(|&ci| {
                        covfield::posterior::predict_moments_plugin(&post, &ds.grid.points()[ci])
                            .map(|d| d.cov)
                    })
                    .collect::<Result<_>>()?,
                precisions: None,
            };
            let coords: Vec<Vec<f64>> = held.iter().map(|&ci| ds.grid.points()[ci].clone()).collect();
            let grid = covfield::grid::ConditionGrid::new(ds.grid.axes().to_vec(), coords)?;
            harness::export_moment_field(&field, &grid, &cli.out.join("interpolated"))?;
            println!(
                "interpolated {} held-out conditions -> {}",
                held.len(),
                cli.out.display()
            );
            Ok(())
        }
        Command::Decode(data) => {
            let mut cfg = cfg.clone();
            if cfg.decode.is_none() {
                return Err(Error::Config("config has no decode section".into()));
            }
            if let Some(dir) = &data.data {
                cfg.data = DataConfig::Load {
                    path: dir.display().to_string(),
                };
            }
            // decoding is scored inside the standard pipeline
            let report = run_experiment(&cfg, &cli.out)?;
            if let Some(dec) = &report.decode {
                for d in dec {
                    println!(
                        "decode {}: accuracy {:.4} over {} trials",
                        d.method, d.accuracy, d.test_trials
                    );
                }
            }
            Ok(())
        }
        Command::Fisher(parg) => {
            let post = read_posterior_bundle(&parg.posterior)?;
            let fc = cfg
                .fisher
                .clone()
                .ok_or_else(|| Error::Config("config has no fisher section".into()))?;
            let points: Vec<Vec<f64>> = match &fc.points {
                Some(p) => p.clone(),
                None => {
                    let period = match post.grid.axes()[0].topology {
                        covfield::grid::AxisTopology::Periodic { period } => period,
                        covfield::grid::AxisTopology::Linear => {
                            return Err(Error::Config(
                                "fisher over a linear axis needs explicit points".into(),
                            ))
                        }
                    };
                    let base = post.grid.points()[0].clone();
                    (0..fc.n_points)
                        .map(|i| {
                            let mut x = base.clone();
                            x[0] = period * i as f64 / fc.n_points as f64;
                            x
                        })
                        .collect()
                }
            };
            let curve =
                covfield::analysis::fisher_curve(&post, &points, fc.axis, fc.samples, cfg.seed)?;
            let mut w = csv::Writer::from_path(cli.out.join("fisher.csv"))?;
            let dim = points[0].len();
            let mut header: Vec<String> = (0..dim).map(|i| format!("x{i}")).collect();
            header.extend(["fi_mean".into(), "fi_lo90".into(), "fi_hi90".into()]);
            w.write_record(&header)?;
            for e in &curve {
                let mut rec: Vec<String> = e.x.iter().map(|v| format!("{v}")).collect();
                rec.push(format!("{}", e.mean));
                rec.push(format!("{}", e.interval.0));
                rec.push(format!("{}", e.interval.1));
                w.write_record(&rec)?;
            }
            w.flush()?;
            println!("wrote fisher curve over {} points -> {}", curve.len(), cli.out.display());
            Ok(())
        }
        Command::Evaluate(data) => {
            let mut cfg = cfg.clone();
            if let Some(dir) = &data.data {
                cfg.data = DataConfig::Load {
                    path: dir.display().to_string(),
                };
            }
            let report = run_experiment(&cfg, &cli.out)?;
            for m in &report.methods {
                println!(
                    "{:<10} heldout {:>14.4}  opnorm {}",
                    m.method,
                    m.heldout_loglik.0,
                    m.opnorm_error_mean
                        .map(|v| format!("{:.6}", v.0))
                        .unwrap_or_else(|| "unavailable".into())
                );
            }
            if !report.incomplete.is_empty() {
                for f in &report.incomplete {
                    eprintln!("incomplete stage {}: {}", f.stage, f.error);
                }
            }
            Ok(())
        }
        Command::Cv(data) => {
            let ds = load_data(&cfg, &data.data)?;
            let spec = model_spec_for(&cfg, &ds)?;
            let cv_cfg = cfg
                .cv
                .clone()
                .ok_or_else(|| Error::Config("config has no cv section".into()))?;
            let fc = fit_config_for(&cfg, &spec);
            let outcome = cv_select(&ds, &spec, &cv_cfg, &fc, cfg.seed)?;
            std::fs::write(
                cli.out.join("cv.json"),
                serde_json::to_string_pretty(&outcome)?,
            )?;
            let mut w = csv::Writer::from_path(cli.out.join("cv_table.csv"))?;
            w.write_record([
                "lambda_mu",
                "lambda_sigma",
                "p",
                "variant",
                "fold",
                "score",
            ])?;
            for row in &outcome.table {
                w.write_record([
                    format!("{}", row.cell.lambda_mu),
                    format!("{}", row.cell.lambda_sigma),
                    format!("{}", row.cell.p),
                    format!("{:?}", row.cell.variant),
                    format!("{}", row.fold),
                    format!("{}", row.score),
                ])?;
            }
            w.flush()?;
            println!(
                "cv best: lambda_mu={} lambda_sigma={} p={} variant={:?} (pooled score {:.4})",
                outcome.best.lambda_mu,
                outcome.best.lambda_sigma,
                outcome.best.p,
                outcome.best.variant,
                outcome.best_pooled_score
            );
            Ok(())
        }
    }
}

fn parse_method(name: &str) -> Result<MethodName> {
    match name {
        "empirical" => Ok(MethodName::Empirical),
        "grand" => Ok(MethodName::Grand),
        "wa" => Ok(MethodName::Wa),
        "lw" => Ok(MethodName::Lw),
        "glasso" => Ok(MethodName::Glasso),
        other => Err(Error::Config(format!(
            "unknown estimate method {other:?} (expected empirical|grand|wa|lw|glasso)"
        ))),
    }
}

fn method_dir(m: MethodName) -> &'static str {
    m.as_str()
}

fn estimate_field(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    method: MethodName,
    alpha: f64,
) -> Result<covfield::model::MomentField> {
    use covfield::baselines::*;
    let means: Vec<nalgebra::DVector<f64>> = ds.trials.iter().map(trial_mean).collect();
    let sigmas = match method {
        MethodName::Empirical => ds
            .trials
            .iter()
            .map(empirical)
            .collect::<Result<Vec<_>>>()?,
        MethodName::Grand => {
            let g = grand_empirical(&ds.trials)?;
            vec![g; ds.trials.len()]
        }
        MethodName::Wa => weighted_average(&ds.trials, alpha)?,
        MethodName::Lw => ds
            .trials
            .iter()
            .map(|y| ledoit_wolf(y, cfg.lw_target).map(|(s, _)| s))
            .collect::<Result<Vec<_>>>()?,
        MethodName::Glasso => ds
            .trials
            .iter()
            .map(|y| {
                let s = empirical(y)?;
                graphical_lasso(&s, cfg.glasso_rho).map(|f| f.covariance)
            })
            .collect::<Result<Vec<_>>>()?,
        MethodName::Wishart => {
            return Err(Error::Config(
                "use the fit/evaluate commands for the wishart model".into(),
            ))
        }
    };
    Ok(covfield::model::MomentField {
        means,
        covariances: sigmas,
        precisions: None,
    })
}
