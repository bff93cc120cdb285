//! Command-line front end: simulate datasets, fit models with any
//! algorithm variant, run the quadrature EM reference, evaluate estimates,
//! drive full simulation studies, and run the built-in property suites.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use proxlvm::em::{em_fit_ifa, gh_grid};
use proxlvm::error::Error;
use proxlvm::io::{self, ParamFile};
use proxlvm::metrics;
use proxlvm::models::Penalty;
use proxlvm::optim::OptimizerConfig;
use proxlvm::study::{
    fit_ifa, fit_rlca, run_study, simulate_replication, study_truth, StudyConfig, StudyTruth,
    Variant,
};

#[derive(Parser)]
#[command(
    name = "proxlvm",
    about = "Stochastic proximal estimation of latent variable models",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one study replication's dataset, design matrix, and truth.
    Simulate(SimulateArgs),
    /// Fit a model to a dataset with a chosen algorithm variant.
    Fit(FitArgs),
    /// Fit the quadrature EM reference estimator (factor models, K <= 3).
    Em(EmArgs),
    /// Evaluate an estimate against a reference parameter file.
    Eval(EvalArgs),
    /// Run a full simulation study from a JSON config.
    Study(StudyArgs),
    /// Run the built-in property suites.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Study config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (data.csv, qmatrix.csv, truth.json).
    #[arg(long)]
    out: PathBuf,
    /// Replication index to generate.
    #[arg(long, default_value_t = 0)]
    replication: usize,
    /// Master seed; overrides the config's master_seed field.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct FitArgs {
    /// Response CSV (0/1, no header).
    #[arg(long)]
    data: PathBuf,
    /// Design matrix CSV (J rows, K columns of 0/1).
    #[arg(long)]
    qmatrix: PathBuf,
    /// Model family.
    #[arg(long, value_parser = ["ifa", "rlca"])]
    model: String,
    /// Algorithm variant: USP | USP-PPG | USP-RM1 | USP-RM2 | StEM.
    #[arg(long, default_value = "USP")]
    variant: String,
    /// RNG seed (required: runs are reproducible by construction).
    #[arg(long)]
    seed: u64,
    /// Output directory (fit.json, fit_meta.json, optional trace.csv).
    #[arg(long)]
    out: PathBuf,
    /// Treat the factor model as exploratory: ignore the mask zeros and
    /// estimate a dense loading matrix under an L1 penalty.
    #[arg(long, default_value_t = false)]
    exploratory: bool,
    /// L1 penalty weight on the loadings (summed objective scale).
    #[arg(long)]
    penalty_lambda: Option<f64>,
    /// Starting parameter JSON; defaults to a neutral start.
    #[arg(long)]
    start: Option<PathBuf>,
    /// Write a per-iteration trace.csv.
    #[arg(long, default_value_t = false)]
    trace: bool,
    #[command(flatten)]
    optimizer: OptimizerFlags,
}

#[derive(Args)]
struct OptimizerFlags {
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    c1: Option<f64>,
    #[arg(long)]
    c2: Option<f64>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    stop_tol: Option<f64>,
    #[arg(long)]
    stop_window: Option<usize>,
    /// Run exactly --iters iterations, ignoring the stopping rule.
    #[arg(long, default_value_t = false)]
    fixed_iters: bool,
}

impl OptimizerFlags {
    fn apply(&self, cfg: &mut OptimizerConfig) {
        if let Some(v) = self.mu {
            cfg.mu = v;
        }
        if let Some(v) = self.epsilon {
            cfg.epsilon = v;
        }
        if let Some(v) = self.c1 {
            cfg.c1 = v;
        }
        if let Some(v) = self.c2 {
            cfg.c2 = v;
        }
        if let Some(v) = self.burn_in {
            cfg.burn_in = v;
        }
        if let Some(v) = self.iters {
            cfg.max_iters = v;
        }
        if let Some(v) = self.stop_tol {
            cfg.stop_tol = v;
        }
        if let Some(v) = self.stop_window {
            cfg.stop_window = v;
        }
        if self.fixed_iters {
            cfg.adaptive_stop = false;
        }
    }
}

#[derive(Args)]
struct EmArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    qmatrix: PathBuf,
    /// Quadrature points per dimension.
    #[arg(long, default_value_t = 31)]
    points: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
}

#[derive(Args)]
struct EvalArgs {
    /// Estimate parameter JSON.
    #[arg(long)]
    est: PathBuf,
    /// Reference parameter JSON.
    #[arg(long = "ref", value_name = "REF")]
    reference: PathBuf,
    /// Metric name, or "all" for every metric the model pair supports:
    /// mse_d | mse_loadings | mse_sigma12 | mse_loadings_permuted |
    /// theta_mse | nu_mse.
    #[arg(long, default_value = "all")]
    metric: String,
}

#[derive(Args)]
struct StudyArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's out_dir field.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides the config's master_seed field.
    #[arg(long)]
    seed: Option<u64>,
    /// Replication count; overrides the config.
    #[arg(long)]
    replications: Option<usize>,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 20260811)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Em(args) => cmd_em(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Study(args) => cmd_study(args),
        Command::Selftest(args) => {
            return if proxlvm::selftest::run_all(args.seed) {
                ExitCode::SUCCESS
            } else {
                eprintln!("selftest: at least one property suite failed");
                ExitCode::from(3)
            }
        }
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn load_study_config(path: &PathBuf, seed: Option<u64>) -> Result<StudyConfig, Error> {
    let mut config: StudyConfig = io::read_json(path)?;
    if let Some(s) = seed {
        config.master_seed = s;
    }
    Ok(config)
}

fn cmd_simulate(args: SimulateArgs) -> Result<ExitCode, Error> {
    let config = load_study_config(&args.config, args.seed)?;
    let truth = study_truth(&config);
    let data = simulate_replication(&config, &truth, args.replication);
    std::fs::create_dir_all(&args.out).map_err(|e| Error::Io {
        path: args.out.display().to_string(),
        source: e,
    })?;
    io::write_data_csv(&args.out.join("data.csv"), &data)?;
    let (q, truth_file) = match &truth {
        StudyTruth::Ifa(p) => {
            let q = p
                .q_mask
                .clone()
                .unwrap_or_else(|| vec![vec![1; p.n_factors()]; p.n_items()]);
            (q, ParamFile::Ifa(p.clone()))
        }
        StudyTruth::Rlca(p) => (p.q.clone(), ParamFile::Rlca(p.clone())),
    };
    io::write_qmatrix_csv(&args.out.join("qmatrix.csv"), &q)?;
    io::write_params_json(&args.out.join("truth.json"), &truth_file)?;
    println!(
        "simulated study {} replication {} (N={}) into {}",
        config.study.name(),
        args.replication,
        config.n(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_fit(args: FitArgs) -> Result<ExitCode, Error> {
    let data = io::read_data_csv(&args.data)?;
    let q = io::read_qmatrix_csv(&args.qmatrix)?;
    if q.len() != data.n_items() {
        return Err(Error::Usage(format!(
            "Q matrix has {} rows but the data has {} items",
            q.len(),
            data.n_items()
        )));
    }
    let variant = Variant::parse(&args.variant)
        .ok_or_else(|| Error::Usage(format!("unknown variant '{}'", args.variant)))?;
    let mut base = OptimizerConfig::default();
    args.optimizer.apply(&mut base);

    std::fs::create_dir_all(&args.out).map_err(|e| Error::Io {
        path: args.out.display().to_string(),
        source: e,
    })?;

    let start_file = match &args.start {
        Some(p) => Some(io::read_params_json(p)?),
        None => None,
    };

    let (params_out, fit) = match args.model.as_str() {
        "ifa" => {
            let k = q[0].len();
            let penalty = match args.penalty_lambda {
                Some(l) => Penalty::L1 { lambda: l },
                None if args.exploratory => {
                    let n = data.n_respondents() as f64;
                    let j = data.n_items() as f64;
                    Penalty::L1 {
                        lambda: (n * j.ln()).sqrt(),
                    }
                }
                None => Penalty::None,
            };
            let q_mask = if args.exploratory { None } else { Some(q) };
            let start = match &start_file {
                Some(f) => Some(
                    f.as_ifa()
                        .ok_or_else(|| Error::Usage("start file is not a factor model".into()))?
                        .clone(),
                ),
                None => None,
            };
            let (params, fit) = fit_ifa(
                &data,
                k,
                q_mask,
                penalty,
                variant,
                &base,
                args.seed,
                start.as_ref(),
            )?;
            (ParamFile::Ifa(params), fit)
        }
        "rlca" => {
            let start = match &start_file {
                Some(f) => Some(
                    f.as_rlca()
                        .ok_or_else(|| Error::Usage("start file is not a class model".into()))?
                        .clone(),
                ),
                None => None,
            };
            let (params, fit) =
                fit_rlca(&data, q, variant, &base, args.seed, start.as_ref())?;
            (ParamFile::Rlca(params), fit)
        }
        other => return Err(Error::Usage(format!("unknown model '{other}'"))),
    };

    io::write_params_json(&args.out.join("fit.json"), &params_out)?;
    io::write_json(
        &args.out.join("fit_meta.json"),
        &serde_json::json!({
            "variant": variant.name(),
            "seed": args.seed,
            "n_iters": fit.n_iters,
            "stopped_early": fit.stopped_early,
            "elapsed_seconds": fit.elapsed,
            "final_diff": fit.diff_trace.last(),
        }),
    )?;
    if args.trace {
        use proxlvm::optim::{TraceRecord, TraceSink};
        let mut sink = io::CsvTraceSink::create(&args.out.join("trace.csv"))?;
        for (i, &d) in fit.diff_trace.iter().enumerate() {
            sink.record(&TraceRecord {
                iter: i + 1,
                gamma: proxlvm::optim::step_size(i + 1, base.mu, base.epsilon),
                diff: d,
                elapsed_ms: f64::NAN,
            });
        }
    }
    println!(
        "fit: {} iterations ({}), estimate written to {}",
        fit.n_iters,
        if fit.stopped_early {
            "stopping rule"
        } else {
            "iteration cap"
        },
        args.out.join("fit.json").display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_em(args: EmArgs) -> Result<ExitCode, Error> {
    let data = io::read_data_csv(&args.data)?;
    let q = io::read_qmatrix_csv(&args.qmatrix)?;
    if q.len() != data.n_items() {
        return Err(Error::Usage(format!(
            "Q matrix has {} rows but the data has {} items",
            q.len(),
            data.n_items()
        )));
    }
    let k = q[0].len();
    let grid = gh_grid(k, args.points)?;
    let fit = em_fit_ifa(&data, Some(&q), &grid, args.max_iter, args.tol)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::Io {
        path: args.out.display().to_string(),
        source: e,
    })?;
    io::write_params_json(&args.out.join("em.json"), &ParamFile::Ifa(fit.params.clone()))?;
    io::write_json(
        &args.out.join("em_meta.json"),
        &serde_json::json!({
            "loglik": fit.loglik,
            "n_iters": fit.n_iters,
            "converged": fit.converged,
            "points_per_dim": args.points,
        }),
    )?;
    println!(
        "em: {} iterations, loglik {:.4}, estimate written to {}",
        fit.n_iters,
        fit.loglik,
        args.out.join("em.json").display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode, Error> {
    let est = io::read_params_json(&args.est)?;
    let reference = io::read_params_json(&args.reference)?;
    let mut printed = 0;
    match (&est, &reference) {
        (ParamFile::Ifa(e), ParamFile::Ifa(r)) => {
            let want = |m: &str| args.metric == "all" || args.metric == m;
            if want("mse_d") {
                let v = metrics::mse_masked(&e.d, &r.d, &vec![true; r.d.len()])?;
                println!("mse_d,{v}");
                printed += 1;
            }
            if want("mse_loadings") {
                let mask: Vec<bool> = match &r.q_mask {
                    Some(q) => q.iter().flatten().map(|&v| v != 0).collect(),
                    None => vec![true; r.d.len() * r.n_factors()],
                };
                let ef: Vec<f64> = e.a.iter().flatten().copied().collect();
                let rf: Vec<f64> = r.a.iter().flatten().copied().collect();
                let v = metrics::mse_masked(&ef, &rf, &mask)?;
                println!("mse_loadings,{v}");
                printed += 1;
            }
            if want("mse_loadings_permuted") {
                let v = metrics::mse_loading_permuted(&e.a, &r.a)?;
                println!("mse_loadings_permuted,{v}");
                printed += 1;
            }
            if want("mse_sigma12") && r.n_factors() >= 2 {
                let se = e.sigma()[1];
                let sr = r.sigma()[1];
                println!("mse_sigma12,{}", (se - sr) * (se - sr));
                printed += 1;
            }
        }
        (ParamFile::Rlca(e), ParamFile::Rlca(r)) => {
            let (t, n) = metrics::rlca_mse(&e.theta, &r.theta, &e.nu, &r.nu)?;
            if args.metric == "all" || args.metric == "theta_mse" {
                println!("theta_mse,{t}");
                printed += 1;
            }
            if args.metric == "all" || args.metric == "nu_mse" {
                println!("nu_mse,{n}");
                printed += 1;
            }
        }
        _ => {
            return Err(Error::Usage(
                "estimate and reference are different model families".into(),
            ))
        }
    }
    if printed == 0 {
        return Err(Error::Usage(format!(
            "metric '{}' does not apply to this model pair",
            args.metric
        )));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_study(args: StudyArgs) -> Result<ExitCode, Error> {
    let mut config = load_study_config(&args.config, args.seed)?;
    if let Some(out) = args.out {
        config.out_dir = Some(out);
    }
    if let Some(reps) = args.replications {
        config.replications = Some(reps);
    }
    let out = run_study(&config)?;
    for s in &out.summaries {
        println!(
            "study {} {}: q25 {:.6} median {:.6} q75 {:.6}",
            s.study, s.metric, s.q25, s.median, s.q75
        );
    }
    let n_reps = config.replications();
    if !out.failures.is_empty() {
        for (r, msg) in &out.failures {
            eprintln!("replication {r} failed: {msg}");
        }
        if out.failures.len() * 10 > n_reps {
            eprintln!(
                "{} of {} replications failed",
                out.failures.len(),
                n_reps
            );
            return Ok(ExitCode::from(3));
        }
    }
    Ok(ExitCode::SUCCESS)
}

