//! CLI for the attention-switching IOC engine: simulate demonstration
//! data, estimate rewards (MCE / MCL) or a direct policy (DPE),
//! evaluate datasets against each other, and run the full simulated
//! driver experiment.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use attention_ioc::belief::tabulate_covariances;
use attention_ioc::config::{load_problem_config, ProblemConfig};
use attention_ioc::dpe::{fit_dpe, DpeOptions};
use attention_ioc::estimators::{estimate_reward, EstimationMethod, EstimationOptions};
use attention_ioc::experiment::{emit_outputs, load_config, run_e1, Scale};
use attention_ioc::metrics::{d_histogram, kl_discrete, kl_gaussian_temporal, GaussianSummary};
use attention_ioc::model::build_driver_problem;
use attention_ioc::policy::solve_soft_policy;
use attention_ioc::simulator::{export_dataset, import_dataset, simulate_batch};

#[derive(Parser)]
#[command(name = "attention-ioc", version, about = "Exact MCE inverse optimal control for attention-switched LQG dual tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConfigKind {
    Problem,
    Experiment,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Mce,
    Mcl,
    Dpe,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Desk,
    Paper,
}

#[derive(Subcommand)]
enum Command {
    /// Check a config file against its schema and report violations.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value = "problem")]
        kind: ConfigKind,
    },
    /// Roll out the soft policy of a problem config and write a dataset.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also dump the solved policy tables (debug format).
        #[arg(long)]
        dump_policy: Option<PathBuf>,
    },
    /// Fit reward parameters (mce, mcl) or a direct policy (dpe) on a dataset.
    Estimate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        method: MethodArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score a candidate dataset against a reference dataset.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        candidate: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the simulated driver evaluation pipeline.
    RunE1 {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long, value_enum, default_value = "desk")]
        scale: ScaleArg,
        /// Restrict the run to a single seed (overrides the config list).
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::ValidateConfig { config, kind } => validate_config(&config, kind),
        Command::Simulate { config, out, count, seed, dump_policy } => simulate(&config, &out, count, seed, dump_policy.as_deref()),
        Command::Estimate { config, data, method, out, seed } => estimate(&config, &data, method, &out, seed),
        Command::Evaluate { config, reference, candidate, out } => evaluate(&config, &reference, &candidate, out.as_deref()),
        Command::RunE1 { config, out, threads, scale, seed } => run_experiment(&config, out.as_deref(), threads, scale, seed),
    }
}

fn build_from_problem_config(cfg: &ProblemConfig) -> Result<(attention_ioc::model::AttentionProblem, attention_ioc::model::RewardParams)> {
    let driver = cfg.to_driver_config()?;
    let theta = cfg.theta_params()?;
    let problem = build_driver_problem(&driver)?;
    let report = attention_ioc::model::validate_problem(&problem);
    if !report.is_valid() {
        bail!("problem config produces an invalid problem: {:?}", report.violations);
    }
    Ok((problem, theta))
}

fn validate_config(path: &Path, kind: ConfigKind) -> Result<()> {
    match kind {
        ConfigKind::Problem => {
            let cfg = load_problem_config(path).context("problem config rejected")?;
            let (problem, theta) = build_from_problem_config(&cfg)?;
            for w in theta.sign_warnings() {
                println!("warning: {w}");
            }
            println!(
                "ok: driver problem with horizon {} ({} s at dt = {}), d_max {}",
                problem.horizon,
                problem.horizon as f64 * problem.dt,
                problem.dt,
                problem.d_max
            );
        }
        ConfigKind::Experiment => {
            let cfg = load_config(path).context("experiment config rejected")?;
            println!(
                "ok: experiment over {} scenarios, k grid {:?}, {} seeds, methods {:?} (hash {})",
                cfg.scenarios.len(),
                cfg.k_grid,
                cfg.seeds.len(),
                cfg.methods,
                cfg.hash()
            );
        }
    }
    Ok(())
}

fn simulate(config: &Path, out: &Path, count: usize, seed: u64, dump_policy: Option<&Path>) -> Result<()> {
    let cfg = load_problem_config(config)?;
    let (problem, theta) = build_from_problem_config(&cfg)?;
    for w in theta.sign_warnings() {
        println!("warning: {w}");
    }
    let schedule = tabulate_covariances(&problem)?;
    let policy = solve_soft_policy(&problem, &schedule, &theta)?;
    if let Some(path) = dump_policy {
        std::fs::write(path, serde_json::to_string(&policy.dump_json())?)?;
        println!("policy tables dumped to {}", path.display());
    }
    let mut data = simulate_batch(&problem, &schedule, &policy, count, seed)?;
    data.meta.policy_id = "soft".into();
    data.meta.theta = Some(theta.to_vector().iter().cloned().collect());
    data.meta.base_seed = seed;
    export_dataset(&data, &problem, out)?;
    println!("wrote {count} trajectories of {} steps to {}", problem.horizon + 1, out.display());
    Ok(())
}

fn estimate(config: &Path, data_path: &Path, method: MethodArg, out: &Path, seed: u64) -> Result<()> {
    let cfg = load_problem_config(config)?;
    let (problem, theta_init) = build_from_problem_config(&cfg)?;
    let data = import_dataset(&problem, data_path)?;

    let report = match method {
        MethodArg::Mce | MethodArg::Mcl => {
            let schedule = tabulate_covariances(&problem)?;
            let est_method = if matches!(method, MethodArg::Mce) { EstimationMethod::Mce } else { EstimationMethod::Mcl };
            let opts = EstimationOptions::new(est_method, theta_init);
            let res = estimate_reward(&problem, &schedule, &data, &opts)?;
            println!(
                "{} finished after {} iterations (converged = {})",
                if matches!(method, MethodArg::Mce) { "MCE" } else { "MCL" },
                res.iterations,
                res.converged
            );
            serde_json::json!({
                "method": if matches!(method, MethodArg::Mce) { "mce" } else { "mcl" },
                "theta_hat": res.theta_star.to_vector().iter().cloned().collect::<Vec<f64>>(),
                "converged": res.converged,
                "iterations": res.iterations,
                "objective_trace": res.objective_trace,
                "grad_norm_trace": res.grad_norm_trace,
                "options": {
                    "barrier_weight": opts.barrier_weight,
                    "rel_grad_tol": opts.rel_grad_tol,
                    "max_iters": opts.max_iters,
                    "theta_init": opts.theta_init.to_vector().iter().cloned().collect::<Vec<f64>>(),
                },
                "n_trajectories": data.len(),
            })
        }
        MethodArg::Dpe => {
            let res = fit_dpe(&data, &DpeOptions { folds: 5, seed, lambda_grid: None })?;
            println!("DPE fit complete (saturated = {})", res.saturated);
            serde_json::json!({
                "method": "dpe",
                "gain": res.gain.row(0).iter().cloned().collect::<Vec<f64>>(),
                "offset": res.offset.iter().cloned().collect::<Vec<f64>>(),
                "sigma": res.sigma[(0, 0)],
                "switch_coefs": res.switch_coefs,
                "saturated": res.saturated,
                "cv": {
                    "linear_lambda": res.cv_trace.linear.first().map(|c| c.chosen),
                    "logistic_lambda": res.cv_trace.logistic.chosen,
                    "lambda_grid": res.cv_trace.logistic.lambdas,
                },
                "seed": seed,
                "n_trajectories": data.len(),
            })
        }
    };
    std::fs::write(out, serde_json::to_string_pretty(&report)?)?;
    println!("report written to {}", out.display());
    Ok(())
}

fn evaluate(config: &Path, reference: &Path, candidate: &Path, out: Option<&Path>) -> Result<()> {
    let cfg = load_problem_config(config)?;
    let (problem, _) = build_from_problem_config(&cfg)?;
    let ref_data = import_dataset(&problem, reference)?;
    let cand_data = import_dataset(&problem, candidate)?;

    let klg = kl_gaussian_temporal(&GaussianSummary::fit(&ref_data), &GaussianSummary::fit(&cand_data))?;
    let ref_hist = d_histogram(&ref_data, problem.d_max, attention_ioc::metrics::DEFAULT_SMOOTHING_EPS);
    let cand_hist = d_histogram(&cand_data, problem.d_max, attention_ioc::metrics::DEFAULT_SMOOTHING_EPS);
    let kld = kl_discrete(&ref_hist, &cand_hist)?;

    let mut lines = String::from("metric,value\n");
    lines.push_str(&format!("klg,{}\n", attention_ioc::util::fmt_g17(klg)));
    lines.push_str(&format!("kl,{}\n", attention_ioc::util::fmt_g17(kld)));
    match out {
        Some(path) => {
            std::fs::write(path, &lines)?;
            println!("KL^G = {klg:.6}, KL = {kld:.6} -> {}", path.display());
        }
        None => print!("{lines}"),
    }
    Ok(())
}

fn run_experiment(config: &Path, out: Option<&Path>, threads: Option<usize>, scale: ScaleArg, seed: Option<u64>) -> Result<()> {
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().ok();
    }
    let mut cfg = load_config(config)?;
    cfg.apply_scale(match scale {
        ScaleArg::Desk => Scale::Desk,
        ScaleArg::Paper => Scale::Paper,
    });
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    cfg.validate()?;

    let out_dir: PathBuf = match (out, &cfg.out_dir) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(p)) => PathBuf::from(p),
        (None, None) => bail!("no output directory: pass --out or set out_dir in the config"),
    };

    let started = std::time::Instant::now();
    let report = run_e1(&cfg, Some(&out_dir))?;
    let files = emit_outputs(&report, &out_dir)?;
    println!(
        "E1 complete in {:.1} s: {} cells over {} seeds (config hash {})",
        started.elapsed().as_secs_f64(),
        report.cells.len(),
        cfg.seeds.len(),
        report.config_hash
    );
    for f in files {
        println!("  {}", f.display());
    }
    for row in report.summaries.iter().filter(|r| r.metric == "rd") {
        println!("median RD {} k={}: {:.4}", row.method, row.k, row.median);
    }
    Ok(())
}
