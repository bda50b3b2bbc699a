//! The simulated-driver evaluation pipeline: train MCE / MCL / DPE on
//! growing prefixes of a demonstration pool from one scenario, roll the
//! fitted policies out on every scenario, and score them against fresh
//! true-policy reference sets. Every quantity is a pure function of
//! (config, seeds); reruns are byte-identical and completed cells are
//! skipped via an on-disk cache keyed by the config hash.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::belief::{tabulate_covariances, CovarianceSchedule};
use crate::config::parse_matrix4;
use crate::dpe::{fit_dpe, DpeOptions};
use crate::estimators::{estimate_reward, EstimationMethod, EstimationOptions};
use crate::metrics::{d_histogram, kl_discrete, kl_gaussian_temporal, reward_rd, GaussianSummary};
use crate::model::{build_driver_problem, AttentionProblem, DriverConfig, RewardParams};
use crate::policy::{solve_soft_policy, SoftPolicy};
use crate::simulator::{simulate_batch, Dataset};
use crate::util::{derive_seed, fmt_g17, median, quantile};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("config schema violation: {0}")]
    Schema(String),
    #[error("invalid experiment config: {0}")]
    Invalid(String),
    #[error("true policy unsolvable for scenario {0}: {1}")]
    TruePolicy(String, String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub speed: f64,
    pub curvature: f64,
}

fn default_dt() -> f64 {
    0.04
}

fn default_horizon() -> usize {
    175
}

fn default_train_pool() -> usize {
    256
}

fn default_eval_count() -> usize {
    500
}

fn default_k_grid() -> Vec<u32> {
    vec![0, 4, 8]
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

fn default_methods() -> Vec<String> {
    vec!["mce".into(), "mcl".into(), "dpe".into()]
}

fn default_steering_ratio() -> f64 {
    crate::model::DEFAULT_STEERING_RATIO
}

fn default_smoothing_eps() -> f64 {
    crate::metrics::DEFAULT_SMOOTHING_EPS
}

fn default_barrier() -> f64 {
    1e-4
}

fn default_tol() -> f64 {
    1e-6
}

fn default_max_iters() -> usize {
    200
}

/// Default per-step disturbance variances on [y, dy, phi, alpha] used
/// when no process-noise override is given. Full-rank so that every
/// reward feature sees independent excitation, which keeps the
/// feature-matching estimator well conditioned.
pub const DEFAULT_PROCESS_VARIANCES: [f64; 4] = [1e-4, 1e-3, 4e-6, 2.5e-5];

/// The default experiment process noise as a matrix.
pub fn default_process_noise() -> nalgebra::DMatrix<f64> {
    nalgebra::DMatrix::from_diagonal(&DVector::from_row_slice(&DEFAULT_PROCESS_VARIANCES))
}

/// Full experiment specification; missing fields take desk-scale
/// defaults (dt = 0.04 s, horizon = 175 steps, d_max = horizon).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Scenario name -> (speed, curvature). Training always uses "s1";
    /// every scenario is evaluated.
    pub scenarios: BTreeMap<String, ScenarioSpec>,
    /// True reward vector (6 entries) generating the demonstrations.
    pub theta: Vec<f64>,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default)]
    pub d_max: Option<usize>,
    #[serde(default = "default_train_pool")]
    pub train_pool: usize,
    #[serde(default = "default_eval_count")]
    pub eval_count: usize,
    #[serde(default = "default_k_grid")]
    pub k_grid: Vec<u32>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_methods")]
    pub methods: Vec<String>,
    /// Shared 4x4 process-noise override; per-scenario kinematic noise
    /// is used when absent.
    #[serde(default)]
    pub process_noise: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_steering_ratio")]
    pub steering_ratio: f64,
    #[serde(default = "default_smoothing_eps")]
    pub smoothing_eps: f64,
    #[serde(default = "default_barrier")]
    pub barrier_weight: f64,
    #[serde(default = "default_tol")]
    pub rel_grad_tol: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default)]
    pub out_dir: Option<String>,
}

/// Desk-scale (default) vs full-protocol counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Desk,
    Paper,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        if !self.scenarios.contains_key("s1") {
            return Err(ExperimentError::Invalid("scenarios must include the training scenario \"s1\"".into()));
        }
        if self.theta.len() != 6 {
            return Err(ExperimentError::Invalid(format!(
                "theta must have 6 entries (4 continuous, 1 secondary, 1 switching), got {}",
                self.theta.len()
            )));
        }
        if self.train_pool < 1 || self.eval_count < 1 {
            return Err(ExperimentError::Invalid("train_pool and eval_count must be >= 1".into()));
        }
        for &k in &self.k_grid {
            if (1usize << k) > self.train_pool {
                return Err(ExperimentError::Invalid(format!(
                    "k = {k} requires 2^{k} = {} training sequences but the pool has {}",
                    1usize << k,
                    self.train_pool
                )));
            }
        }
        if self.seeds.is_empty() {
            return Err(ExperimentError::Invalid("need at least one seed".into()));
        }
        for m in &self.methods {
            if !matches!(m.as_str(), "mce" | "mcl" | "dpe") {
                return Err(ExperimentError::Invalid(format!("unknown method {m:?}")));
            }
        }
        if let Some(rows) = &self.process_noise {
            parse_matrix4(rows)?;
        }
        if self.horizon < 1 {
            return Err(ExperimentError::Invalid("horizon must be >= 1".into()));
        }
        Ok(())
    }

    pub fn apply_scale(&mut self, scale: Scale) {
        if scale == Scale::Paper {
            self.k_grid = (0..=10).collect();
            self.train_pool = 3000;
            self.eval_count = 1976;
        }
    }

    pub fn theta_params(&self) -> RewardParams {
        RewardParams::from_vector(&DVector::from_vec(self.theta.clone()), 4, 1)
    }

    pub fn scenario_problem(&self, name: &str) -> Result<AttentionProblem, ExperimentError> {
        let spec = self
            .scenarios
            .get(name)
            .ok_or_else(|| ExperimentError::Invalid(format!("unknown scenario {name:?}")))?;
        let mut cfg = DriverConfig::new(spec.speed, spec.curvature, self.dt, self.horizon);
        cfg.steering_ratio = self.steering_ratio;
        cfg.d_max = self.d_max.unwrap_or(self.horizon);
        cfg.process_noise = match &self.process_noise {
            Some(rows) => parse_matrix4(rows)?,
            None => default_process_noise(),
        };
        build_driver_problem(&cfg).map_err(|e| ExperimentError::Invalid(e.to_string()))
    }

    /// Canonical hash of the resolved config; embedded in output file
    /// names and the cell cache path.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canon.as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}

/// Loads, defaults and validates an experiment config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, ExperimentError> {
    let raw = std::fs::read_to_string(path)?;
    let cfg: ExperimentConfig = serde_json::from_str(&raw).map_err(|e| ExperimentError::Schema(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// One (method, k, seed) training cell with its per-scenario scores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult {
    pub method: String,
    pub k: u32,
    pub seed: u64,
    pub theta_hat: Option<Vec<f64>>,
    pub converged: Option<bool>,
    pub rd: Option<f64>,
    /// scenario -> temporal Gaussian KL against the reference set
    pub klg: BTreeMap<String, f64>,
    /// scenario -> discrete KL of the glance-duration histogram
    pub kld: BTreeMap<String, f64>,
    pub failed: Option<String>,
}

/// Self-baseline: a fresh true-policy sample scored against the
/// reference set of the same scenario.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineResult {
    pub seed: u64,
    pub klg: BTreeMap<String, f64>,
    pub kld: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub metric: String,
    pub method: String,
    pub scenario: String,
    pub k: u32,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
}

#[derive(Debug, Clone)]
pub struct E1Report {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub cells: Vec<CellResult>,
    pub baselines: Vec<BaselineResult>,
    pub summaries: Vec<SummaryRow>,
    /// (cell id, wall-clock ms); cache hits report zero. Not part of
    /// the deterministic output contract.
    pub timings: Vec<(String, u128)>,
}

// seed-derivation purposes
const TAG_TRAIN: u64 = 1;
const TAG_REF: u64 = 2;
const TAG_BASELINE: u64 = 3;
const TAG_EVAL: u64 = 4;

fn scenario_index(cfg: &ExperimentConfig, name: &str) -> u64 {
    cfg.scenarios.keys().position(|k| k == name).unwrap_or(0) as u64
}

fn eval_tag(method_idx: u64, k: u32, scenario_idx: u64) -> u64 {
    TAG_EVAL * 1_000_000 + method_idx * 10_000 + k as u64 * 16 + scenario_idx
}

struct ScenarioContext {
    name: String,
    problem: AttentionProblem,
    schedule: CovarianceSchedule,
    true_policy: SoftPolicy,
}

/// Runs the full pipeline. When `cache_dir` is set, completed cells are
/// loaded from `<cache_dir>/cells/<config-hash>/` instead of recomputed.
pub fn run_e1(cfg: &ExperimentConfig, cache_dir: Option<&Path>) -> Result<E1Report, ExperimentError> {
    cfg.validate()?;
    let config_hash = cfg.hash();
    let theta_true = cfg.theta_params();

    let mut contexts: Vec<ScenarioContext> = Vec::new();
    for name in cfg.scenarios.keys() {
        let problem = cfg.scenario_problem(name)?;
        let schedule =
            tabulate_covariances(&problem).map_err(|e| ExperimentError::TruePolicy(name.clone(), e.to_string()))?;
        let true_policy = solve_soft_policy(&problem, &schedule, &theta_true)
            .map_err(|e| ExperimentError::TruePolicy(name.clone(), e.to_string()))?;
        contexts.push(ScenarioContext { name: name.clone(), problem, schedule, true_policy });
    }
    let train_ctx = contexts.iter().find(|c| c.name == "s1").expect("validated");

    let cell_cache = cache_dir.map(|d| d.join("cells").join(&config_hash));
    if let Some(dir) = &cell_cache {
        std::fs::create_dir_all(dir)?;
    }

    let mut cells: Vec<CellResult> = Vec::new();
    let mut baselines: Vec<BaselineResult> = Vec::new();
    let mut timings: Vec<(String, u128)> = Vec::new();

    for &seed in &cfg.seeds {
        // Per-seed shared artifacts: the training pool, and per scenario
        // a reference set plus an independent baseline set.
        let pool = simulate_batch(
            &train_ctx.problem,
            &train_ctx.schedule,
            &train_ctx.true_policy,
            cfg.train_pool,
            derive_seed(seed, TAG_TRAIN),
        )
        .map_err(|e| ExperimentError::Invalid(e.to_string()))?;

        let mut refs: BTreeMap<String, (Dataset, GaussianSummary, Vec<f64>)> = BTreeMap::new();
        let mut baseline = BaselineResult { seed, klg: BTreeMap::new(), kld: BTreeMap::new() };
        for (idx, ctx) in contexts.iter().enumerate() {
            let ref_set = simulate_batch(
                &ctx.problem,
                &ctx.schedule,
                &ctx.true_policy,
                cfg.eval_count,
                derive_seed(seed, TAG_REF * 1_000_000 + idx as u64),
            )
            .map_err(|e| ExperimentError::Invalid(e.to_string()))?;
            let base_set = simulate_batch(
                &ctx.problem,
                &ctx.schedule,
                &ctx.true_policy,
                cfg.eval_count,
                derive_seed(seed, TAG_BASELINE * 1_000_000 + idx as u64),
            )
            .map_err(|e| ExperimentError::Invalid(e.to_string()))?;
            let ref_summary = GaussianSummary::fit(&ref_set);
            let ref_hist = d_histogram(&ref_set, ctx.problem.d_max, cfg.smoothing_eps);
            let base_summary = GaussianSummary::fit(&base_set);
            let base_hist = d_histogram(&base_set, ctx.problem.d_max, cfg.smoothing_eps);
            baseline.klg.insert(
                ctx.name.clone(),
                kl_gaussian_temporal(&ref_summary, &base_summary).map_err(|e| ExperimentError::Invalid(e.to_string()))?,
            );
            baseline.kld.insert(
                ctx.name.clone(),
                kl_discrete(&ref_hist, &base_hist).map_err(|e| ExperimentError::Invalid(e.to_string()))?,
            );
            refs.insert(ctx.name.clone(), (ref_set, ref_summary, ref_hist));
        }
        baselines.push(baseline);

        // Independent training cells for this seed, in parallel.
        let jobs: Vec<(String, u32)> = cfg
            .methods
            .iter()
            .flat_map(|m| cfg.k_grid.iter().map(move |&k| (m.clone(), k)))
            .collect();
        let mut seed_cells: Vec<(CellResult, u128)> = jobs
            .par_iter()
            .map(|(method, k)| {
                let cell_id = format!("{method}_k{k}_seed{seed}");
                if let Some(dir) = &cell_cache {
                    let path = dir.join(format!("{cell_id}.json"));
                    if let Ok(raw) = std::fs::read_to_string(&path) {
                        if let Ok(cell) = serde_json::from_str::<CellResult>(&raw) {
                            return (cell, 0);
                        }
                    }
                }
                let start = Instant::now();
                let cell = run_cell(cfg, &contexts, &refs, &pool, method, *k, seed, &theta_true);
                let elapsed = start.elapsed().as_millis();
                if let Some(dir) = &cell_cache {
                    let path = dir.join(format!("{cell_id}.json"));
                    let _ = std::fs::write(&path, serde_json::to_string_pretty(&cell).unwrap());
                }
                (cell, elapsed)
            })
            .collect();
        for (cell, ms) in seed_cells.drain(..) {
            timings.push((format!("{}_k{}_seed{}", cell.method, cell.k, cell.seed), ms));
            cells.push(cell);
        }
    }

    // Deterministic ordering for the report/output files.
    cells.sort_by(|a, b| (&a.method, a.k, a.seed).cmp(&(&b.method, b.k, b.seed)));

    let summaries = summarize(cfg, &cells);
    Ok(E1Report { config: cfg.clone(), config_hash, cells, baselines, summaries, timings })
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    cfg: &ExperimentConfig,
    contexts: &[ScenarioContext],
    refs: &BTreeMap<String, (Dataset, GaussianSummary, Vec<f64>)>,
    pool: &Dataset,
    method: &str,
    k: u32,
    seed: u64,
    theta_true: &RewardParams,
) -> CellResult {
    let mut cell = CellResult {
        method: method.to_string(),
        k,
        seed,
        theta_hat: None,
        converged: None,
        rd: None,
        klg: BTreeMap::new(),
        kld: BTreeMap::new(),
        failed: None,
    };
    let train = pool.take(1usize << k);
    let train_ctx = contexts.iter().find(|c| c.name == "s1").expect("s1 exists");

    // Train, then build a per-scenario rollout policy.
    enum Fitted {
        Ioc(RewardParams),
        Dpe(crate::dpe::DpePolicy),
    }
    let fitted = match method {
        "mce" | "mcl" => {
            let est_method = if method == "mce" { EstimationMethod::Mce } else { EstimationMethod::Mcl };
            let mut opts = EstimationOptions::new(est_method, theta_true.clone());
            opts.barrier_weight = cfg.barrier_weight;
            opts.rel_grad_tol = cfg.rel_grad_tol;
            opts.max_iters = cfg.max_iters;
            match estimate_reward(&train_ctx.problem, &train_ctx.schedule, &train, &opts) {
                Ok(res) => {
                    cell.converged = Some(res.converged);
                    cell.theta_hat = Some(res.theta_star.to_vector().iter().cloned().collect());
                    cell.rd = reward_rd(&theta_true.to_vector(), &res.theta_star.to_vector()).ok();
                    Fitted::Ioc(res.theta_star)
                }
                Err(e) => {
                    cell.failed = Some(e.to_string());
                    return cell;
                }
            }
        }
        "dpe" => match fit_dpe(&train, &DpeOptions { folds: 5, seed: derive_seed(seed, 77), lambda_grid: None }) {
            Ok(p) => Fitted::Dpe(p),
            Err(e) => {
                cell.failed = Some(e.to_string());
                return cell;
            }
        },
        other => {
            cell.failed = Some(format!("unknown method {other:?}"));
            return cell;
        }
    };

    let method_idx = match method {
        "mce" => 0,
        "mcl" => 1,
        _ => 2,
    };
    for ctx in contexts {
        let scenario_idx = scenario_index(cfg, &ctx.name);
        let eval_seed = derive_seed(seed, eval_tag(method_idx, k, scenario_idx));
        let rollout = match &fitted {
            Fitted::Ioc(theta_hat) => match solve_soft_policy(&ctx.problem, &ctx.schedule, theta_hat) {
                Ok(policy) => simulate_batch(&ctx.problem, &ctx.schedule, &policy, cfg.eval_count, eval_seed),
                Err(e) => {
                    cell.failed = Some(format!("policy solve failed on {}: {e}", ctx.name));
                    continue;
                }
            },
            Fitted::Dpe(policy) => simulate_batch(&ctx.problem, &ctx.schedule, policy, cfg.eval_count, eval_seed),
        };
        let rollout = match rollout {
            Ok(r) => r,
            Err(e) => {
                cell.failed = Some(format!("rollout failed on {}: {e}", ctx.name));
                continue;
            }
        };
        let (_, ref_summary, ref_hist) = &refs[&ctx.name];
        let summary = GaussianSummary::fit(&rollout);
        let hist = d_histogram(&rollout, ctx.problem.d_max, cfg.smoothing_eps);
        match kl_gaussian_temporal(ref_summary, &summary) {
            Ok(v) => {
                cell.klg.insert(ctx.name.clone(), v);
            }
            Err(e) => cell.failed = Some(format!("KL^G failed on {}: {e}", ctx.name)),
        }
        match kl_discrete(ref_hist, &hist) {
            Ok(v) => {
                cell.kld.insert(ctx.name.clone(), v);
            }
            Err(e) => cell.failed = Some(format!("KL failed on {}: {e}", ctx.name)),
        }
    }
    cell
}

fn summarize(cfg: &ExperimentConfig, cells: &[CellResult]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for method in &cfg.methods {
        for &k in &cfg.k_grid {
            for scenario in cfg.scenarios.keys() {
                for metric in ["klg", "kl"] {
                    let vals: Vec<f64> = cells
                        .iter()
                        .filter(|c| &c.method == method && c.k == k)
                        .filter_map(|c| {
                            if metric == "klg" {
                                c.klg.get(scenario).copied()
                            } else {
                                c.kld.get(scenario).copied()
                            }
                        })
                        .collect();
                    if !vals.is_empty() {
                        rows.push(SummaryRow {
                            metric: metric.into(),
                            method: method.clone(),
                            scenario: scenario.clone(),
                            k,
                            median: median(&vals),
                            q25: quantile(&vals, 0.25),
                            q75: quantile(&vals, 0.75),
                        });
                    }
                }
            }
            let rds: Vec<f64> = cells
                .iter()
                .filter(|c| &c.method == method && c.k == k)
                .filter_map(|c| c.rd)
                .collect();
            if !rds.is_empty() {
                rows.push(SummaryRow {
                    metric: "rd".into(),
                    method: method.clone(),
                    scenario: "-".into(),
                    k,
                    median: median(&rds),
                    q25: quantile(&rds, 0.25),
                    q75: quantile(&rds, 0.75),
                });
            }
        }
    }
    rows
}

impl E1Report {
    /// Median of a summary metric for (method, scenario, k).
    pub fn summary(&self, metric: &str, method: &str, scenario: &str, k: u32) -> Option<&SummaryRow> {
        self.summaries
            .iter()
            .find(|r| r.metric == metric && r.method == method && r.scenario == scenario && r.k == k)
    }

    pub fn median_baseline_klg(&self, scenario: &str) -> Option<f64> {
        let vals: Vec<f64> = self.baselines.iter().filter_map(|b| b.klg.get(scenario).copied()).collect();
        if vals.is_empty() {
            None
        } else {
            Some(median(&vals))
        }
    }
}

/// Writes the report files into `dir`. All numeric output uses 17
/// significant digits and fixed row orderings, so reruns with the same
/// config and seeds emit byte-identical files; the timing sidecar is
/// the one exception and carries wall-clock measurements.
pub fn emit_outputs(report: &E1Report, dir: &Path) -> Result<Vec<PathBuf>, ExperimentError> {
    std::fs::create_dir_all(dir)?;
    let h = &report.config_hash;
    let mut written = Vec::new();

    let config_path = dir.join(format!("e1_config_{h}.json"));
    std::fs::write(&config_path, serde_json::to_string_pretty(&report.config).unwrap())?;
    written.push(config_path);

    let metrics_path = dir.join(format!("metrics_{h}.csv"));
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
        writeln!(f, "scenario,method,k,seed,metric,value")?;
        for cell in &report.cells {
            for (scenario, v) in &cell.klg {
                writeln!(f, "{scenario},{},{},{},klg,{}", cell.method, cell.k, cell.seed, fmt_g17(*v))?;
            }
            for (scenario, v) in &cell.kld {
                writeln!(f, "{scenario},{},{},{},kl,{}", cell.method, cell.k, cell.seed, fmt_g17(*v))?;
            }
            if let Some(rd) = cell.rd {
                writeln!(f, "-,{},{},{},rd,{}", cell.method, cell.k, cell.seed, fmt_g17(rd))?;
            }
            if let Some(reason) = &cell.failed {
                writeln!(f, "-,{},{},{},failed,\"{}\"", cell.method, cell.k, cell.seed, reason.replace('"', "'"))?;
            }
        }
        for b in &report.baselines {
            for (scenario, v) in &b.klg {
                writeln!(f, "{scenario},true,-,{},klg,{}", b.seed, fmt_g17(*v))?;
            }
            for (scenario, v) in &b.kld {
                writeln!(f, "{scenario},true,-,{},kl,{}", b.seed, fmt_g17(*v))?;
            }
        }
        f.flush()?;
    }
    written.push(metrics_path);

    let theta_path = dir.join(format!("theta_{h}.csv"));
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&theta_path)?);
        writeln!(f, "method,k,seed,coord,value")?;
        for cell in &report.cells {
            if let Some(theta) = &cell.theta_hat {
                for (i, v) in theta.iter().enumerate() {
                    writeln!(f, "{},{},{},{},{}", cell.method, cell.k, cell.seed, i, fmt_g17(*v))?;
                }
            }
        }
        f.flush()?;
    }
    written.push(theta_path);

    for metric in ["klg", "kl", "rd"] {
        let path = dir.join(format!("plot_{metric}_{h}.csv"));
        let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
        writeln!(f, "metric,method,scenario,k,median,q25,q75")?;
        for row in report.summaries.iter().filter(|r| r.metric == metric) {
            writeln!(
                f,
                "{},{},{},{},{},{},{}",
                row.metric,
                row.method,
                row.scenario,
                row.k,
                fmt_g17(row.median),
                fmt_g17(row.q25),
                fmt_g17(row.q75)
            )?;
        }
        f.flush()?;
        written.push(path);
    }

    // wall-clock sidecar; excluded from the determinism contract
    let timing_path = dir.join(format!("timings_{h}.csv"));
    {
        let mut f = std::io::BufWriter::new(std::fs::File::create(&timing_path)?);
        writeln!(f, "cell,ms")?;
        for (cell, ms) in &report.timings {
            writeln!(f, "{cell},{ms}")?;
        }
        f.flush()?;
    }

    Ok(written)
}
