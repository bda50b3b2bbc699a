//! Seeded trajectory rollouts of the true-state dynamics, observation
//! model and filter under any policy, plus dataset file I/O.
//!
//! Per-trajectory rng streams are counter-based (one stream index per
//! trajectory on a fixed key), so batch results do not depend on
//! execution order or thread count.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::belief::{filter_step, CovarianceSchedule, HybridState};
use crate::model::{eval_features, AttentionProblem, RewardParams};
use crate::policy::PolicyLike;
use crate::util::fmt_g17;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("dataset I/O failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed dataset file: {0}")]
    Parse(String),
    #[error("belief update failed: {0}")]
    Belief(#[from] crate::belief::BeliefError),
}

/// Observation received at a step: the full state after an attentive
/// glance, the noisy projection otherwise.
#[derive(Debug, Clone, PartialEq)]
pub enum Observation {
    Exact(DVector<f64>),
    Partial(DVector<f64>),
}

/// One logged step.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub t: usize,
    pub x_p: DVector<f64>,
    pub mu: DVector<f64>,
    pub d: usize,
    pub x_s: usize,
    pub u_p: DVector<f64>,
    pub u_o: usize,
    pub u_s: usize,
    pub obs: Observation,
    pub features: DVector<f64>,
}

impl StepRecord {
    pub fn x_o(&self) -> usize {
        usize::from(self.d == 0)
    }

    pub fn hybrid_state(&self) -> HybridState {
        HybridState::new(self.mu.clone(), self.d, self.x_s)
    }
}

/// A full rollout, t = 0..=horizon.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub steps: Vec<StepRecord>,
}

impl Trajectory {
    pub fn total_reward(&self, theta: &RewardParams) -> f64 {
        let tv = theta.to_vector();
        self.steps.iter().map(|s| tv.dot(&s.features)).sum()
    }

    pub fn feature_sum(&self) -> DVector<f64> {
        let mut acc = DVector::zeros(self.steps[0].features.len());
        for s in &self.steps {
            acc += &s.features;
        }
        acc
    }
}

/// Generator provenance carried alongside a batch of trajectories.
#[derive(Debug, Clone, Default)]
pub struct DatasetMeta {
    pub policy_id: String,
    pub scenario: String,
    pub theta: Option<Vec<f64>>,
    pub base_seed: u64,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.trajectories.first().map(|t| t.steps.len() - 1).unwrap_or(0)
    }

    /// Keeps only the first n trajectories (training subsets).
    pub fn take(&self, n: usize) -> Dataset {
        Dataset { trajectories: self.trajectories[..n.min(self.trajectories.len())].to_vec(), meta: self.meta.clone() }
    }
}

/// Start specification for a rollout; `forced_first` replaces the policy
/// draw at the first step (used by the cumulative-feature oracles).
#[derive(Debug, Clone)]
pub struct RolloutStart {
    pub t0: usize,
    pub x_p: DVector<f64>,
    pub state: HybridState,
    pub forced_first: Option<crate::policy::Controls>,
}

impl RolloutStart {
    pub fn from_problem(problem: &AttentionProblem) -> Self {
        Self {
            t0: 0,
            x_p: problem.init.x_p.clone(),
            state: HybridState::new(problem.init.x_p.clone(), problem.init.d, problem.init.x_s),
            forced_first: None,
        }
    }
}

fn draw_gaussian(rng: &mut dyn RngCore, sqrt: &DMatrix<f64>) -> DVector<f64> {
    let n = sqrt.nrows();
    let z = DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)));
    sqrt * z
}

/// Rolls a policy out from an arbitrary start. The rng draw order per
/// step is fixed: controls, process noise, secondary transition,
/// observation noise.
pub fn rollout(
    problem: &AttentionProblem,
    schedule: &CovarianceSchedule,
    policy: &dyn PolicyLike,
    start: &RolloutStart,
    rng: &mut dyn RngCore,
) -> Result<Trajectory, SimError> {
    let t_end = problem.horizon;
    let noise_sqrt = crate::util::psd_sqrt(&problem.process_noise);
    let obs_noise_sqrt = crate::util::psd_sqrt(&problem.obs_noise);
    let has_obs_noise = problem.obs_noise.abs().max() > 0.0;

    let mut x = start.x_p.clone();
    let mut state = start.state.clone();
    let mut obs = Observation::Exact(x.clone());
    let mut steps = Vec::with_capacity(t_end - start.t0 + 1);

    for t in start.t0..=t_end {
        let c = if t == start.t0 {
            match &start.forced_first {
                Some(f) => f.clone(),
                None => policy.sample(t, &state, rng),
            }
        } else {
            policy.sample(t, &state, rng)
        };
        let features = eval_features(problem, &x, &c.u_p, state.x_s, c.u_s, c.u_o)
            .map_err(|e| SimError::Parse(e.to_string()))?;
        steps.push(StepRecord {
            t,
            x_p: x.clone(),
            mu: state.mu.clone(),
            d: state.d,
            x_s: state.x_s,
            u_p: c.u_p.clone(),
            u_o: c.u_o,
            u_s: c.u_s,
            obs: obs.clone(),
            features,
        });

        if t == t_end {
            break;
        }

        let eps = draw_gaussian(rng, &noise_sqrt);
        let x_next = &problem.dyn_a[t] * &x + &problem.dyn_b[t] * &c.u_p + &problem.dyn_affine[t] + eps;
        let d_next = crate::belief::d_transition(state.d, c.u_o, problem.d_max);
        let obs_next = if d_next == 0 {
            Observation::Exact(x_next.clone())
        } else {
            let mut o = &problem.obs_h * &x_next;
            if has_obs_noise {
                o += draw_gaussian(rng, &obs_noise_sqrt);
            }
            Observation::Partial(o)
        };
        let obs_vec = match &obs_next {
            Observation::Exact(v) | Observation::Partial(v) => v.clone(),
        };
        state = filter_step(problem, schedule, t, &state, &c.u_p, c.u_o, c.u_s, &obs_vec, rng)?;
        x = x_next;
        obs = obs_next;
    }

    Ok(Trajectory { steps })
}

/// A single trajectory from the problem's initial state, fully
/// determined by the seed.
pub fn simulate_trajectory(
    problem: &AttentionProblem,
    schedule: &CovarianceSchedule,
    policy: &dyn PolicyLike,
    seed: u64,
) -> Result<Trajectory, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rollout(problem, schedule, policy, &RolloutStart::from_problem(problem), &mut rng)
}

/// n trajectories on per-trajectory counter streams of `base_seed`.
pub fn simulate_batch<P: PolicyLike + Sync>(
    problem: &AttentionProblem,
    schedule: &CovarianceSchedule,
    policy: &P,
    n: usize,
    base_seed: u64,
) -> Result<Dataset, SimError> {
    let trajectories: Result<Vec<_>, SimError> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
            rng.set_stream(i as u64);
            rollout(problem, schedule, policy, &RolloutStart::from_problem(problem), &mut rng)
        })
        .collect();
    Ok(Dataset {
        trajectories: trajectories?,
        meta: DatasetMeta { base_seed, ..Default::default() },
    })
}

/// Empirical feature expectation (1/n) sum_i sum_t phi(x_t^i, u_t^i),
/// evaluated on the logged true states.
pub fn empirical_feature_expectation(dataset: &Dataset) -> Result<DVector<f64>, SimError> {
    if dataset.is_empty() {
        return Err(SimError::EmptyDataset);
    }
    let mut acc = dataset.trajectories[0].feature_sum();
    for t in &dataset.trajectories[1..] {
        acc += t.feature_sum();
    }
    Ok(acc / dataset.len() as f64)
}

/// Writes one row per step: t, trajectory id, true state, belief mean,
/// d, x_s, controls and reward, at 17 significant digits, plus a JSON
/// metadata sidecar ("<path>.meta.json").
pub fn export_dataset(dataset: &Dataset, problem: &AttentionProblem, path: &Path) -> Result<(), SimError> {
    let n_x = problem.n_x();
    let n_u = problem.n_u();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);

    let mut header: Vec<String> = vec!["t".into(), "traj".into()];
    header.extend((0..n_x).map(|i| format!("x_p_{i}")));
    header.extend((0..n_x).map(|i| format!("mu_{i}")));
    header.push("d".into());
    header.push("x_s".into());
    header.extend((0..n_u).map(|i| format!("u_p_{i}")));
    header.push("u_o".into());
    header.push("u_s".into());
    header.push("reward".into());
    writeln!(f, "{}", header.join(","))?;

    let theta = dataset.meta.theta.as_ref().map(|t| DVector::from_vec(t.clone()));
    for (i, traj) in dataset.trajectories.iter().enumerate() {
        for s in &traj.steps {
            let mut row: Vec<String> = vec![s.t.to_string(), i.to_string()];
            row.extend(s.x_p.iter().map(|v| fmt_g17(*v)));
            row.extend(s.mu.iter().map(|v| fmt_g17(*v)));
            row.push(s.d.to_string());
            row.push(s.x_s.to_string());
            row.extend(s.u_p.iter().map(|v| fmt_g17(*v)));
            row.push(s.u_o.to_string());
            row.push(s.u_s.to_string());
            let reward = theta.as_ref().map(|t| t.dot(&s.features)).unwrap_or(0.0);
            row.push(fmt_g17(reward));
            writeln!(f, "{}", row.join(","))?;
        }
    }
    f.flush()?;

    let meta = serde_json::json!({
        "policy_id": dataset.meta.policy_id,
        "scenario": dataset.meta.scenario,
        "theta": dataset.meta.theta,
        "base_seed": dataset.meta.base_seed,
        "n_trajectories": dataset.len(),
        "horizon": dataset.horizon(),
    });
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta).unwrap())?;
    Ok(())
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".meta.json");
    std::path::PathBuf::from(s)
}

/// Reads a dataset previously written by [`export_dataset`]. Features
/// are recomputed from the logged states and controls (the same code
/// path that wrote them, so the round trip is bit-exact); observations
/// are not persisted.
pub fn import_dataset(problem: &AttentionProblem, path: &Path) -> Result<Dataset, SimError> {
    let n_x = problem.n_x();
    let n_u = problem.n_u();
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header = lines.next().ok_or_else(|| SimError::Parse("missing header".into()))??;
    let expected_cols = 2 + 2 * n_x + 2 + n_u + 3;
    if header.split(',').count() != expected_cols {
        return Err(SimError::Parse(format!(
            "expected {expected_cols} columns for this problem, found {}",
            header.split(',').count()
        )));
    }

    let mut trajectories: Vec<Trajectory> = Vec::new();
    let mut current: Vec<StepRecord> = Vec::new();
    let mut current_id: Option<usize> = None;
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected_cols {
            return Err(SimError::Parse(format!("row has {} fields, expected {expected_cols}", fields.len())));
        }
        let parse_f = |s: &str| s.parse::<f64>().map_err(|e| SimError::Parse(format!("bad float {s:?}: {e}")));
        let parse_u = |s: &str| s.parse::<usize>().map_err(|e| SimError::Parse(format!("bad integer {s:?}: {e}")));

        let t = parse_u(fields[0])?;
        let traj_id = parse_u(fields[1])?;
        let mut k = 2;
        let x_p = DVector::from_iterator(n_x, fields[k..k + n_x].iter().map(|s| parse_f(s)).collect::<Result<Vec<_>, _>>()?);
        k += n_x;
        let mu = DVector::from_iterator(n_x, fields[k..k + n_x].iter().map(|s| parse_f(s)).collect::<Result<Vec<_>, _>>()?);
        k += n_x;
        let d = parse_u(fields[k])?;
        let x_s = parse_u(fields[k + 1])?;
        k += 2;
        let u_p = DVector::from_iterator(n_u, fields[k..k + n_u].iter().map(|s| parse_f(s)).collect::<Result<Vec<_>, _>>()?);
        k += n_u;
        let u_o = parse_u(fields[k])?;
        let u_s = parse_u(fields[k + 1])?;

        if current_id != Some(traj_id) {
            if !current.is_empty() {
                trajectories.push(Trajectory { steps: std::mem::take(&mut current) });
            }
            current_id = Some(traj_id);
        }
        let features = eval_features(problem, &x_p, &u_p, x_s, u_s, u_o).map_err(|e| SimError::Parse(e.to_string()))?;
        let obs = if d == 0 { Observation::Exact(x_p.clone()) } else { Observation::Partial(&problem.obs_h * &x_p) };
        current.push(StepRecord { t, x_p, mu, d, x_s, u_p, u_o, u_s, obs, features });
    }
    if !current.is_empty() {
        trajectories.push(Trajectory { steps: current });
    }
    if trajectories.is_empty() {
        return Err(SimError::EmptyDataset);
    }

    let mut meta = DatasetMeta::default();
    if let Ok(raw) = std::fs::read_to_string(sidecar_path(path)) {
        if let Ok(v) = serde_json::from_str::<serde_json::Value>(&raw) {
            meta.policy_id = v["policy_id"].as_str().unwrap_or_default().to_string();
            meta.scenario = v["scenario"].as_str().unwrap_or_default().to_string();
            meta.base_seed = v["base_seed"].as_u64().unwrap_or(0);
            meta.theta = v["theta"]
                .as_array()
                .map(|a| a.iter().filter_map(|x| x.as_f64()).collect());
        }
    }
    Ok(Dataset { trajectories, meta })
}
