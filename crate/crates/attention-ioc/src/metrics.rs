//! Evaluation metrics: pooled glance-duration histograms with discrete
//! KL, temporal-mean Gaussian KL over the primary states, mean relative
//! reward deviation, and lateral squared error.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::simulator::Dataset;
use crate::util::min_eigenvalue;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("support violation: q is zero where p has mass (bin {0})")]
    Support(usize),
    #[error("distributions have different lengths ({0} vs {1})")]
    Length(usize, usize),
    #[error("summaries cover different horizons ({0} vs {1})")]
    Horizon(usize, usize),
    #[error("covariance at t = {0} singular even after regularization")]
    Singular(usize),
    #[error("reward deviation undefined: true theta has a zero coordinate (index {0})")]
    ZeroCoordinate(usize),
    #[error("rollout horizon {0} does not match reference length {1}")]
    HorizonMismatch(usize, usize),
}

/// Default additive smoothing mass per histogram bin. Keeps the
/// discrete KL finite when a bin is empty on one side.
pub const DEFAULT_SMOOTHING_EPS: f64 = 1e-6;

/// Pooled empirical distribution of the glance duration over all steps
/// and trajectories, additively smoothed then renormalized.
pub fn d_histogram(dataset: &Dataset, d_max: usize, smoothing_eps: f64) -> Vec<f64> {
    let mut counts = vec![smoothing_eps; d_max + 1];
    for traj in &dataset.trajectories {
        for step in &traj.steps {
            counts[step.d.min(d_max)] += 1.0;
        }
    }
    let total: f64 = counts.iter().sum();
    if total > 0.0 {
        for c in counts.iter_mut() {
            *c /= total;
        }
    }
    counts
}

/// sum_i p_i (log p_i - log q_i), with 0 log 0 := 0.
pub fn kl_discrete(p: &[f64], q: &[f64]) -> Result<f64, MetricError> {
    if p.len() != q.len() {
        return Err(MetricError::Length(p.len(), q.len()));
    }
    let mut kl = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(MetricError::Support(i));
            }
            kl += pi * (pi.ln() - qi.ln());
        }
    }
    Ok(kl)
}

/// Per-timestep Gaussian fit of the primary states of a dataset.
#[derive(Debug, Clone)]
pub struct GaussianSummary {
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
    pub counts: Vec<usize>,
}

impl GaussianSummary {
    /// Unbiased per-t fits over the trajectories of a dataset.
    pub fn fit(dataset: &Dataset) -> Self {
        let horizon = dataset.horizon();
        let n_x = dataset.trajectories[0].steps[0].x_p.len();
        let n = dataset.len();
        let mut means = Vec::with_capacity(horizon + 1);
        let mut covs = Vec::with_capacity(horizon + 1);
        for t in 0..=horizon {
            let mut mean = DVector::zeros(n_x);
            for traj in &dataset.trajectories {
                mean += &traj.steps[t].x_p;
            }
            mean /= n as f64;
            let mut cov = DMatrix::zeros(n_x, n_x);
            if n >= 2 {
                for traj in &dataset.trajectories {
                    let r = &traj.steps[t].x_p - &mean;
                    cov += &r * r.transpose();
                }
                cov /= (n - 1) as f64;
            }
            means.push(mean);
            covs.push(cov);
        }
        GaussianSummary { means, covs, counts: vec![n; horizon + 1] }
    }
}

const SINGULAR_GUARD: f64 = 1e-12;
const REG_EPS: f64 = 1e-10;

/// Temporal mean of the Gaussian KL(reference_t || candidate_t) over the
/// per-t fits. When either covariance of a slice is near singular, both
/// are ridge-regularized by the same amount so that identical summaries
/// still give exactly zero.
pub fn kl_gaussian_temporal(reference: &GaussianSummary, candidate: &GaussianSummary) -> Result<f64, MetricError> {
    if reference.means.len() != candidate.means.len() {
        return Err(MetricError::Horizon(reference.means.len(), candidate.means.len()));
    }
    let n_slices = reference.means.len();
    let dim = reference.means[0].len();
    let mut total = 0.0;
    for t in 0..n_slices {
        let mut sig = reference.covs[t].clone();
        let mut sig_c = candidate.covs[t].clone();
        if min_eigenvalue(&sig) < SINGULAR_GUARD || min_eigenvalue(&sig_c) < SINGULAR_GUARD {
            for i in 0..dim {
                sig[(i, i)] += REG_EPS;
                sig_c[(i, i)] += REG_EPS;
            }
        }
        let chol_c = nalgebra::Cholesky::new(sig_c.clone()).ok_or(MetricError::Singular(t))?;
        let chol_r = nalgebra::Cholesky::new(sig.clone()).ok_or(MetricError::Singular(t))?;
        let logdet_c: f64 = 2.0 * chol_c.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        let logdet_r: f64 = 2.0 * chol_r.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        let tr = (chol_c.solve(&sig)).trace();
        let dm = &reference.means[t] - &candidate.means[t];
        let quad = dm.dot(&chol_c.solve(&DMatrix::from_column_slice(dim, 1, dm.as_slice())).column(0).into_owned());
        total += tr + quad - dim as f64 + logdet_c - logdet_r;
    }
    Ok(total / (2.0 * n_slices as f64))
}

/// Mean relative deviation mean_i |theta'_i - theta_i| / |theta_i|.
pub fn reward_rd(theta: &DVector<f64>, theta_prime: &DVector<f64>) -> Result<f64, MetricError> {
    if theta.len() != theta_prime.len() {
        return Err(MetricError::Length(theta.len(), theta_prime.len()));
    }
    let mut total = 0.0;
    for i in 0..theta.len() {
        if theta[i] == 0.0 {
            return Err(MetricError::ZeroCoordinate(i));
        }
        total += (theta_prime[i] - theta[i]).abs() / theta[i].abs();
    }
    Ok(total / theta.len() as f64)
}

/// Monte Carlo estimate of the expected mean squared error between a
/// reference lateral series and the rollouts' component `y_index`.
pub fn lateral_se(reference_y: &[f64], rollouts: &Dataset, y_index: usize) -> Result<f64, MetricError> {
    let horizon = rollouts.horizon();
    if reference_y.len() != horizon + 1 {
        return Err(MetricError::HorizonMismatch(horizon, reference_y.len()));
    }
    let mut total = 0.0;
    for traj in &rollouts.trajectories {
        let mut per_traj = 0.0;
        for (t, step) in traj.steps.iter().enumerate() {
            let diff = step.x_p[y_index] - reference_y[t];
            per_traj += diff * diff;
        }
        total += per_traj / (horizon + 1) as f64;
    }
    Ok(total / rollouts.len() as f64)
}
