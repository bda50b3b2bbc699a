//! Belief-MDP reduction: because the primary state is observed exactly
//! whenever attention is on it, the belief covariance depends only on
//! the step index and the glance duration d (steps since the last exact
//! observation). All covariance quantities are precomputed into tables
//! indexed by (t, d); the online filter then only updates means.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::model::AttentionProblem;
use crate::util::{pinv_psd, symmetrize};

#[derive(Debug, Error)]
pub enum BeliefError {
    #[error("covariance at (t={t}, d={d}) lost positive semidefiniteness (min eigenvalue {min_eig:.3e})")]
    NotPsd { t: usize, d: usize, min_eig: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Glance-duration transition. The attention bit is 1 (on the primary
/// task) exactly when d = 0; the switch control flips it, and d counts
/// steps since the last exact observation, saturating at d_max.
pub fn d_transition(d: usize, u_o: usize, d_max: usize) -> usize {
    let x_o = usize::from(d == 0);
    let x_o_next = (x_o + u_o) % 2;
    if x_o_next == 1 {
        0
    } else {
        (d + 1).min(d_max)
    }
}

/// Discrete hybrid state of the belief MDP: belief mean over the primary
/// state, glance duration, and secondary state.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridState {
    pub mu: DVector<f64>,
    pub d: usize,
    pub x_s: usize,
}

impl HybridState {
    pub fn new(mu: DVector<f64>, d: usize, x_s: usize) -> Self {
        Self { mu, d, x_s }
    }

    /// Attention bit: 1 iff the primary task is currently observed exactly.
    pub fn x_o(&self) -> usize {
        usize::from(self.d == 0)
    }
}

/// Index of the attention outcome at arrival: the next observation is
/// either exact (d' = 0) or through the noisy channel.
pub const BRANCH_INATTENTIVE: usize = 0;
pub const BRANCH_EXACT: usize = 1;

/// Precomputed covariance tables of the belief MDP.
///
/// * `post[t][d]` — posterior covariance at time t after d inattentive
///   steps since the last exact observation.
/// * `pred[t][d]` — one-step prediction into t+1 starting from (t, d).
/// * `gain[t][d]` — Kalman gain applied at arrival in t+1 when the
///   observation stays inattentive.
/// * `mean_update[t][d][branch]` — covariance of the stochastic belief
///   mean transition into t+1, for the inattentive and the exact branch.
#[derive(Debug, Clone)]
pub struct CovarianceSchedule {
    pub post: Vec<Vec<DMatrix<f64>>>,
    pub pred: Vec<Vec<DMatrix<f64>>>,
    pub gain: Vec<Vec<DMatrix<f64>>>,
    pub mean_update: Vec<Vec<[DMatrix<f64>; 2]>>,
    pub d_max: usize,
}

impl CovarianceSchedule {
    /// Posterior covariance at (t, d).
    pub fn posterior(&self, t: usize, d: usize) -> &DMatrix<f64> {
        &self.post[t][d.min(self.d_max)]
    }

    /// Covariance of the belief-mean transition t -> t+1 when choosing
    /// u_o at glance duration d.
    pub fn mean_update_for(&self, t: usize, d: usize, u_o: usize) -> &DMatrix<f64> {
        let branch = if d_transition(d, u_o, self.d_max) == 0 { BRANCH_EXACT } else { BRANCH_INATTENTIVE };
        &self.mean_update[t][d.min(self.d_max)][branch]
    }
}

const PSD_FAIL_TOL: f64 = 1e-8;
const PINV_TOL: f64 = 1e-12;

/// Fills the (t, d)-indexed covariance tables by iterating predict /
/// gain / update along glance-duration chains. The initial primary state
/// is deterministic, so row t = 0 is identically zero.
pub fn tabulate_covariances(problem: &AttentionProblem) -> Result<CovarianceSchedule, BeliefError> {
    let n_x = problem.n_x();
    let t_len = problem.horizon;
    let d_max = problem.d_max;
    let zero = DMatrix::zeros(n_x, n_x);

    let mut post = vec![vec![zero.clone(); d_max + 1]; t_len + 1];
    let mut pred = vec![vec![zero.clone(); d_max + 1]; t_len];
    let mut gain = vec![vec![DMatrix::zeros(n_x, problem.n_obs()); d_max + 1]; t_len];
    let mut mean_update = vec![vec![[zero.clone(), zero.clone()]; d_max + 1]; t_len];

    let h = &problem.obs_h;
    for t in 0..t_len {
        let a = &problem.dyn_a[t];
        for d in 0..=d_max {
            // predict: Sigma_hat = A Sigma A' + Q
            let p_hat = symmetrize(&(a * &post[t][d] * a.transpose() + &problem.process_noise));
            check_psd(&p_hat, t + 1, d)?;

            // Inattentive branch: Kalman update through H. The
            // innovation covariance can be singular (exact channels with
            // zero observation noise), hence the pseudo-inverse.
            let innov = h * &p_hat * h.transpose() + &problem.obs_noise;
            let k = &p_hat * h.transpose() * pinv_psd(&innov, PINV_TOL);
            let sigma_mu_in = symmetrize(&(&k * h * &p_hat));
            let posterior = symmetrize(&(&p_hat - &sigma_mu_in));
            check_psd(&posterior, t + 1, d + 1)?;

            // The d_max entry is defined along the exact-duration chain
            // (written from d_max - 1); saturated glances reuse it.
            if d < d_max {
                post[t + 1][d + 1] = posterior;
            }
            pred[t][d] = p_hat.clone();
            gain[t][d] = k;
            mean_update[t][d][BRANCH_INATTENTIVE] = sigma_mu_in;
            // Exact branch: the belief mean jumps to the true state,
            // which is spread by the full prediction covariance.
            mean_update[t][d][BRANCH_EXACT] = p_hat;
        }
    }

    Ok(CovarianceSchedule { post, pred, gain, mean_update, d_max })
}

fn check_psd(m: &DMatrix<f64>, t: usize, d: usize) -> Result<(), BeliefError> {
    let min_eig = crate::util::min_eigenvalue(m);
    if min_eig < -PSD_FAIL_TOL {
        return Err(BeliefError::NotPsd { t, d, min_eig });
    }
    Ok(())
}

/// One filter step: predict the belief mean with the applied control,
/// correct with the observation for the realized attention branch,
/// advance the glance duration, and advance the secondary state (the
/// rng is used only when the sub-MDP row is stochastic).
#[allow(clippy::too_many_arguments)]
pub fn filter_step<R: Rng + ?Sized>(
    problem: &AttentionProblem,
    schedule: &CovarianceSchedule,
    t: usize,
    state: &HybridState,
    u_p: &DVector<f64>,
    u_o: usize,
    u_s: usize,
    observation: &DVector<f64>,
    rng: &mut R,
) -> Result<HybridState, BeliefError> {
    if u_p.len() != problem.n_u() {
        return Err(BeliefError::Dimension(format!("u_p has length {}, expected {}", u_p.len(), problem.n_u())));
    }
    let d_next = d_transition(state.d, u_o, problem.d_max);
    let mean_pred = &problem.dyn_a[t] * &state.mu + &problem.dyn_b[t] * u_p + &problem.dyn_affine[t];

    let mu_next = if d_next == 0 {
        if observation.len() != problem.n_x() {
            return Err(BeliefError::Dimension(format!(
                "exact observation has length {}, expected {}",
                observation.len(),
                problem.n_x()
            )));
        }
        observation.clone()
    } else {
        if observation.len() != problem.n_obs() {
            return Err(BeliefError::Dimension(format!(
                "partial observation has length {}, expected {}",
                observation.len(),
                problem.n_obs()
            )));
        }
        let innovation = observation - &problem.obs_h * &mean_pred;
        &mean_pred + &schedule.gain[t][state.d.min(schedule.d_max)] * innovation
    };

    let x_s_next = sample_secondary(problem, state.x_o(), u_o, state.x_s, u_s, rng);
    Ok(HybridState::new(mu_next, d_next, x_s_next))
}

/// Draws the next secondary state; deterministic rows bypass the rng.
pub fn sample_secondary<R: Rng + ?Sized>(
    problem: &AttentionProblem,
    x_o: usize,
    u_o: usize,
    x_s: usize,
    u_s: usize,
    rng: &mut R,
) -> usize {
    let row = problem.sub_mdp.row(x_o, u_o, x_s, u_s);
    if let Some(i) = row.iter().position(|&p| p >= 1.0 - 1e-12) {
        return i;
    }
    let draw: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in row.iter().enumerate() {
        acc += p;
        if draw < acc {
            return i;
        }
    }
    row.len() - 1
}

/// mu' Theta1 mu + tr(Theta1 Sigma): the reward quadratic taken in
/// expectation under a Gaussian belief.
pub fn expected_belief_reward(theta1: &DMatrix<f64>, mu: &DVector<f64>, sigma: &DMatrix<f64>) -> f64 {
    (mu.transpose() * theta1 * mu)[(0, 0)] + (theta1 * sigma).trace()
}
