//! Direct policy estimation baseline: L1-regularized regression of the
//! continuous control on the belief mean, and L1-regularized logistic
//! regression of the switch control on [d, x_s, 1 - x_s], both with
//! k-fold cross-validated regularization weights. Time-invariant
//! parameters throughout.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::belief::HybridState;
use crate::policy::{Controls, PolicyLike};
use crate::simulator::Dataset;

#[derive(Debug, Error)]
pub enum DpeError {
    #[error("empty dataset")]
    EmptyData,
    #[error("need at least 2 folds, got {0}")]
    BadFolds(usize),
}

/// Per-lambda, per-fold deviances plus the chosen weight.
#[derive(Debug, Clone, Default)]
pub struct CvCurve {
    pub lambdas: Vec<f64>,
    pub fold_deviance: Vec<Vec<f64>>,
    pub chosen: f64,
}

#[derive(Debug, Clone, Default)]
pub struct CvTrace {
    /// One curve per continuous control dimension.
    pub linear: Vec<CvCurve>,
    pub logistic: CvCurve,
}

/// Fitted DPE policy.
#[derive(Debug, Clone)]
pub struct DpePolicy {
    /// Continuous gain Lambda1 (n_u x n_x).
    pub gain: DMatrix<f64>,
    /// Continuous offset lambda2.
    pub offset: DVector<f64>,
    /// Residual covariance of the continuous fit (floored to stay PD).
    pub sigma: DMatrix<f64>,
    /// [lambda3 (on d), lambda4 (on x_s), lambda5 (on 1 - x_s)].
    pub switch_coefs: [f64; 3],
    pub cv_trace: CvTrace,
    /// Set when the switch targets were degenerate and the coefficients
    /// ran to the boundary.
    pub saturated: bool,
    n_us: usize,
    sigma_sqrt: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct DpeOptions {
    pub folds: usize,
    pub seed: u64,
    /// Overrides the automatic grid for both model parts when set.
    pub lambda_grid: Option<Vec<f64>>,
}

impl Default for DpeOptions {
    fn default() -> Self {
        Self { folds: 5, seed: 0, lambda_grid: None }
    }
}

const GRID_POINTS: usize = 20;
const GRID_DECADES: f64 = 8.0;
const COEF_CAP: f64 = 50.0;

/// 20 log-spaced weights spanning eight decades below lambda_max.
fn auto_grid(lambda_max: f64) -> Vec<f64> {
    let lmax = if lambda_max > 1e-12 { lambda_max } else { 1e-3 };
    let lmin = lmax * 10f64.powf(-GRID_DECADES);
    let ratio = (lmin / lmax).powf(1.0 / (GRID_POINTS - 1) as f64);
    (0..GRID_POINTS).map(|i| lmax * ratio.powi(i as i32)).collect()
}

fn soft_threshold(x: f64, l: f64) -> f64 {
    if x > l {
        x - l
    } else if x < -l {
        x + l
    } else {
        0.0
    }
}

/// Lasso by coordinate descent on standardized columns. Returns
/// standardized coefficients.
fn lasso_cd(xs: &[Vec<f64>], yc: &[f64], lambda: f64, init: &[f64]) -> Vec<f64> {
    let n = yc.len();
    let k = xs.len();
    let mut beta = init.to_vec();
    let mut resid: Vec<f64> = yc.to_vec();
    for (j, col) in xs.iter().enumerate() {
        if beta[j] != 0.0 {
            for i in 0..n {
                resid[i] -= col[i] * beta[j];
            }
        }
    }
    let col_ms: Vec<f64> = xs.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>() / n as f64).collect();
    for _ in 0..1000 {
        let mut max_delta = 0.0_f64;
        for j in 0..k {
            if col_ms[j] <= 0.0 {
                continue;
            }
            let col = &xs[j];
            let rho: f64 = col.iter().zip(resid.iter()).map(|(x, r)| x * r).sum::<f64>() / n as f64
                + col_ms[j] * beta[j];
            let new = soft_threshold(rho, lambda) / col_ms[j];
            let delta = new - beta[j];
            if delta != 0.0 {
                for i in 0..n {
                    resid[i] -= col[i] * delta;
                }
                beta[j] = new;
                max_delta = max_delta.max(delta.abs());
            }
        }
        if max_delta < 1e-12 {
            break;
        }
    }
    beta
}

/// Weighted lasso step used inside the IRLS loop.
fn lasso_cd_weighted(xs: &[Vec<f64>], z: &[f64], w: &[f64], lambda: f64, init: &[f64]) -> Vec<f64> {
    let n = z.len();
    let k = xs.len();
    let mut beta = init.to_vec();
    let mut eta: Vec<f64> = vec![0.0; n];
    for (j, col) in xs.iter().enumerate() {
        if beta[j] != 0.0 {
            for i in 0..n {
                eta[i] += col[i] * beta[j];
            }
        }
    }
    let wsums: Vec<f64> = xs
        .iter()
        .map(|c| c.iter().zip(w).map(|(x, wi)| wi * x * x).sum::<f64>() / n as f64)
        .collect();
    for _ in 0..200 {
        let mut max_delta = 0.0_f64;
        for j in 0..k {
            if wsums[j] <= 0.0 {
                continue;
            }
            let col = &xs[j];
            let rho: f64 = col
                .iter()
                .zip(z.iter().zip(eta.iter().zip(w)))
                .map(|(x, (zi, (ei, wi)))| wi * x * (zi - ei + x * beta[j]))
                .sum::<f64>()
                / n as f64;
            let mut new = soft_threshold(rho, lambda) / wsums[j];
            new = new.clamp(-COEF_CAP, COEF_CAP);
            let delta = new - beta[j];
            if delta != 0.0 {
                for i in 0..n {
                    eta[i] += col[i] * delta;
                }
                beta[j] = new;
                max_delta = max_delta.max(delta.abs());
            }
        }
        if max_delta < 1e-10 {
            break;
        }
    }
    beta
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x.clamp(-35.0, 35.0)).exp())
}

/// L1-penalized logistic regression without intercept (the covariates
/// span constants) via IRLS with inner coordinate descent. Returns
/// coefficients in the standardized space.
fn logistic_lasso(xs: &[Vec<f64>], y: &[f64], lambda: f64) -> Vec<f64> {
    let n = y.len();
    let k = xs.len();
    let mut beta = vec![0.0; k];
    for _ in 0..100 {
        let mut eta = vec![0.0; n];
        for (j, col) in xs.iter().enumerate() {
            if beta[j] != 0.0 {
                for i in 0..n {
                    eta[i] += col[i] * beta[j];
                }
            }
        }
        let mut w = vec![0.0; n];
        let mut z = vec![0.0; n];
        for i in 0..n {
            let p = sigmoid(eta[i]);
            let wi = (p * (1.0 - p)).max(1e-5);
            w[i] = wi;
            z[i] = eta[i] + (y[i] - p) / wi;
        }
        let new = lasso_cd_weighted(xs, &z, &w, lambda, &beta);
        let delta = new
            .iter()
            .zip(&beta)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0_f64, f64::max);
        beta = new;
        if delta < 1e-9 {
            break;
        }
    }
    beta
}

fn logistic_deviance(xs: &[Vec<f64>], y: &[f64], beta: &[f64], rows: &[usize]) -> f64 {
    let mut dev = 0.0;
    for &i in rows {
        let eta: f64 = xs.iter().zip(beta).map(|(c, b)| c[i] * b).sum();
        let p = sigmoid(eta).clamp(1e-12, 1.0 - 1e-12);
        dev -= 2.0 * (y[i] * p.ln() + (1.0 - y[i]) * (1.0 - p).ln());
    }
    dev
}

struct Standardized {
    cols: Vec<Vec<f64>>,
    means: Vec<f64>,
    scales: Vec<f64>,
}

/// Center-and-scale standardization (for the linear part).
fn standardize(cols: &[Vec<f64>]) -> Standardized {
    let n = cols[0].len() as f64;
    let mut out = Standardized { cols: Vec::new(), means: Vec::new(), scales: Vec::new() };
    for c in cols {
        let m = c.iter().sum::<f64>() / n;
        let var = c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        let s = var.sqrt();
        let scale = if s > 1e-12 { s } else { 1.0 };
        out.cols.push(c.iter().map(|v| (v - m) / scale).collect());
        out.means.push(m);
        out.scales.push(if s > 1e-12 { s } else { 0.0 });
    }
    out
}

/// Scale-only normalization (for the no-intercept logistic part;
/// centering would change the model class).
fn scale_only(cols: &[Vec<f64>]) -> Standardized {
    let n = cols[0].len() as f64;
    let mut out = Standardized { cols: Vec::new(), means: Vec::new(), scales: Vec::new() };
    for c in cols {
        let rms = (c.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
        let scale = if rms > 1e-12 { rms } else { 1.0 };
        out.cols.push(c.iter().map(|v| v / scale).collect());
        out.means.push(0.0);
        out.scales.push(if rms > 1e-12 { rms } else { 0.0 });
    }
    out
}

fn subset(cols: &[Vec<f64>], rows: &[usize]) -> Vec<Vec<f64>> {
    cols.iter().map(|c| rows.iter().map(|&i| c[i]).collect()).collect()
}

/// Fits the DPE policy on a dataset of logged (mu, u_p) and
/// (d, x_s, u_o) pairs.
pub fn fit_dpe(data: &Dataset, opts: &DpeOptions) -> Result<DpePolicy, DpeError> {
    if data.is_empty() {
        return Err(DpeError::EmptyData);
    }
    if opts.folds < 2 {
        return Err(DpeError::BadFolds(opts.folds));
    }

    let n_x = data.trajectories[0].steps[0].mu.len();
    let n_u = data.trajectories[0].steps[0].u_p.len();
    let mut mu_cols: Vec<Vec<f64>> = vec![Vec::new(); n_x];
    let mut up_cols: Vec<Vec<f64>> = vec![Vec::new(); n_u];
    let mut sw_cols: Vec<Vec<f64>> = vec![Vec::new(); 3];
    let mut uo_col: Vec<f64> = Vec::new();
    let mut n_us = 1usize;
    for traj in &data.trajectories {
        for s in &traj.steps {
            for j in 0..n_x {
                mu_cols[j].push(s.mu[j]);
            }
            for j in 0..n_u {
                up_cols[j].push(s.u_p[j]);
            }
            sw_cols[0].push(s.d as f64);
            sw_cols[1].push(s.x_s as f64);
            sw_cols[2].push(1.0 - s.x_s as f64);
            uo_col.push(s.u_o as f64);
            n_us = n_us.max(s.u_s + 1);
        }
    }
    let n_rows = uo_col.len();

    // Deterministic fold assignment: seeded shuffle, contiguous chunks.
    let mut order: Vec<usize> = (0..n_rows).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    order.shuffle(&mut rng);
    let fold_of: Vec<usize> = {
        let mut f = vec![0usize; n_rows];
        for (pos, &row) in order.iter().enumerate() {
            f[row] = pos * opts.folds / n_rows.max(1);
        }
        f
    };
    let folds: Vec<Vec<usize>> =
        (0..opts.folds).map(|k| (0..n_rows).filter(|&i| fold_of[i] == k.min(opts.folds - 1)).collect()).collect();
    let train_rows: Vec<Vec<usize>> =
        (0..opts.folds).map(|k| (0..n_rows).filter(|&i| fold_of[i] != k).collect()).collect();

    // ---- continuous part: per-dimension lasso of u_p on mu ----
    let std_mu = standardize(&mu_cols);
    let mut gain = DMatrix::zeros(n_u, n_x);
    let mut offset = DVector::zeros(n_u);
    let mut linear_curves = Vec::with_capacity(n_u);
    for dim in 0..n_u {
        let y = &up_cols[dim];
        let ybar = y.iter().sum::<f64>() / n_rows as f64;
        let yc: Vec<f64> = y.iter().map(|v| v - ybar).collect();
        let lambda_max = std_mu
            .cols
            .iter()
            .map(|c| (c.iter().zip(&yc).map(|(x, r)| x * r).sum::<f64>() / n_rows as f64).abs())
            .fold(0.0_f64, f64::max);
        let grid = opts.lambda_grid.clone().unwrap_or_else(|| auto_grid(lambda_max));

        let mut fold_dev = vec![vec![0.0; opts.folds]; grid.len()];
        for k in 0..opts.folds {
            let tr = &train_rows[k];
            let va = &folds[k];
            let xs_tr = subset(&std_mu.cols, tr);
            let yc_tr: Vec<f64> = tr.iter().map(|&i| yc[i]).collect();
            let mut warm = vec![0.0; n_x];
            for (gi, &lambda) in grid.iter().enumerate() {
                warm = lasso_cd(&xs_tr, &yc_tr, lambda, &warm);
                let dev: f64 = va
                    .iter()
                    .map(|&i| {
                        let pred: f64 = std_mu.cols.iter().zip(&warm).map(|(c, b)| c[i] * b).sum();
                        let r = yc[i] - pred;
                        r * r
                    })
                    .sum();
                fold_dev[gi][k] = dev;
            }
        }
        let chosen_idx = (0..grid.len())
            .min_by(|&a, &b| {
                let da: f64 = fold_dev[a].iter().sum();
                let db: f64 = fold_dev[b].iter().sum();
                da.partial_cmp(&db).unwrap()
            })
            .unwrap();
        let chosen = grid[chosen_idx];
        let beta = lasso_cd(&std_mu.cols, &yc, chosen, &vec![0.0; n_x]);

        let mut icpt = ybar;
        for j in 0..n_x {
            let b = if std_mu.scales[j] > 0.0 { beta[j] / std_mu.scales[j] } else { 0.0 };
            gain[(dim, j)] = b;
            icpt -= b * std_mu.means[j];
        }
        offset[dim] = icpt;
        linear_curves.push(CvCurve { lambdas: grid, fold_deviance: fold_dev, chosen });
    }

    // residual covariance of the chosen model
    let mut sigma = DMatrix::zeros(n_u, n_u);
    {
        let mut resid = vec![DVector::zeros(n_u); n_rows];
        for i in 0..n_rows {
            for dim in 0..n_u {
                let pred: f64 = (0..n_x).map(|j| gain[(dim, j)] * mu_cols[j][i]).sum::<f64>() + offset[dim];
                resid[i][dim] = up_cols[dim][i] - pred;
            }
        }
        for r in &resid {
            sigma += r * r.transpose();
        }
        sigma /= n_rows as f64;
        for i in 0..n_u {
            sigma[(i, i)] += 1e-12;
        }
    }

    // ---- switching part: logistic lasso of u_o on [d, x_s, 1 - x_s] ----
    let saturated = uo_col.iter().all(|&v| v == uo_col[0]);
    let std_sw = scale_only(&sw_cols);
    let ybar = uo_col.iter().sum::<f64>() / n_rows as f64;
    let lambda_max = std_sw
        .cols
        .iter()
        .map(|c| (c.iter().zip(&uo_col).map(|(x, y)| x * (y - ybar)).sum::<f64>() / n_rows as f64).abs())
        .fold(0.0_f64, f64::max);
    let grid = opts.lambda_grid.clone().unwrap_or_else(|| auto_grid(lambda_max));
    let mut fold_dev = vec![vec![0.0; opts.folds]; grid.len()];
    for k in 0..opts.folds {
        let tr = &train_rows[k];
        let va = &folds[k];
        let xs_tr = subset(&std_sw.cols, tr);
        let y_tr: Vec<f64> = tr.iter().map(|&i| uo_col[i]).collect();
        for (gi, &lambda) in grid.iter().enumerate() {
            let beta = logistic_lasso(&xs_tr, &y_tr, lambda);
            fold_dev[gi][k] = logistic_deviance(&std_sw.cols, &uo_col, &beta, va);
        }
    }
    let chosen_idx = (0..grid.len())
        .min_by(|&a, &b| {
            let da: f64 = fold_dev[a].iter().sum();
            let db: f64 = fold_dev[b].iter().sum();
            da.partial_cmp(&db).unwrap()
        })
        .unwrap();
    let chosen = grid[chosen_idx];
    let beta = logistic_lasso(&std_sw.cols, &uo_col, chosen);
    let mut switch_coefs = [0.0; 3];
    for j in 0..3 {
        switch_coefs[j] = if std_sw.scales[j] > 0.0 { beta[j] / std_sw.scales[j] } else { 0.0 };
    }
    let saturated = saturated || beta.iter().any(|b| b.abs() >= COEF_CAP - 1e-9);

    let sigma_sqrt = crate::util::psd_sqrt(&sigma);
    Ok(DpePolicy {
        gain,
        offset,
        sigma,
        switch_coefs,
        cv_trace: CvTrace { linear: linear_curves, logistic: CvCurve { lambdas: grid, fold_deviance: fold_dev, chosen } },
        saturated,
        n_us,
        sigma_sqrt,
    })
}

impl DpePolicy {
    pub fn control_mean(&self, mu: &DVector<f64>) -> DVector<f64> {
        &self.gain * mu + &self.offset
    }

    /// P(u_o = 1 | d, x_s) under the logistic parametrization.
    pub fn switch_prob(&self, d: usize, x_s: usize) -> f64 {
        let eta = self.switch_coefs[0] * d as f64
            + self.switch_coefs[1] * x_s as f64
            + self.switch_coefs[2] * (1.0 - x_s as f64);
        sigmoid(eta)
    }
}

/// The factored action distribution at a hybrid state.
#[derive(Debug, Clone)]
pub struct DpeActionDist {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub switch_prob: f64,
}

pub fn dpe_action_dist(policy: &DpePolicy, mu: &DVector<f64>, d: usize, x_s: usize) -> DpeActionDist {
    DpeActionDist { mean: policy.control_mean(mu), cov: policy.sigma.clone(), switch_prob: policy.switch_prob(d, x_s) }
}

impl PolicyLike for DpePolicy {
    fn sample(&self, _t: usize, state: &HybridState, rng: &mut dyn rand::RngCore) -> Controls {
        let n = self.offset.len();
        let z = DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(rng)));
        let u_p = self.control_mean(&state.mu) + &self.sigma_sqrt * z;
        let draw: f64 = rand::Rng::random(rng);
        let u_o = usize::from(draw < self.switch_prob(state.d, state.x_s));
        let u_s = if self.n_us > 1 {
            rand::Rng::random_range(rng, 0..self.n_us)
        } else {
            0
        };
        Controls { u_p, u_o, u_s }
    }
}
