//! Hybrid problem definition: continuous linear-affine primary task,
//! attention-switched observation, discrete secondary task, and the
//! quadratic/linear reward features tying them together. Also houses the
//! concrete lane-keeping driver instance.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::util::{blk_diag, min_eigenvalue, vec_of};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid driver config: {0}")]
    InvalidConfig(String),
}

/// Discrete secondary-task MDP.
///
/// Transition rows are conditioned on the current attention bit `x_o`
/// and on the switch control `u_o`. Conditioning on the pair subsumes
/// both attention-dependent process models and secondary states that
/// track the post-switch attention (the driver instance needs the
/// latter: its secondary state is 1 exactly when the next glance
/// duration is positive).
#[derive(Debug, Clone)]
pub struct SecondaryMdp {
    pub n_states: usize,
    pub n_controls: usize,
    /// `transition[x_o][u_o][x_s][u_s]` is a probability row over the
    /// next secondary state.
    pub transition: Vec<Vec<Vec<Vec<Vec<f64>>>>>,
    /// `features[x_s][u_s]` is the k_s-dimensional secondary feature.
    pub features: Vec<Vec<DVector<f64>>>,
    pub k_s: usize,
}

impl SecondaryMdp {
    /// Single-state, single-control secondary task with zero features.
    pub fn trivial() -> Self {
        Self {
            n_states: 1,
            n_controls: 1,
            transition: vec![vec![vec![vec![vec![1.0]]]; 2]; 2],
            features: vec![vec![DVector::zeros(1)]],
            k_s: 1,
        }
    }

    /// Transition row for (current attention bit, switch control,
    /// secondary state, secondary control).
    pub fn row(&self, x_o: usize, u_o: usize, x_s: usize, u_s: usize) -> &[f64] {
        &self.transition[x_o][u_o][x_s][u_s]
    }

    pub fn feature(&self, x_s: usize, u_s: usize) -> &DVector<f64> {
        &self.features[x_s][u_s]
    }
}

/// Linear map from the continuous parameters `theta_p` to the quadratic
/// reward blocks: `vec(blk(Theta1, Theta2)) = selector * theta_p`.
#[derive(Debug, Clone)]
pub struct FeatureSpec {
    /// (n_x+n_u)^2 x k_p; every column must be the vectorization of a
    /// symmetric block-diagonal matrix.
    pub selector: DMatrix<f64>,
    pub k_p: usize,
    pub k_s: usize,
    pub n_x: usize,
    pub n_u: usize,
}

impl FeatureSpec {
    pub fn new(selector: DMatrix<f64>, k_s: usize, n_x: usize, n_u: usize) -> Self {
        let k_p = selector.ncols();
        assert_eq!(selector.nrows(), (n_x + n_u) * (n_x + n_u));
        Self { selector, k_p, k_s, n_x, n_u }
    }

    fn block(&self, theta_p: &DVector<f64>) -> DMatrix<f64> {
        let n = self.n_x + self.n_u;
        crate::util::unvec(&(&self.selector * theta_p), n, n)
    }

    /// State-quadratic block Theta1(theta_p).
    pub fn theta1(&self, theta_p: &DVector<f64>) -> DMatrix<f64> {
        self.block(theta_p).view((0, 0), (self.n_x, self.n_x)).into()
    }

    /// Control-quadratic block Theta2(theta_p).
    pub fn theta2(&self, theta_p: &DVector<f64>) -> DMatrix<f64> {
        let n = self.n_x;
        self.block(theta_p).view((n, n), (self.n_u, self.n_u)).into()
    }

    /// Continuous features phi_p(x, u) with theta_p . phi_p = x'Theta1 x + u'Theta2 u.
    pub fn phi_p(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let z = blk_diag(&(x * x.transpose()), &(u * u.transpose()));
        self.selector.transpose() * vec_of(&z)
    }
}

/// Reward parameter vector partitioned as [theta_p; theta_s; theta_o].
#[derive(Debug, Clone, PartialEq)]
pub struct RewardParams {
    pub theta_p: DVector<f64>,
    pub theta_s: DVector<f64>,
    pub theta_o: f64,
}

impl RewardParams {
    pub fn new(theta_p: DVector<f64>, theta_s: DVector<f64>, theta_o: f64) -> Self {
        Self { theta_p, theta_s, theta_o }
    }

    pub fn from_vector(v: &DVector<f64>, k_p: usize, k_s: usize) -> Self {
        assert_eq!(v.len(), k_p + k_s + 1);
        Self {
            theta_p: v.rows(0, k_p).into(),
            theta_s: v.rows(k_p, k_s).into(),
            theta_o: v[k_p + k_s],
        }
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.dim());
        v.rows_mut(0, self.theta_p.len()).copy_from(&self.theta_p);
        v.rows_mut(self.theta_p.len(), self.theta_s.len()).copy_from(&self.theta_s);
        v[self.dim() - 1] = self.theta_o;
        v
    }

    pub fn dim(&self) -> usize {
        self.theta_p.len() + self.theta_s.len() + 1
    }

    /// Soft checks on the parameter signs. A non-negative switching cost
    /// is unusual but permitted (the estimation barrier only constrains
    /// theta_p), so it is reported as a warning rather than an error.
    pub fn sign_warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.theta_o >= 0.0 {
            w.push(format!("theta_o = {} is non-negative; the model defines a switching cost (theta_o < 0)", self.theta_o));
        }
        w
    }
}

/// Initial condition of the hybrid system.
#[derive(Debug, Clone)]
pub struct InitialState {
    /// Deterministic initial primary state (belief starts exact).
    pub x_p: DVector<f64>,
    pub d: usize,
    pub x_s: usize,
}

/// Full specification of an attention-switched hybrid control problem.
///
/// Rewards are granted at t = 0..=horizon; the per-step matrices cover
/// transitions t -> t+1 for t = 0..horizon.
#[derive(Debug, Clone)]
pub struct AttentionProblem {
    pub horizon: usize,
    pub dt: f64,
    pub dyn_a: Vec<DMatrix<f64>>,
    pub dyn_b: Vec<DMatrix<f64>>,
    pub dyn_affine: Vec<DVector<f64>>,
    pub process_noise: DMatrix<f64>,
    pub obs_h: DMatrix<f64>,
    pub obs_noise: DMatrix<f64>,
    pub sub_mdp: SecondaryMdp,
    pub features: FeatureSpec,
    pub d_max: usize,
    pub init: InitialState,
}

impl AttentionProblem {
    pub fn n_x(&self) -> usize {
        self.process_noise.nrows()
    }

    pub fn n_u(&self) -> usize {
        if self.dyn_b.is_empty() {
            self.features.n_u
        } else {
            self.dyn_b[0].ncols()
        }
    }

    pub fn n_obs(&self) -> usize {
        self.obs_h.nrows()
    }

    /// Number of reward parameters (k_p + k_s + 1).
    pub fn theta_dim(&self) -> usize {
        self.features.k_p + self.features.k_s + 1
    }
}

/// Concatenated feature vector [phi_p; phi_s; phi_o] evaluated on a true
/// state/control tuple; the reward is theta . features.
pub fn eval_features(
    problem: &AttentionProblem,
    x_p: &DVector<f64>,
    u_p: &DVector<f64>,
    x_s: usize,
    u_s: usize,
    u_o: usize,
) -> Result<DVector<f64>, ModelError> {
    if x_p.len() != problem.n_x() || u_p.len() != problem.n_u() {
        return Err(ModelError::Dimension(format!(
            "eval_features expects x_p of {} and u_p of {}, got {} and {}",
            problem.n_x(),
            problem.n_u(),
            x_p.len(),
            u_p.len()
        )));
    }
    let fs = &problem.features;
    let phi_p = fs.phi_p(x_p, u_p);
    let phi_s = problem.sub_mdp.feature(x_s, u_s);
    let mut out = DVector::zeros(fs.k_p + fs.k_s + 1);
    out.rows_mut(0, fs.k_p).copy_from(&phi_p);
    out.rows_mut(fs.k_p, fs.k_s).copy_from(phi_s);
    out[fs.k_p + fs.k_s] = u_o as f64;
    Ok(out)
}

/// Structural validation report; empty means valid.
#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

const PSD_TOL: f64 = 1e-10;
const ROW_SUM_TOL: f64 = 1e-12;

/// Checks dimensions, PSD-ness of the noise covariances, and sub-MDP row
/// stochasticity. Returns the list of violations instead of erroring.
pub fn validate_problem(problem: &AttentionProblem) -> ValidationReport {
    let mut v = Vec::new();
    let n_x = problem.n_x();
    let n_u = problem.n_u();
    let t_len = problem.horizon;

    if problem.dt <= 0.0 {
        v.push(format!("dt must be positive, got {}", problem.dt));
    }
    if problem.d_max < 1 {
        v.push("d_max must be >= 1".to_string());
    }
    if problem.dyn_a.len() != t_len || problem.dyn_b.len() != t_len || problem.dyn_affine.len() != t_len {
        v.push(format!(
            "per-step matrices must cover t = 0..{} (got lengths {}, {}, {})",
            t_len,
            problem.dyn_a.len(),
            problem.dyn_b.len(),
            problem.dyn_affine.len()
        ));
    }
    for (t, a) in problem.dyn_a.iter().enumerate() {
        if a.nrows() != n_x || a.ncols() != n_x {
            v.push(format!("dyn_A[{}] is {}x{}, expected {}x{}", t, a.nrows(), a.ncols(), n_x, n_x));
        }
    }
    for (t, b) in problem.dyn_b.iter().enumerate() {
        if b.nrows() != n_x || b.ncols() != n_u {
            v.push(format!("dyn_B[{}] is {}x{}, expected {}x{}", t, b.nrows(), b.ncols(), n_x, n_u));
        }
    }
    for (t, a) in problem.dyn_affine.iter().enumerate() {
        if a.len() != n_x {
            v.push(format!("dyn_a[{}] has length {}, expected {}", t, a.len(), n_x));
        }
    }

    let sym_err = (&problem.process_noise - problem.process_noise.transpose()).abs().max();
    if sym_err > 1e-12 {
        v.push(format!("process_noise not symmetric (max asymmetry {:.2e})", sym_err));
    }
    if min_eigenvalue(&problem.process_noise) < -PSD_TOL {
        v.push("process_noise not PSD".to_string());
    }
    if problem.obs_h.ncols() != n_x {
        v.push(format!("obs_H has {} columns, expected {}", problem.obs_h.ncols(), n_x));
    }
    if problem.obs_noise.nrows() != problem.n_obs() || problem.obs_noise.ncols() != problem.n_obs() {
        v.push("obs_noise dimensions do not match obs_H".to_string());
    } else if min_eigenvalue(&problem.obs_noise) < -PSD_TOL {
        v.push("obs_noise not PSD".to_string());
    }

    let sm = &problem.sub_mdp;
    for x_o in 0..2 {
        for u_o in 0..2 {
            for x_s in 0..sm.n_states {
                for u_s in 0..sm.n_controls {
                    let row = sm.row(x_o, u_o, x_s, u_s);
                    if row.len() != sm.n_states {
                        v.push(format!("sub_mdp row ({x_o},{u_o},{x_s},{u_s}) has wrong length"));
                        continue;
                    }
                    let s: f64 = row.iter().sum();
                    if (s - 1.0).abs() > ROW_SUM_TOL {
                        v.push(format!(
                            "sub_mdp transition row ({x_o},{u_o},{x_s},{u_s}) not stochastic (sums to {s})"
                        ));
                    }
                    if row.iter().any(|&p| p < -ROW_SUM_TOL) {
                        v.push(format!("sub_mdp transition row ({x_o},{u_o},{x_s},{u_s}) has negative entries"));
                    }
                }
            }
        }
    }
    if sm.features.len() != sm.n_states || sm.features.iter().any(|f| f.len() != sm.n_controls) {
        v.push("sub_mdp feature table dimensions inconsistent".to_string());
    }

    if problem.features.n_x != n_x || problem.features.n_u != n_u {
        v.push("feature selector dimensions do not match the dynamics".to_string());
    }
    if problem.init.x_p.len() != n_x {
        v.push("init x_p dimension mismatch".to_string());
    }
    if problem.init.x_s >= sm.n_states {
        v.push("init x_s out of range".to_string());
    }
    if problem.init.d > problem.d_max {
        v.push("init d exceeds d_max".to_string());
    }

    ValidationReport { violations: v }
}

/// Per-step scalar value that may be constant or a series of length
/// `horizon`.
#[derive(Debug, Clone)]
pub enum PerStep {
    Constant(f64),
    Series(Vec<f64>),
}

impl PerStep {
    pub fn at(&self, t: usize) -> f64 {
        match self {
            PerStep::Constant(v) => *v,
            PerStep::Series(s) => s[t.min(s.len() - 1)],
        }
    }
}

/// Discretization of the continuous kinematic model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Discretization {
    /// Forward Euler on [y, phi, alpha] with the lateral velocity
    /// propagated through its algebraic relation.
    #[default]
    Euler,
    /// Exact zero-order hold (closed form; the continuous system matrix
    /// is nilpotent).
    Zoh,
}

/// Configuration for the lane-keeping driver instance.
#[derive(Debug, Clone)]
pub struct DriverConfig {
    /// Vehicle speed in m/s.
    pub speed: PerStep,
    /// Lane curvature in 1/m.
    pub curvature: PerStep,
    /// Steering-wheel transmission ratio (not reported in the source
    /// experiment; 1/16 is a typical passenger-car value).
    pub steering_ratio: f64,
    pub dt: f64,
    pub horizon: usize,
    /// Per-step process noise covariance on [y, dy, phi, alpha].
    ///
    /// The default puts noise only on the steering angle. Note that the
    /// steering angle is also the exactly-observed channel, so with the
    /// default the belief covariance stays identically zero; supply a
    /// covariance with lateral/heading disturbance (see
    /// `driver_process_noise`) to get nontrivial uncertainty growth
    /// during glances away.
    pub process_noise: DMatrix<f64>,
    pub d_max: usize,
    pub discretization: Discretization,
}

pub const DEFAULT_STEERING_RATIO: f64 = 1.0 / 16.0;
pub const DEFAULT_SIGMA_ALPHA: f64 = 0.005;

impl DriverConfig {
    pub fn new(speed: f64, curvature: f64, dt: f64, horizon: usize) -> Self {
        Self {
            speed: PerStep::Constant(speed),
            curvature: PerStep::Constant(curvature),
            steering_ratio: DEFAULT_STEERING_RATIO,
            dt,
            horizon,
            process_noise: DMatrix::from_diagonal(&DVector::from_vec(vec![
                0.0,
                0.0,
                0.0,
                DEFAULT_SIGMA_ALPHA * DEFAULT_SIGMA_ALPHA,
            ])),
            d_max: horizon,
            discretization: Discretization::Euler,
        }
    }
}

/// Kinematically consistent per-step process noise for the driver
/// state [y, dy, phi, alpha]: independent disturbances on y, phi and
/// alpha, with the dy component tied to the phi disturbance through
/// dy = v * phi (rank-deficient but PSD).
pub fn driver_process_noise(speed: f64, sigma_y: f64, sigma_phi: f64, sigma_alpha: f64) -> DMatrix<f64> {
    let v = speed;
    let sp2 = sigma_phi * sigma_phi;
    DMatrix::from_row_slice(
        4,
        4,
        &[
            sigma_y * sigma_y, 0.0,          0.0,      0.0,
            0.0,               v * v * sp2,  v * sp2,  0.0,
            0.0,               v * sp2,      sp2,      0.0,
            0.0,               0.0,          0.0,      sigma_alpha * sigma_alpha,
        ],
    )
}

/// Builds the 4-state lane-keeping problem: x_p = [y; dy; phi; alpha],
/// u_p = steering rate, exact observation of the full state while
/// attending the road and of alpha alone otherwise, and a secondary
/// state that is 1 exactly while glancing away.
pub fn build_driver_problem(cfg: &DriverConfig) -> Result<AttentionProblem, ModelError> {
    if cfg.dt <= 0.0 {
        return Err(ModelError::InvalidConfig(format!("dt must be positive, got {}", cfg.dt)));
    }
    if cfg.horizon == 0 {
        return Err(ModelError::InvalidConfig("horizon must be >= 1".into()));
    }
    if cfg.d_max < 1 {
        return Err(ModelError::InvalidConfig("d_max must be >= 1".into()));
    }
    for t in 0..cfg.horizon {
        if cfg.speed.at(t) <= 0.0 {
            return Err(ModelError::InvalidConfig(format!("speed must be positive (step {t})")));
        }
    }
    if cfg.process_noise.nrows() != 4 || cfg.process_noise.ncols() != 4 {
        return Err(ModelError::InvalidConfig("process_noise must be 4x4".into()));
    }

    let dt = cfg.dt;
    let c = cfg.steering_ratio;
    let t_len = cfg.horizon;

    let mut dyn_a = Vec::with_capacity(t_len);
    let mut dyn_b = Vec::with_capacity(t_len);
    let mut dyn_affine = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let v = cfg.speed.at(t);
        let v_next = cfg.speed.at(t + 1);
        let kappa = cfg.curvature.at(t);

        // 3-state kinematics on [y, phi, alpha]:
        //   y' = v phi, phi' = c v alpha - v kappa, alpha' = u
        let (a3, b3, f3) = match cfg.discretization {
            Discretization::Euler => {
                let a3 = DMatrix::from_row_slice(
                    3,
                    3,
                    &[1.0, dt * v, 0.0, 0.0, 1.0, dt * c * v, 0.0, 0.0, 1.0],
                );
                let b3 = DMatrix::from_row_slice(3, 1, &[0.0, 0.0, dt]);
                let f3 = DVector::from_vec(vec![0.0, -dt * v * kappa, 0.0]);
                (a3, b3, f3)
            }
            Discretization::Zoh => {
                // The continuous system matrix is nilpotent (cubes to
                // zero), so the exponential series is exact after the
                // quadratic term.
                let ac = DMatrix::from_row_slice(3, 3, &[0.0, v, 0.0, 0.0, 0.0, c * v, 0.0, 0.0, 0.0]);
                let bc = DMatrix::from_row_slice(3, 1, &[0.0, 0.0, 1.0]);
                let fc = DVector::from_vec(vec![0.0, -v * kappa, 0.0]);
                let eye = DMatrix::identity(3, 3);
                let ac2 = &ac * &ac;
                let a3 = &eye + &ac * dt + &ac2 * (dt * dt / 2.0);
                let integ = &eye * dt + &ac * (dt * dt / 2.0) + &ac2 * (dt * dt * dt / 6.0);
                let b3 = &integ * bc;
                let f3 = integ * fc;
                (a3, b3, f3)
            }
        };

        // Lift to the 4-state [y, dy, phi, alpha] with dy maintained as
        // dy_{t+1} = v * phi_{t+1} (keeps the system exactly linear-affine).
        let mut a = DMatrix::zeros(4, 4);
        let mut b = DMatrix::zeros(4, 1);
        let mut f = DVector::zeros(4);
        let rows4 = [0usize, 2, 3]; // y, phi, alpha rows in the 4-state layout
        let cols4 = [0usize, 2, 3];
        for (i3, &i4) in rows4.iter().enumerate() {
            for (j3, &j4) in cols4.iter().enumerate() {
                a[(i4, j4)] = a3[(i3, j3)];
            }
            b[(i4, 0)] = b3[(i3, 0)];
            f[i4] = f3[i3];
        }
        // dy row = v_next * (phi row)
        for (j3, &j4) in cols4.iter().enumerate() {
            a[(1, j4)] = v_next * a3[(1, j3)];
        }
        b[(1, 0)] = v_next * b3[(1, 0)];
        f[1] = v_next * f3[1];

        dyn_a.push(a);
        dyn_b.push(b);
        dyn_affine.push(f);
    }

    // Features [y^2, dy^2, alpha^2, u^2]: diag(Theta1) = [th1, th2, 0, th3],
    // Theta2 = [th4].
    let n = 5; // n_x + n_u
    let mut selector = DMatrix::zeros(n * n, 4);
    let diag_positions = [0usize, 1, 3, 4]; // y, dy, alpha, u on the blk diagonal
    for (k, &p) in diag_positions.iter().enumerate() {
        selector[(p * n + p, k)] = 1.0;
    }
    let features = FeatureSpec::new(selector, 1, 4, 1);

    // Secondary state tracks the post-switch attention: x_s' = 1 iff the
    // next glance duration is positive, i.e. iff the attention bit does
    // not flip to the road. Single dummy control.
    let mut transition = vec![vec![vec![vec![vec![0.0; 2]; 1]; 2]; 2]; 2];
    for x_o in 0..2 {
        for u_o in 0..2 {
            let next_on_road = (x_o + u_o) % 2 == 1;
            let xs_next = usize::from(!next_on_road);
            for x_s in 0..2 {
                transition[x_o][u_o][x_s][0][xs_next] = 1.0;
            }
        }
    }
    let sub_mdp = SecondaryMdp {
        n_states: 2,
        n_controls: 1,
        transition,
        features: vec![
            vec![DVector::from_vec(vec![0.0])],
            vec![DVector::from_vec(vec![1.0])],
        ],
        k_s: 1,
    };

    Ok(AttentionProblem {
        horizon: cfg.horizon,
        dt,
        dyn_a,
        dyn_b,
        dyn_affine,
        process_noise: cfg.process_noise.clone(),
        obs_h: DMatrix::from_row_slice(1, 4, &[0.0, 0.0, 0.0, 1.0]),
        obs_noise: DMatrix::zeros(1, 1),
        sub_mdp,
        features,
        d_max: cfg.d_max,
        init: InitialState { x_p: DVector::zeros(4), d: 0, x_s: 0 },
    })
}

/// The reward vector used by the simulated driver evaluation:
/// [y^2, dy^2, alpha^2, u^2, secondary, switch] weights.
pub fn driver_true_theta() -> RewardParams {
    RewardParams::new(
        DVector::from_vec(vec![-0.5, -8.0, -11.0, -200.0]),
        DVector::from_vec(vec![0.07]),
        -3.5,
    )
}
