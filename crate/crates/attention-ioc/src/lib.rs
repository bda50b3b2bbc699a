//! Exact maximum-causal-entropy inverse optimal control for hybrid
//! attention-switching control problems.
//!
//! The problem class couples three pieces:
//!
//! * a continuous LQG-style primary task (time-varying linear-affine
//!   dynamics, negative quadratic reward),
//! * a binary attention state deciding whether the primary state is
//!   observed exactly or through a noisy linear channel, switched at a
//!   cost, and
//! * a discrete secondary-task MDP whose transitions may depend on where
//!   attention currently is.
//!
//! Because the primary state is re-observed exactly whenever attention
//! returns to it, the belief covariance is a function of the number of
//! steps `d` since the last exact observation. That makes the belief MDP
//! finite in its discrete part and lets both the soft (maximum-entropy)
//! Bellman recursion and the reward-gradient recursion be carried out in
//! closed form: the policy factors into a Gaussian over the continuous
//! control and a softmax over the discrete controls.
//!
//! Modules:
//!
//! * [`model`] — problem definition, reward features, the lane-keeping
//!   driver instance.
//! * [`belief`] — Kalman covariance schedules indexed by `(t, d)` and the
//!   online filter.
//! * [`policy`] — the exact soft policy (Gaussian x softmax) computed by
//!   backward recursion.
//! * [`gradients`] — exact reward-gradient tables for the policy.
//! * [`simulator`] — seeded trajectory rollouts and dataset I/O.
//! * [`estimators`] — MCE / MCL objectives, the quasi-Newton fit loop,
//!   and the direct-policy-estimation (DPE) baseline.
//! * [`metrics`] — KL divergences, reward deviation, lateral error.
//! * [`experiment`] — the simulated-driver evaluation pipeline and its
//!   file outputs.

pub mod belief;
pub mod config;
pub mod dpe;
pub mod estimators;
pub mod experiment;
pub mod gradients;
pub mod metrics;
pub mod model;
pub mod policy;
pub mod simulator;
pub mod util;

pub use belief::{d_transition, expected_belief_reward, tabulate_covariances, CovarianceSchedule, HybridState};
pub use estimators::{estimate_reward, EstimationMethod, EstimationOptions, EstimationResult};
pub use gradients::{solve_gradients, GradientTables};
pub use model::{build_driver_problem, AttentionProblem, DriverConfig, FeatureSpec, RewardParams, SecondaryMdp};
pub use policy::{solve_soft_policy, Controls, PolicyLike, SoftPolicy};
pub use simulator::{simulate_batch, simulate_trajectory, Dataset, Trajectory};
