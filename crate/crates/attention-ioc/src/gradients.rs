//! Exact reward-gradient recursion for the soft policy.
//!
//! The gradient of the soft Q-function with respect to the quadratic
//! reward blocks is itself quadratic in [mu; u_p] and transports
//! backward through Kronecker products of the closed-loop transition
//! map; all stochastic contributions (belief-mean spread, policy
//! covariance) are constants per discrete index. Gradients with respect
//! to the discrete parameters are expected cumulative discrete features
//! under the (autonomous) discrete chain.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::belief::{d_transition, CovarianceSchedule, HybridState};
use crate::model::AttentionProblem;
use crate::policy::{stack_z, SoftPolicy};
use crate::util::{blk_diag, vec_blk_upper, vec_of, DiscTable};

#[derive(Debug, Error)]
pub enum GradientError {
    #[error("policy does not match the problem: {0}")]
    Mismatch(String),
}

/// Backward tables for the exact theta-gradient of the soft Q-function.
#[derive(Debug, Clone)]
pub struct GradientTables {
    /// Per t: maps vec(z z') to the gradient wrt vec(blk(Theta1, Theta2)).
    pub m1: Vec<DMatrix<f64>>,
    /// Per t: acts on z = [mu; u_p].
    pub m2: Vec<DMatrix<f64>>,
    /// Constant gradient contribution per (t, d, x_s, u_o, u_s); chunk
    /// length (n_x+n_u)^2.
    pub m3: DiscTable,
    /// Expected cumulative discrete features [phi_s; phi_o] from (t, .)
    /// onward; chunk length k_s + 1.
    pub disc_grad: DiscTable,
    n_x: usize,
    k_s: usize,
}

/// Builds the gradient tables for a solved policy.
pub fn solve_gradients(
    problem: &AttentionProblem,
    schedule: &CovarianceSchedule,
    policy: &SoftPolicy,
) -> Result<GradientTables, GradientError> {
    if policy.horizon != problem.horizon || policy.n_x != problem.n_x() || policy.d_max != problem.d_max {
        return Err(GradientError::Mismatch(format!(
            "policy solved for horizon {} / n_x {} / d_max {}, problem has {} / {} / {}",
            policy.horizon,
            policy.n_x,
            policy.d_max,
            problem.horizon,
            problem.n_x(),
            problem.d_max
        )));
    }

    let n_x = problem.n_x();
    let n_u = problem.n_u();
    let nz = n_x + n_u;
    let nn = nz * nz;
    let t_end = problem.horizon;
    let d_max = problem.d_max;
    let n_xs = problem.sub_mdp.n_states;
    let n_us = problem.sub_mdp.n_controls;
    let k_s = problem.features.k_s;

    let mut m1 = vec![DMatrix::zeros(nn, nn); t_end + 1];
    let mut m2 = vec![DMatrix::zeros(nn, nz); t_end + 1];
    let mut m3 = DiscTable::zeros(t_end + 1, d_max + 1, n_xs, 2, n_us, nn);
    let mut disc = DiscTable::zeros(t_end + 1, d_max + 1, n_xs, 2, n_us, k_s + 1);

    // Terminal: identity transport, covariance trace constant, and the
    // instantaneous discrete features.
    m1[t_end] = DMatrix::identity(nn, nn);
    for d in 0..=d_max {
        let v = vec_blk_upper(schedule.posterior(t_end, d), n_u);
        for xs in 0..n_xs {
            for uo in 0..2 {
                for us in 0..n_us {
                    m3.get_mut(t_end, d, xs, uo, us).copy_from_slice(v.as_slice());
                    let dst = disc.get_mut(t_end, d, xs, uo, us);
                    let phi = problem.sub_mdp.feature(xs, us);
                    dst[..k_s].copy_from_slice(phi.as_slice());
                    dst[k_s] = uo as f64;
                }
            }
        }
    }

    for t in (0..t_end).rev() {
        let a = &problem.dyn_a[t];
        let b = &problem.dyn_b[t];
        let aff = &problem.dyn_affine[t];
        let f_gain = &policy.cont[t + 1].gain;
        let f_off = &policy.cont[t + 1].offset;
        let sigma_f = &policy.cont[t + 1].sigma;

        // Closed-loop transport of z = [mu; u]:
        //   T = [[A, B]; [FA, FB]],  t = [a; Fa + f],  Fr = [I; F].
        let mut big_t = DMatrix::zeros(nz, nz);
        big_t.view_mut((0, 0), (n_x, n_x)).copy_from(a);
        big_t.view_mut((0, n_x), (n_x, n_u)).copy_from(b);
        big_t.view_mut((n_x, 0), (n_u, n_x)).copy_from(&(f_gain * a));
        big_t.view_mut((n_x, n_x), (n_u, n_u)).copy_from(&(f_gain * b));

        let mut lit_t = DVector::zeros(nz);
        lit_t.rows_mut(0, n_x).copy_from(aff);
        lit_t.rows_mut(n_x, n_u).copy_from(&(f_gain * aff + f_off));
        let lit_t_mat = DMatrix::from_column_slice(nz, 1, lit_t.as_slice());

        let mut frame = DMatrix::zeros(nz, n_x);
        frame.view_mut((0, 0), (n_x, n_x)).copy_from(&DMatrix::identity(n_x, n_x));
        frame.view_mut((n_x, 0), (n_u, n_x)).copy_from(f_gain);

        m1[t] = DMatrix::identity(nn, nn) + &m1[t + 1] * big_t.kronecker(&big_t);
        m2[t] = &m2[t + 1] * &big_t
            + &m1[t + 1] * (big_t.kronecker(&lit_t_mat) + lit_t_mat.kronecker(&big_t));

        // Average next-step m3 / disc_grad under the discrete softmax.
        let mut avg_m3 = vec![vec![DVector::zeros(nn); n_xs]; d_max + 1];
        let mut avg_disc = vec![vec![DVector::zeros(k_s + 1); n_xs]; d_max + 1];
        for d_next in 0..=d_max {
            for xs_next in 0..n_xs {
                let am = &mut avg_m3[d_next][xs_next];
                let ad = &mut avg_disc[d_next][xs_next];
                for uo in 0..2 {
                    for us in 0..n_us {
                        let p = policy.discrete_prob(t + 1, d_next, xs_next, uo, us);
                        if p > 0.0 {
                            add_scaled(am.as_mut_slice(), m3.get(t + 1, d_next, xs_next, uo, us), p);
                            add_scaled(ad.as_mut_slice(), disc.get(t + 1, d_next, xs_next, uo, us), p);
                        }
                    }
                }
            }
        }

        // Shared constant per (d, u_o): transported second moments of
        // the stochastic z transition.
        let m2_lit = &m2[t + 1] * &lit_t;
        let mut base = vec![[DVector::zeros(nn), DVector::zeros(nn)]; d_max + 1];
        for d in 0..=d_max {
            for uo in 0..2 {
                let spread = &lit_t * lit_t.transpose()
                    + &frame * schedule.mean_update_for(t, d, uo) * frame.transpose()
                    + blk_diag(&DMatrix::zeros(n_x, n_x), sigma_f);
                base[d][uo] = &m1[t + 1] * vec_of(&spread) + &m2_lit;
            }
        }

        for d in 0..=d_max {
            let x_o = usize::from(d == 0);
            let post_vec = vec_blk_upper(schedule.posterior(t, d), n_u);
            for xs in 0..n_xs {
                for uo in 0..2 {
                    let d_next = d_transition(d, uo, d_max);
                    for us in 0..n_us {
                        let row = problem.sub_mdp.row(x_o, uo, xs, us);

                        let dst = m3.get_mut(t, d, xs, uo, us);
                        dst.copy_from_slice(post_vec.as_slice());
                        add_scaled(dst, base[d][uo].as_slice(), 1.0);
                        for (xs_next, &p) in row.iter().enumerate() {
                            if p > 0.0 {
                                add_scaled(dst, avg_m3[d_next][xs_next].as_slice(), p);
                            }
                        }

                        let dstd = disc.get_mut(t, d, xs, uo, us);
                        let phi = problem.sub_mdp.feature(xs, us);
                        dstd[..k_s].copy_from_slice(phi.as_slice());
                        dstd[k_s] = uo as f64;
                        for (xs_next, &p) in row.iter().enumerate() {
                            if p > 0.0 {
                                add_scaled(dstd, avg_disc[d_next][xs_next].as_slice(), p);
                            }
                        }
                    }
                }
            }
        }
    }

    Ok(GradientTables { m1, m2, m3, disc_grad: disc, n_x, k_s })
}

#[inline]
fn add_scaled(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

impl GradientTables {
    /// Gradient of the soft Q-function at (t, state, controls), in theta
    /// order [theta_p; theta_s; theta_o].
    pub fn grad_q(
        &self,
        problem: &AttentionProblem,
        t: usize,
        state: &HybridState,
        u_p: &DVector<f64>,
        u_o: usize,
        u_s: usize,
    ) -> DVector<f64> {
        let z = stack_z(&state.mu, u_p);
        let zz = &z * z.transpose();
        let mut gp = &self.m1[t] * vec_of(&zz) + &self.m2[t] * &z;
        add_scaled(gp.as_mut_slice(), self.m3.get(t, state.d, state.x_s, u_o, u_s), 1.0);
        self.assemble(problem, &gp, self.disc_grad.get(t, state.d, state.x_s, u_o, u_s))
    }

    /// Closed-form expectation of `grad_q` over the policy's controls at
    /// (t, state).
    pub fn expected_grad_q(
        &self,
        problem: &AttentionProblem,
        policy: &SoftPolicy,
        t: usize,
        state: &HybridState,
    ) -> DVector<f64> {
        let mean = policy.cont[t].mean(&state.mu);
        let zbar = stack_z(&state.mu, &mean);
        let ezz = &zbar * zbar.transpose() + blk_diag(&DMatrix::zeros(self.n_x, self.n_x), &policy.cont[t].sigma);
        let mut gp = &self.m1[t] * vec_of(&ezz) + &self.m2[t] * &zbar;

        let mut disc_avg = vec![0.0; self.k_s + 1];
        for uo in 0..2 {
            for us in 0..policy.n_us {
                let p = policy.discrete_prob(t, state.d, state.x_s, uo, us);
                if p > 0.0 {
                    add_scaled(gp.as_mut_slice(), self.m3.get(t, state.d, state.x_s, uo, us), p);
                    add_scaled(&mut disc_avg, self.disc_grad.get(t, state.d, state.x_s, uo, us), p);
                }
            }
        }
        self.assemble(problem, &gp, &disc_avg)
    }

    fn assemble(&self, problem: &AttentionProblem, gp_vec: &DVector<f64>, disc: &[f64]) -> DVector<f64> {
        let k_p = problem.features.k_p;
        let theta_p_part = problem.features.selector.transpose() * gp_vec;
        let mut out = DVector::zeros(k_p + self.k_s + 1);
        out.rows_mut(0, k_p).copy_from(&theta_p_part);
        for (i, &v) in disc.iter().enumerate() {
            out[k_p + i] = v;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::belief::tabulate_covariances;
    use crate::model::{build_driver_problem, driver_process_noise, driver_true_theta, DriverConfig, RewardParams};
    use crate::policy::solve_soft_policy;
    use approx::assert_relative_eq;
    use nalgebra::DVector;

    fn noisy_driver(horizon: usize) -> crate::model::AttentionProblem {
        let mut cfg = DriverConfig::new(500.0 / 36.0, 14e-4, 0.04, horizon);
        cfg.process_noise = driver_process_noise(500.0 / 36.0, 0.01, 0.003, 0.005);
        build_driver_problem(&cfg).unwrap()
    }

    #[test]
    fn terminal_tables_match_definitions() {
        let p = noisy_driver(6);
        let s = tabulate_covariances(&p).unwrap();
        let pol = solve_soft_policy(&p, &s, &driver_true_theta()).unwrap();
        let g = solve_gradients(&p, &s, &pol).unwrap();
        let t_end = p.horizon;
        assert_eq!(g.m1[t_end], DMatrix::identity(25, 25));
        assert_eq!(g.m2[t_end].abs().max(), 0.0);
        for d in 0..=p.d_max {
            let expect = vec_blk_upper(s.posterior(t_end, d), 1);
            assert_eq!(g.m3.get(t_end, d, 0, 0, 0), expect.as_slice());
        }
        // terminal disc_grad is the instantaneous feature
        assert_eq!(g.disc_grad.get(t_end, 2, 1, 1, 0), &[1.0, 1.0]);
        assert_eq!(g.disc_grad.get(t_end, 0, 0, 0, 0), &[0.0, 0.0]);
    }

    #[test]
    fn kronecker_transport_matches_explicit_product() {
        // M1 applied to vec(z z') must transport the quadratic form
        // along the closed-loop map.
        let p = noisy_driver(4);
        let s = tabulate_covariances(&p).unwrap();
        let pol = solve_soft_policy(&p, &s, &driver_true_theta()).unwrap();
        let t = 2;
        let f_gain = &pol.cont[t + 1].gain;
        let mut big_t = DMatrix::zeros(5, 5);
        big_t.view_mut((0, 0), (4, 4)).copy_from(&p.dyn_a[t]);
        big_t.view_mut((0, 4), (4, 1)).copy_from(&p.dyn_b[t]);
        big_t.view_mut((4, 0), (1, 4)).copy_from(&(f_gain * &p.dyn_a[t]));
        big_t.view_mut((4, 4), (1, 1)).copy_from(&(f_gain * &p.dyn_b[t]));
        let z = DVector::from_vec(vec![0.3, -0.1, 0.2, 0.05, -0.4]);
        let zz = &z * z.transpose();
        let lhs = big_t.kronecker(&big_t) * vec_of(&zz);
        let tz = &big_t * &z;
        let rhs = vec_of(&(&tz * tz.transpose()));
        assert!((lhs - rhs).abs().max() < 1e-12);
    }

    #[test]
    fn pure_quadratic_case_scales_by_four() {
        // With a = 0 and no process noise the linear transport M2
        // vanishes, so doubling (mu, u) quadruples the state-dependent
        // part of the gradient.
        let mut cfg = DriverConfig::new(12.0, 0.0, 0.04, 6);
        cfg.process_noise = DMatrix::zeros(4, 4);
        let p = build_driver_problem(&cfg).unwrap();
        let s = tabulate_covariances(&p).unwrap();
        let pol = solve_soft_policy(&p, &s, &driver_true_theta()).unwrap();
        let g = solve_gradients(&p, &s, &pol).unwrap();
        for t in 0..=p.horizon {
            assert!(g.m2[t].abs().max() < 1e-12, "M2 nonzero at t={t}");
        }
        let mu = DVector::from_vec(vec![0.4, 0.1, -0.05, 0.02]);
        let u = DVector::from_vec(vec![0.3]);
        let st1 = HybridState::new(mu.clone(), 1, 1);
        let st2 = HybridState::new(&mu * 2.0, 1, 1);
        let g1 = g.grad_q(&p, 2, &st1, &u, 0, 0);
        let g2 = g.grad_q(&p, 2, &st2, &(&u * 2.0), 0, 0);
        let m3_vec = DVector::from_column_slice(g.m3.get(2, 1, 1, 0, 0));
        let m3_theta = p.features.selector.transpose() * m3_vec;
        for k in 0..4 {
            let base = g1[k] - m3_theta[k];
            let scaled = g2[k] - m3_theta[k];
            assert_relative_eq!(scaled, 4.0 * base, epsilon = 1e-10, max_relative = 1e-8);
        }
    }

    #[test]
    fn m3_reduces_to_policy_covariance_chain() {
        // a = 0, no noise, f = 0: the only constant left is the
        // transported policy covariance blk(0, Sigma_F).
        let mut cfg = DriverConfig::new(12.0, 0.0, 0.04, 5);
        cfg.process_noise = DMatrix::zeros(4, 4);
        let p = build_driver_problem(&cfg).unwrap();
        let s = tabulate_covariances(&p).unwrap();
        let pol = solve_soft_policy(&p, &s, &driver_true_theta()).unwrap();
        let g = solve_gradients(&p, &s, &pol).unwrap();

        // independent reference chain: r_t = M1_{t+1} vec(blk(0, S_{t+1})) + E[r_{t+1}]
        // (discrete average is trivial here because m3 is discrete-blind
        // when covariances vanish)
        let t_end = p.horizon;
        let mut reference = vec![DVector::zeros(25); t_end + 1];
        for t in (0..t_end).rev() {
            let spread = blk_diag(&DMatrix::zeros(4, 4), &pol.cont[t + 1].sigma);
            reference[t] = &g.m1[t + 1] * vec_of(&spread) + &reference[t + 1];
        }
        for t in 0..=t_end {
            for d in 0..=p.d_max {
                for xs in 0..2 {
                    for uo in 0..2 {
                        let got = DVector::from_column_slice(g.m3.get(t, d, xs, uo, 0));
                        assert!((got - &reference[t]).abs().max() < 1e-10, "m3 mismatch at t={t}");
                    }
                }
            }
        }
    }

    #[test]
    fn grad_q_matches_finite_differences_of_q() {
        let p = noisy_driver(8);
        let s = tabulate_covariances(&p).unwrap();
        let theta = driver_true_theta();
        let pol = solve_soft_policy(&p, &s, &theta).unwrap();
        let g = solve_gradients(&p, &s, &pol).unwrap();

        let state = HybridState::new(DVector::from_vec(vec![0.3, 0.2, -0.01, 0.004]), 2, 1);
        let u = DVector::from_vec(vec![0.15]);
        let (t, uo, us) = (3usize, 1usize, 0usize);
        let analytic = g.grad_q(&p, t, &state, &u, uo, us);

        let base_vec = theta.to_vector();
        for i in 0..base_vec.len() {
            let h = 1e-5 * base_vec[i].abs().max(1.0);
            let mut plus = base_vec.clone();
            plus[i] += h;
            let mut minus = base_vec.clone();
            minus[i] -= h;
            let q_plus = solve_soft_policy(&p, &s, &RewardParams::from_vector(&plus, 4, 1))
                .unwrap()
                .q_value(t, &state, &u, uo, us);
            let q_minus = solve_soft_policy(&p, &s, &RewardParams::from_vector(&minus, 4, 1))
                .unwrap()
                .q_value(t, &state, &u, uo, us);
            let fd = (q_plus - q_minus) / (2.0 * h);
            let rel = (analytic[i] - fd).abs() / fd.abs().max(1.0);
            assert!(rel <= 1e-5, "coordinate {i}: analytic {} vs fd {}", analytic[i], fd);
        }
    }

    #[test]
    fn discrete_gradient_ignores_continuous_state() {
        let p = noisy_driver(6);
        let s = tabulate_covariances(&p).unwrap();
        let pol = solve_soft_policy(&p, &s, &driver_true_theta()).unwrap();
        let g = solve_gradients(&p, &s, &pol).unwrap();
        let u = DVector::from_vec(vec![0.1]);
        let a = g.grad_q(&p, 2, &HybridState::new(DVector::zeros(4), 1, 1), &u, 0, 0);
        let b = g.grad_q(&p, 2, &HybridState::new(DVector::from_vec(vec![5.0, -2.0, 1.0, 0.3]), 1, 1), &u, 0, 0);
        // theta_s and theta_o coordinates unaffected by mu
        assert_eq!(a[4], b[4]);
        assert_eq!(a[5], b[5]);
    }

    #[test]
    fn expected_grad_matches_sampled_average() {
        let p = noisy_driver(6);
        let s = tabulate_covariances(&p).unwrap();
        let pol = solve_soft_policy(&p, &s, &driver_true_theta()).unwrap();
        let g = solve_gradients(&p, &s, &pol).unwrap();
        let state = HybridState::new(DVector::from_vec(vec![0.2, 0.1, 0.0, 0.002]), 1, 1);
        let t = 2;
        let expected = g.expected_grad_q(&p, &pol, t, &state);

        use crate::policy::PolicyLike;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let dim = expected.len();
        let mut sum: DVector<f64> = DVector::zeros(dim);
        let mut sum_sq: DVector<f64> = DVector::zeros(dim);
        for _ in 0..n {
            let c = pol.sample(t, &state, &mut rng);
            let gq = g.grad_q(&p, t, &state, &c.u_p, c.u_o, c.u_s);
            for k in 0..dim {
                sum[k] += gq[k];
                sum_sq[k] += gq[k] * gq[k];
            }
        }
        for k in 0..dim {
            let mean = sum[k] / n as f64;
            let var = (sum_sq[k] / n as f64 - mean * mean).max(0.0);
            let se = (var / n as f64).sqrt();
            assert!(
                (mean - expected[k]).abs() <= 4.0 * se + 1e-12,
                "coordinate {k}: mc {mean} vs analytic {}",
                expected[k]
            );
        }
    }
}
