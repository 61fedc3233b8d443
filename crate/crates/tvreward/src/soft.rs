//! Forward solver for the entropy-regularized control problem: soft Q/V
//! backward recursion, the closed-form inverse map from (policy, values) to
//! the unique inducing reward, trajectory sampling, and log-likelihood
//! scoring of trajectory sets.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::mdp::{FlatIndex, MdpModel, Policy, TimeVaryingReward, ValueFunction};
use crate::{Error, Result};

/// Soft Q tables, soft values, and the induced softmax policy.
#[derive(Debug, Clone)]
pub struct SoftSolution {
    /// q[t] has shape m×n: q[t][(a, s)] = Q_t(s, a).
    pub q: Vec<DMatrix<f64>>,
    pub v: ValueFunction,
    pub policy: Policy,
}

/// A batch of sampled trajectories with the seed that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySet {
    pub trajectories: Vec<Trajectory>,
    pub seed: u64,
}

/// One rollout: T+1 states and T actions.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<u32>,
    pub actions: Vec<u32>,
}

impl TrajectorySet {
    pub fn horizon(&self) -> Option<usize> {
        self.trajectories.first().map(|tr| tr.actions.len())
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

/// Per-state log-sum-exp of a column of Q values, with max subtraction.
fn logsumexp_column(q: &DMatrix<f64>, s: usize) -> f64 {
    let m = q.nrows();
    let mut mx = f64::NEG_INFINITY;
    for a in 0..m {
        mx = mx.max(q[(a, s)]);
    }
    let mut acc = 0.0;
    for a in 0..m {
        acc += (q[(a, s)] - mx).exp();
    }
    mx + acc.ln()
}

/// Backward recursion with an arbitrary terminal value in place of zero.
/// Re-rooting an interval on a different boundary is exactly this recursion,
/// which is why the interval feasibility machinery shares it.
pub(crate) fn soft_backward_with_boundary(
    model: &MdpModel,
    rewards: &[DVector<f64>],
    terminal: &DVector<f64>,
) -> Result<(Vec<DMatrix<f64>>, Vec<DVector<f64>>, Vec<DMatrix<f64>>)> {
    let (n, m) = (model.n, model.m);
    let steps = rewards.len();
    let mut q_tables = vec![DMatrix::zeros(m, n); steps];
    let mut values = vec![DVector::zeros(n); steps + 1];
    let mut policies = vec![DMatrix::zeros(m, n); steps];
    values[steps] = terminal.clone();
    for t in (0..steps).rev() {
        let r = &rewards[t];
        if r.len() != m * n {
            return Err(Error::ShapeMismatch {
                context: format!("reward at step {t}"),
                expected: format!("length {}", m * n),
                got: format!("length {}", r.len()),
            });
        }
        if let Some(i) = r.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: "reward",
                index: t * m * n + i,
            });
        }
        let vnext = values[t + 1].clone();
        let q = &mut q_tables[t];
        for a in 0..m {
            let tr = &model.transitions[a];
            for s in 0..n {
                let mut exp_next = 0.0;
                for sp in 0..n {
                    exp_next += tr[(s, sp)] * vnext[sp];
                }
                q[(a, s)] = r[FlatIndex::flatten(a, s, n)] + model.gamma * exp_next;
            }
        }
        for s in 0..n {
            let v = logsumexp_column(q, s);
            values[t][s] = v;
            for a in 0..m {
                policies[t][(a, s)] = (q[(a, s)] - v).exp();
            }
        }
    }
    Ok((q_tables, values, policies))
}

/// Solves the soft Bellman recursion Q_t = r_t + γ·E[V_{t+1}],
/// V_t = logsumexp_a Q_t, V_T = 0, and returns Q, V, and the softmax policy.
pub fn soft_backward(model: &MdpModel, reward: &TimeVaryingReward) -> Result<SoftSolution> {
    if reward.horizon() != model.horizon {
        return Err(Error::ShapeMismatch {
            context: "reward horizon".to_string(),
            expected: format!("{}", model.horizon),
            got: format!("{}", reward.horizon()),
        });
    }
    let terminal = DVector::zeros(model.n);
    let (q, values, pol_tables) = soft_backward_with_boundary(model, &reward.values, &terminal)?;
    // Normalize away the representation slack: the softmax rows are
    // analytically stochastic, and construction below re-checks them.
    let policy = Policy::new(pol_tables)?;
    let v = ValueFunction::new(values)?;
    Ok(SoftSolution { q, v, policy })
}

/// Closed-form inverse of the recursion: the unique reward for which the
/// given strictly positive policy and values are soft-optimal,
/// r_t(s,a) = log π_t(a|s) − γ·E[ν_{t+1}] + ν_t(s).
pub fn reward_from_policy(
    model: &MdpModel,
    policy: &Policy,
    nu: &ValueFunction,
) -> Result<TimeVaryingReward> {
    let (n, m) = (model.n, model.m);
    let horizon = policy.horizon();
    if nu.horizon() != horizon {
        return Err(Error::ShapeMismatch {
            context: "value-function horizon".to_string(),
            expected: format!("{horizon}"),
            got: format!("{}", nu.horizon()),
        });
    }
    let mut values = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let log_pi = policy.log_step(t)?;
        let mut r = DVector::zeros(m * n);
        for a in 0..m {
            let tr = &model.transitions[a];
            for s in 0..n {
                let mut exp_next = 0.0;
                for sp in 0..n {
                    exp_next += tr[(s, sp)] * nu.values[t + 1][sp];
                }
                let idx = FlatIndex::flatten(a, s, n);
                r[idx] = log_pi[idx] - model.gamma * exp_next + nu.values[t][s];
            }
        }
        values.push(r);
    }
    TimeVaryingReward::new(values)
}

/// Draws an index from a probability row using a single uniform variate.
fn draw_categorical<R: Rng>(rng: &mut R, probs: impl Iterator<Item = f64> + Clone) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.clone().enumerate() {
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last // guard against rounding at the top of the CDF
}

/// I.i.d. rollouts: s₀ ~ μ₀, a_t ~ π_t(·|s_t), s_{t+1} ~ T(·|s_t, a_t).
/// Each trajectory uses its own counter-indexed stream of the seeded
/// generator, so results are independent of batching or evaluation order.
pub fn sample_trajectories(
    model: &MdpModel,
    policy: &Policy,
    count: usize,
    seed: u64,
) -> Result<TrajectorySet> {
    if policy.horizon() != model.horizon {
        return Err(Error::ShapeMismatch {
            context: "policy horizon".to_string(),
            expected: format!("{}", model.horizon),
            got: format!("{}", policy.horizon()),
        });
    }
    let (n, m) = (model.n, model.m);
    let horizon = model.horizon;
    let mut trajectories = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut states = Vec::with_capacity(horizon + 1);
        let mut actions = Vec::with_capacity(horizon);
        let mut s = draw_categorical(&mut rng, model.mu0.iter().copied());
        states.push(s as u32);
        for t in 0..horizon {
            let table = &policy.probs[t];
            let a = draw_categorical(&mut rng, (0..m).map(|a| table[(a, s)]));
            actions.push(a as u32);
            let tr = &model.transitions[a];
            s = draw_categorical(&mut rng, (0..n).map(|sp| tr[(s, sp)]));
            states.push(s as u32);
        }
        trajectories.push(Trajectory { states, actions });
    }
    Ok(TrajectorySet { trajectories, seed })
}

/// Mean per-step action log-likelihood of a trajectory set under a policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogLikScore {
    /// (1/(N·T)) Σᵢ Σₜ log π_t(aᵗᵢ | sᵗᵢ); −∞ when any visited entry has
    /// zero probability.
    pub mean: f64,
    /// Number of visited (t, s, a) with π = 0 — kept distinct from the −∞
    /// so callers can tell "impossible" from "merely terrible".
    pub zero_visits: usize,
}

/// Scores demonstrations under a policy. Dynamics and initial-state terms
/// are identical across compared policies, so only the action term is kept.
pub fn mean_action_loglik(policy: &Policy, trajectories: &TrajectorySet) -> Result<LogLikScore> {
    let horizon = policy.horizon();
    if trajectories.horizon() != Some(horizon) {
        return Err(Error::ShapeMismatch {
            context: "trajectory horizon".to_string(),
            expected: format!("{horizon}"),
            got: format!("{:?}", trajectories.horizon()),
        });
    }
    let mut total = 0.0;
    let mut zero_visits = 0usize;
    for tr in &trajectories.trajectories {
        for t in 0..horizon {
            let (s, a) = (tr.states[t] as usize, tr.actions[t] as usize);
            let p = policy.probs[t][(a, s)];
            if p <= 0.0 {
                zero_visits += 1;
            } else {
                total += p.ln();
            }
        }
    }
    let count = (trajectories.len() * horizon) as f64;
    let mean = if zero_visits > 0 {
        f64::NEG_INFINITY
    } else {
        total / count
    };
    Ok(LogLikScore { mean, zero_visits })
}

/// Max over (t, a, s) of |p1 − p2|.
pub fn policy_distance(p1: &Policy, p2: &Policy) -> Result<f64> {
    if p1.horizon() != p2.horizon() {
        return Err(Error::ShapeMismatch {
            context: "policy horizons".to_string(),
            expected: format!("{}", p1.horizon()),
            got: format!("{}", p2.horizon()),
        });
    }
    let mut dist = 0.0f64;
    for (t, (a_tab, b_tab)) in p1.probs.iter().zip(&p2.probs).enumerate() {
        if a_tab.shape() != b_tab.shape() {
            return Err(Error::ShapeMismatch {
                context: format!("policy tables at t={t}"),
                expected: format!("{:?}", a_tab.shape()),
                got: format!("{:?}", b_tab.shape()),
            });
        }
        dist = dist.max((a_tab - b_tab).abs().max());
    }
    Ok(dist)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::STOCHASTIC_TOL;
    use approx::assert_abs_diff_eq;

    fn random_model(rng: &mut ChaCha8Rng, n: usize, m: usize, horizon: usize) -> MdpModel {
        let transitions = (0..m)
            .map(|_| {
                let mut tr = DMatrix::from_fn(n, n, |_, _| rng.gen_range(0.05..1.0));
                for i in 0..n {
                    let s = tr.row(i).sum();
                    for j in 0..n {
                        tr[(i, j)] /= s;
                    }
                    // compensate rounding so validation at 1e-12 passes
                    let resid = 1.0 - tr.row(i).sum();
                    tr[(i, 0)] += resid;
                }
                tr
            })
            .collect();
        let mut mu = DVector::from_fn(n, |_, _| rng.gen_range(0.1..1.0));
        mu /= mu.sum();
        mu[0] += 1.0 - mu.sum();
        MdpModel::new(transitions, mu, rng.gen_range(0.1..1.0), horizon).unwrap()
    }

    fn random_reward(rng: &mut ChaCha8Rng, mn: usize, horizon: usize) -> TimeVaryingReward {
        TimeVaryingReward::new(
            (0..horizon)
                .map(|_| DVector::from_fn(mn, |_, _| rng.gen_range(-1.0..1.0)))
                .collect(),
        )
        .unwrap()
    }

    /// Naive scalar re-implementation of the recursion without max
    /// subtraction; valid for modest reward scales.
    fn scalar_loop_oracle(model: &MdpModel, reward: &TimeVaryingReward) -> Vec<DMatrix<f64>> {
        let (n, m, horizon) = (model.n, model.m, model.horizon);
        let mut v = vec![0.0; n];
        let mut qs = vec![DMatrix::zeros(m, n); horizon];
        for t in (0..horizon).rev() {
            for a in 0..m {
                for s in 0..n {
                    let mut ev = 0.0;
                    for sp in 0..n {
                        ev += model.transitions[a][(s, sp)] * v[sp];
                    }
                    qs[t][(a, s)] = reward.values[t][a * n + s] + model.gamma * ev;
                }
            }
            let mut vnew = vec![0.0; n];
            for s in 0..n {
                let mut acc = 0.0;
                for a in 0..m {
                    acc += qs[t][(a, s)].exp();
                }
                vnew[s] = acc.ln();
            }
            v = vnew;
        }
        qs
    }

    #[test]
    fn uniform_two_action_single_step() {
        let model = MdpModel::new(
            vec![DMatrix::identity(1, 1), DMatrix::identity(1, 1)],
            DVector::from_element(1, 1.0),
            0.9,
            1,
        )
        .unwrap();
        let reward = TimeVaryingReward::new(vec![DVector::zeros(2)]).unwrap();
        let sol = soft_backward(&model, &reward).unwrap();
        assert_eq!(sol.q[0], DMatrix::zeros(2, 1));
        assert_abs_diff_eq!(sol.v.values[0][0], 2.0f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(sol.policy.probs[0][(0, 0)], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(sol.policy.probs[0][(1, 0)], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn constant_reward_closed_form() {
        // V_t(s) = Σ_{k=0}^{T-1-t} γ^k (c + log m) for constant reward c.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = {
            let mut m = random_model(&mut rng, 4, 5, 3);
            m.gamma = 0.9;
            m
        };
        let (c, m_actions) = (1.0, 5.0f64);
        let reward =
            TimeVaryingReward::constant(DVector::from_element(model.mn(), c), 3).unwrap();
        let sol = soft_backward(&model, &reward).unwrap();
        for t in 0..3 {
            let mut expected = 0.0;
            for k in 0..(3 - t) {
                expected += model.gamma.powi(k as i32) * (c + m_actions.ln());
            }
            for s in 0..model.n {
                assert_abs_diff_eq!(sol.v.values[t][s], expected, epsilon = 1e-12);
            }
            for a in 0..model.m {
                for s in 0..model.n {
                    assert_abs_diff_eq!(
                        sol.policy.probs[t][(a, s)],
                        1.0 / m_actions,
                        epsilon = 1e-12
                    );
                }
            }
        }
    }

    #[test]
    fn matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let model = random_model(&mut rng, 2, 2, 4);
            let reward = random_reward(&mut rng, 4, 4);
            let sol = soft_backward(&model, &reward).unwrap();
            let oracle = scalar_loop_oracle(&model, &reward);
            for t in 0..4 {
                assert!((&sol.q[t] - &oracle[t]).abs().max() < 1e-12);
            }
        }
    }

    #[test]
    fn soft_solution_internal_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let model = random_model(&mut rng, 3, 4, 5);
        let reward = random_reward(&mut rng, 12, 5);
        let sol = soft_backward(&model, &reward).unwrap();
        for t in 0..5 {
            for s in 0..3 {
                let lse = logsumexp_column(&sol.q[t], s);
                assert_abs_diff_eq!(sol.v.values[t][s], lse, epsilon = 1e-9);
                for a in 0..4 {
                    let p = (sol.q[t][(a, s)] - sol.v.values[t][s]).exp();
                    assert_abs_diff_eq!(sol.policy.probs[t][(a, s)], p, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn reward_from_uniform_policy_and_zero_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let model = random_model(&mut rng, 3, 4, 2);
        let uniform = Policy::new(vec![DMatrix::from_element(4, 3, 0.25); 2]).unwrap();
        let nu = ValueFunction::zero(3, 2);
        let r = reward_from_policy(&model, &uniform, &nu).unwrap();
        for t in 0..2 {
            for &x in r.values[t].iter() {
                assert_abs_diff_eq!(x, 0.25f64.ln(), epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn reward_from_unit_values_cancels_for_stochastic_rows() {
        // γ=1, ν_t ≡ 1 for t<T: interior steps cancel, the final step keeps
        // its +1 because ν_T = 0.
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut model = random_model(&mut rng, 3, 2, 3);
        model.gamma = 1.0;
        let uniform = Policy::new(vec![DMatrix::from_element(2, 3, 0.5); 3]).unwrap();
        let nu = ValueFunction::new(vec![
            DVector::from_element(3, 1.0),
            DVector::from_element(3, 1.0),
            DVector::from_element(3, 1.0),
            DVector::zeros(3),
        ])
        .unwrap();
        let r = reward_from_policy(&model, &uniform, &nu).unwrap();
        for t in 0..2 {
            for &x in r.values[t].iter() {
                assert_abs_diff_eq!(x, 0.5f64.ln(), epsilon = 1e-12);
            }
        }
        for &x in r.values[2].iter() {
            assert_abs_diff_eq!(x, 0.5f64.ln() + 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn lemma_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..10 {
            let model = random_model(&mut rng, 2, 2, 4);
            // random strictly positive policy and values
            let probs: Vec<DMatrix<f64>> = (0..4)
                .map(|_| {
                    let mut t = DMatrix::from_fn(2, 2, |_, _| rng.gen_range(0.05..1.0));
                    for s in 0..2 {
                        let sum: f64 = (0..2).map(|a| t[(a, s)]).sum();
                        for a in 0..2 {
                            t[(a, s)] /= sum;
                        }
                        let resid = 1.0 - (0..2).map(|a| t[(a, s)]).sum::<f64>();
                        t[(0, s)] += resid;
                    }
                    t
                })
                .collect();
            let policy = Policy::new(probs).unwrap();
            let mut vals: Vec<DVector<f64>> = (0..4)
                .map(|_| DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0)))
                .collect();
            vals.push(DVector::zeros(2));
            let nu = ValueFunction::new(vals).unwrap();
            let r = reward_from_policy(&model, &policy, &nu).unwrap();
            let sol = soft_backward(&model, &r).unwrap();
            assert!(policy_distance(&sol.policy, &policy).unwrap() < 1e-8);
            for t in 0..4 {
                assert!((&sol.v.values[t] - &nu.values[t]).abs().max() < 1e-8);
            }
        }
    }

    #[test]
    fn boundary_rerooting_preserves_policies() {
        // Folding a boundary value into the last reward step reproduces the
        // recursion rooted at that boundary: identical policies at every t.
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..5 {
            let model = random_model(&mut rng, 3, 3, 4);
            let reward = random_reward(&mut rng, 9, 4);
            let boundary = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
            let (_, v_rooted, pol_rooted) =
                soft_backward_with_boundary(&model, &reward.values, &boundary).unwrap();

            let p = crate::mdp::build_transition_stack(&model);
            let mut folded = reward.values.clone();
            let shift = model.gamma * (&p * &boundary);
            for (i, x) in folded[3].iter_mut().enumerate() {
                *x += shift[i];
            }
            let folded_reward = TimeVaryingReward::new(folded).unwrap();
            let sol = soft_backward(&model, &folded_reward).unwrap();
            for t in 0..4 {
                assert!((&sol.policy.probs[t] - &pol_rooted[t]).abs().max() < 1e-12);
                if t > 0 {
                    assert!((&sol.v.values[t] - &v_rooted[t]).abs().max() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gamma_zero_per_state_shift_changes_only_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut model = random_model(&mut rng, 3, 3, 3);
        model.gamma = 0.0;
        let reward = random_reward(&mut rng, 9, 3);
        let sol = soft_backward(&model, &reward).unwrap();
        let mut shifted = reward.clone();
        for a in 0..3 {
            shifted.values[1][a * 3 + 2] += 0.7; // all actions at (t=1, s=2)
        }
        let sol2 = soft_backward(&model, &shifted).unwrap();
        assert!(policy_distance(&sol.policy, &sol2.policy).unwrap() < 1e-12);
        assert_abs_diff_eq!(
            sol2.v.values[1][2] - sol.v.values[1][2],
            0.7,
            epsilon = 1e-12
        );
    }

    #[test]
    fn logsumexp_survives_large_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let model = random_model(&mut rng, 3, 3, 6);
        let mut reward = random_reward(&mut rng, 9, 6);
        for v in &mut reward.values {
            *v *= 1e3;
        }
        let sol = soft_backward(&model, &reward).unwrap();
        for t in 0..6 {
            assert!(sol.q[t].iter().all(|x| x.is_finite()));
            assert!(sol.v.values[t].iter().all(|x| x.is_finite()));
            assert!(sol.policy.probs[t].iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn sampling_is_deterministic_and_degenerate_paths_unique() {
        // point-mass everything: one possible path
        let tr0 = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 1.0]);
        let model = MdpModel::new(
            vec![tr0.clone(), tr0],
            DVector::from_vec(vec![1.0, 0.0]),
            0.9,
            3,
        )
        .unwrap();
        let point_mass = Policy::new(vec![DMatrix::from_row_slice(
            2,
            2,
            &[1.0, 1.0, 0.0, 0.0],
        ); 3])
        .unwrap();
        let a = sample_trajectories(&model, &point_mass, 8, 99).unwrap();
        let b = sample_trajectories(&model, &point_mass, 8, 99).unwrap();
        assert_eq!(a, b);
        for tr in &a.trajectories {
            assert_eq!(tr.states, vec![0, 1, 1, 1]);
            assert_eq!(tr.actions, vec![0, 0, 0]);
        }
    }

    #[test]
    fn empirical_action_frequency_within_binomial_band() {
        let model = MdpModel::new(
            vec![DMatrix::identity(1, 1), DMatrix::identity(1, 1)],
            DVector::from_element(1, 1.0),
            0.9,
            1,
        )
        .unwrap();
        let uniform = Policy::new(vec![DMatrix::from_element(2, 1, 0.5)]).unwrap();
        let set = sample_trajectories(&model, &uniform, 100_000, 12345).unwrap();
        let ones = set
            .trajectories
            .iter()
            .filter(|tr| tr.actions[0] == 1)
            .count() as f64;
        let freq = ones / 100_000.0;
        assert!((0.495..=0.505).contains(&freq), "freq = {freq}");
    }

    #[test]
    fn loglik_uniform_policy_is_log_m() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let model = random_model(&mut rng, 2, 5, 3);
        let uniform = Policy::new(vec![DMatrix::from_element(5, 2, 0.2); 3]).unwrap();
        let set = sample_trajectories(&model, &uniform, 50, 7).unwrap();
        let score = mean_action_loglik(&uniform, &set).unwrap();
        assert_abs_diff_eq!(score.mean, -(5.0f64.ln()), epsilon = 1e-12);
        assert_eq!(score.zero_visits, 0);
    }

    #[test]
    fn loglik_point_mass_match_is_zero_and_mismatch_flagged() {
        let tr0 = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 1.0]);
        let model = MdpModel::new(
            vec![tr0.clone(), tr0],
            DVector::from_vec(vec![1.0, 0.0]),
            0.9,
            2,
        )
        .unwrap();
        let point = Policy::new(vec![DMatrix::from_row_slice(
            2,
            2,
            &[1.0, 1.0, 0.0, 0.0],
        ); 2])
        .unwrap();
        let set = sample_trajectories(&model, &point, 5, 3).unwrap();
        let own = mean_action_loglik(&point, &set).unwrap();
        assert_eq!(own.mean, 0.0);

        let opposite = Policy::new(vec![DMatrix::from_row_slice(
            2,
            2,
            &[0.0, 0.0, 1.0, 1.0],
        ); 2])
        .unwrap();
        let cross = mean_action_loglik(&opposite, &set).unwrap();
        assert_eq!(cross.mean, f64::NEG_INFINITY);
        assert_eq!(cross.zero_visits, 10);
    }

    #[test]
    fn policy_distance_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let make = |rng: &mut ChaCha8Rng| {
            let mut t = DMatrix::from_fn(3, 2, |_, _| rng.gen_range(0.05..1.0f64));
            for s in 0..2 {
                let sum: f64 = (0..3).map(|a| t[(a, s)]).sum();
                for a in 0..3 {
                    t[(a, s)] /= sum;
                }
                let resid = 1.0 - (0..3).map(|a| t[(a, s)]).sum::<f64>();
                t[(0, s)] += resid;
            }
            t
        };
        let p1 = Policy::new(vec![make(&mut rng), make(&mut rng)]).unwrap();
        let p2 = Policy::new(vec![make(&mut rng), make(&mut rng)]).unwrap();
        let d = policy_distance(&p1, &p2).unwrap();
        let mut expected = 0.0f64;
        for t in 0..2 {
            for a in 0..3 {
                for s in 0..2 {
                    expected = expected.max((p1.probs[t][(a, s)] - p2.probs[t][(a, s)]).abs());
                }
            }
        }
        assert_eq!(d, expected);
        assert_eq!(policy_distance(&p1, &p1).unwrap(), 0.0);

        let mut p3 = p1.clone();
        p3.probs[1][(2, 1)] += 0.1;
        p3.probs[1][(0, 1)] -= 0.1;
        assert!(policy_distance(&p1, &p3).unwrap() >= 0.1 - STOCHASTIC_TOL);
    }
}
