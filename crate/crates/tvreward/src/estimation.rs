//! Empirical policy estimation and finite-sample error radii.
//!
//! From a demonstration set, counts state visits n(t,s) and action
//! occurrences, forms the relative-frequency policy π̂, and converts the
//! per-(t,s) Hoeffding radius ε(t,s) = √(log(2/(1−δ)) / (2 n(t,s))) into the
//! log-space bound vector b with entries ε/(π̂ − ε). Entries where the
//! estimate does not clear the radius — or where the state was never
//! visited — are unbounded (+∞), which drops the corresponding constraint
//! rows downstream rather than smoothing the estimate.

use nalgebra::{DMatrix, DVector};

use crate::mdp::{FlatIndex, Policy};
use crate::soft::{Trajectory, TrajectorySet};
use crate::{Error, Result};

/// Visit and action-occurrence counts from a demonstration set.
#[derive(Debug, Clone)]
pub struct CountTable {
    pub n: usize,
    pub m: usize,
    pub horizon: usize,
    /// n(t,s): trajectories that are in state s at time t; indexed \[t\]\[s\].
    pub n_ts: Vec<Vec<u64>>,
    /// Occurrences of action a in state s at time t; indexed \[t\]\[a·n + s\].
    pub n_tsa: Vec<Vec<u64>>,
}

impl CountTable {
    pub fn new(n: usize, m: usize, horizon: usize) -> Self {
        Self {
            n,
            m,
            horizon,
            n_ts: vec![vec![0; n]; horizon],
            n_tsa: vec![vec![0; m * n]; horizon],
        }
    }

    /// Adds one trajectory's visits. Counting depends only on states for
    /// n(t,s) and on (state, action) pairs for the action table.
    pub fn accumulate(&mut self, traj: &Trajectory) -> Result<()> {
        if traj.actions.len() != self.horizon || traj.states.len() != self.horizon + 1 {
            return Err(Error::ShapeMismatch {
                context: "trajectory length".to_string(),
                expected: format!("{} actions / {} states", self.horizon, self.horizon + 1),
                got: format!("{} actions / {} states", traj.actions.len(), traj.states.len()),
            });
        }
        for t in 0..self.horizon {
            let s = traj.states[t] as usize;
            let a = traj.actions[t] as usize;
            if s >= self.n || a >= self.m {
                return Err(Error::Index(format!(
                    "trajectory index out of range at t={t}: state {s} (n={}), action {a} (m={})",
                    self.n, self.m
                )));
            }
            self.n_ts[t][s] += 1;
            self.n_tsa[t][FlatIndex { a, s }.flat(self.n)] += 1;
        }
        Ok(())
    }

    /// Merges another table counted over a disjoint batch of trajectories.
    pub fn merge(&mut self, other: &CountTable) -> Result<()> {
        if self.n != other.n || self.m != other.m || self.horizon != other.horizon {
            return Err(Error::ShapeMismatch {
                context: "count table merge".to_string(),
                expected: format!("{}x{}x{}", self.horizon, self.m, self.n),
                got: format!("{}x{}x{}", other.horizon, other.m, other.n),
            });
        }
        for t in 0..self.horizon {
            for s in 0..self.n {
                self.n_ts[t][s] += other.n_ts[t][s];
            }
            for q in 0..self.m * self.n {
                self.n_tsa[t][q] += other.n_tsa[t][q];
            }
        }
        Ok(())
    }

    pub fn state_count(&self, t: usize, s: usize) -> u64 {
        self.n_ts[t][s]
    }

    pub fn action_count(&self, t: usize, a: usize, s: usize) -> u64 {
        self.n_tsa[t][FlatIndex { a, s }.flat(self.n)]
    }

    /// Relative-frequency policy; unvisited (t,s) columns fall back to a
    /// uniform placeholder whose zero count marks them for exclusion from
    /// any downstream constraint.
    pub fn policy(&self) -> Result<Policy> {
        let mut probs = Vec::with_capacity(self.horizon);
        for t in 0..self.horizon {
            let mut pm = DMatrix::zeros(self.m, self.n);
            for s in 0..self.n {
                let total = self.n_ts[t][s];
                if total == 0 {
                    for a in 0..self.m {
                        pm[(a, s)] = 1.0 / self.m as f64;
                    }
                } else {
                    for a in 0..self.m {
                        pm[(a, s)] =
                            self.n_tsa[t][FlatIndex { a, s }.flat(self.n)] as f64 / total as f64;
                    }
                }
            }
            probs.push(pm);
        }
        Policy::new(probs)
    }
}

/// Per-row log-space radii for the robust constraint set; +∞ marks rows
/// without a usable bound.
#[derive(Debug, Clone)]
pub struct BoundVector {
    /// Length T·m·n, FlatIndex order within each time block.
    pub b: DVector<f64>,
}

impl BoundVector {
    pub fn new(b: DVector<f64>) -> Result<Self> {
        for &v in b.iter() {
            if v.is_nan() || v < 0.0 {
                return Err(Error::BadParameter {
                    name: "bound vector entry",
                    value: v,
                    requirement: "nonnegative (possibly +inf)",
                });
            }
        }
        Ok(Self { b })
    }

    /// Fraction of rows that carry a finite bound.
    pub fn finite_fraction(&self) -> f64 {
        if self.b.is_empty() {
            return 0.0;
        }
        self.b.iter().filter(|v| v.is_finite()).count() as f64 / self.b.len() as f64
    }
}

/// Empirical policy and counts from demonstrations.
pub fn estimate_policy(
    trajectories: &TrajectorySet,
    n: usize,
    m: usize,
    horizon: usize,
) -> Result<(Policy, CountTable)> {
    if trajectories.is_empty() {
        return Err(Error::BadParameter {
            name: "trajectories",
            value: 0.0,
            requirement: "at least one demonstration",
        });
    }
    let mut counts = CountTable::new(n, m, horizon);
    for traj in &trajectories.trajectories {
        counts.accumulate(traj)?;
    }
    let policy = counts.policy()?;
    Ok((policy, counts))
}

/// Hoeffding radius ε = √(log(2/(1−δ)) / (2·count)).
pub fn epsilon_radius(count: u64, delta: f64) -> Result<f64> {
    if count == 0 {
        return Err(Error::BadParameter {
            name: "count",
            value: 0.0,
            requirement: "at least one visit (no data at this (t,s))",
        });
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::BadParameter {
            name: "delta",
            value: delta,
            requirement: "confidence in (0, 1)",
        });
    }
    Ok(((2.0 / (1.0 - delta)).ln() / (2.0 * count as f64)).sqrt())
}

fn bound_entry(pi_hat: f64, eps: f64) -> f64 {
    if pi_hat > eps {
        eps / (pi_hat - eps)
    } else {
        f64::INFINITY
    }
}

/// Log-space radii b with entries ε(t,s)/(π̂_t(a|s) − ε(t,s)); entries whose
/// estimate does not exceed the radius, or whose state has no visits, are
/// unbounded.
pub fn build_bound_vector(pi_hat: &Policy, counts: &CountTable, delta: f64) -> Result<BoundVector> {
    let (n, m, horizon) = (counts.n, counts.m, counts.horizon);
    if pi_hat.probs.len() != horizon
        || pi_hat.probs.first().map(|p| p.shape()) != Some((m, n))
    {
        return Err(Error::ShapeMismatch {
            context: "policy vs count table".to_string(),
            expected: format!("{horizon} steps of {m}x{n}"),
            got: format!(
                "{} steps of {:?}",
                pi_hat.probs.len(),
                pi_hat.probs.first().map(|p| p.shape())
            ),
        });
    }
    let mn = m * n;
    let mut b = DVector::from_element(horizon * mn, f64::INFINITY);
    for t in 0..horizon {
        for s in 0..n {
            let count = counts.n_ts[t][s];
            if count == 0 {
                continue;
            }
            let eps = epsilon_radius(count, delta)?;
            for a in 0..m {
                let q = FlatIndex { a, s }.flat(n);
                b[t * mn + q] = bound_entry(pi_hat.probs[t][(a, s)], eps);
            }
        }
    }
    BoundVector::new(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{MdpModel, TimeVaryingReward};
    use crate::soft::{sample_trajectories, soft_backward};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn traj(states: &[u32], actions: &[u32]) -> Trajectory {
        Trajectory {
            states: states.to_vec(),
            actions: actions.to_vec(),
        }
    }

    fn random_model(
        rng: &mut ChaCha8Rng,
        n: usize,
        m: usize,
        horizon: usize,
        gamma: f64,
    ) -> MdpModel {
        let transitions = (0..m)
            .map(|_| {
                let mut tr = DMatrix::from_fn(n, n, |_, _| rng.gen_range(0.05..1.0));
                for i in 0..n {
                    let s = tr.row(i).sum();
                    for j in 0..n {
                        tr[(i, j)] /= s;
                    }
                    let resid = 1.0 - tr.row(i).sum();
                    tr[(i, 0)] += resid;
                }
                tr
            })
            .collect();
        let mu0 = DVector::from_element(n, 1.0 / n as f64);
        MdpModel::new(transitions, mu0, gamma, horizon).unwrap()
    }

    #[test]
    fn single_trajectory_gives_point_masses() {
        let set = TrajectorySet {
            trajectories: vec![traj(&[0, 1, 2], &[1, 0])],
            seed: 0,
        };
        let (pi, counts) = estimate_policy(&set, 3, 2, 2).unwrap();
        assert_eq!(pi.probs[0][(1, 0)], 1.0);
        assert_eq!(pi.probs[0][(0, 0)], 0.0);
        assert_eq!(pi.probs[1][(0, 1)], 1.0);
        // unvisited columns are uniform placeholders with zero count
        assert_eq!(pi.probs[0][(0, 2)], 0.5);
        assert_eq!(counts.state_count(0, 2), 0);
        assert_eq!(counts.state_count(0, 0), 1);
        assert_eq!(counts.action_count(0, 1, 0), 1);
    }

    #[test]
    fn opposite_actions_average_to_half() {
        let set = TrajectorySet {
            trajectories: vec![traj(&[0, 1], &[0]), traj(&[0, 0], &[1])],
            seed: 0,
        };
        let (pi, counts) = estimate_policy(&set, 2, 2, 1).unwrap();
        assert_eq!(pi.probs[0][(0, 0)], 0.5);
        assert_eq!(pi.probs[0][(1, 0)], 0.5);
        assert_eq!(counts.state_count(0, 0), 2);
    }

    #[test]
    fn binomial_estimate_concentrates() {
        // 10_000 draws from a (0.7, 0.3) two-action policy in a one-state
        // world; the estimate should be within 0.02 essentially always.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut hits = 0;
        let reps = 200;
        for _ in 0..reps {
            let trajectories: Vec<Trajectory> = (0..10_000)
                .map(|_| {
                    let a = u32::from(!rng.gen_bool(0.7));
                    traj(&[0, 0], &[a])
                })
                .collect();
            let set = TrajectorySet {
                trajectories,
                seed: 0,
            };
            let (pi, _) = estimate_policy(&set, 1, 2, 1).unwrap();
            if (pi.probs[0][(0, 0)] - 0.7).abs() <= 0.02 {
                hits += 1;
            }
        }
        // binomial σ ≈ 0.0046, so 0.02 is > 4σ: ≥ 99.9% of repetitions
        assert!(hits >= reps * 999 / 1000, "{hits}/{reps} within 0.02");
    }

    #[test]
    fn epsilon_radius_formula() {
        // pinned value: count = 50_000, δ = 0.9999
        let eps = epsilon_radius(50_000, 0.9999).unwrap();
        assert!((eps - 0.009952).abs() < 1e-6, "eps = {eps}");
        // quadrupling the count halves the radius
        let e1 = epsilon_radius(500, 0.99).unwrap();
        let e4 = epsilon_radius(2_000, 0.99).unwrap();
        assert!((e4 - e1 / 2.0).abs() < 1e-15);
        // monotone in δ
        assert!(epsilon_radius(100, 0.9).unwrap() < epsilon_radius(100, 0.99).unwrap());
        // error paths
        assert!(epsilon_radius(0, 0.9).is_err());
        assert!(epsilon_radius(10, 1.0).is_err());
        assert!(epsilon_radius(10, 0.0).is_err());
    }

    #[test]
    fn bound_entry_examples() {
        assert!((bound_entry(1.0, 0.1) - 1.0 / 9.0).abs() < 1e-12);
        assert_eq!(bound_entry(0.05, 0.1), f64::INFINITY);
        assert_eq!(bound_entry(0.1, 0.1), f64::INFINITY);
    }

    #[test]
    fn bound_vector_matches_scalar_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let model = random_model(&mut rng, 3, 3, 4, 0.9);
        let reward = TimeVaryingReward::new(
            (0..model.horizon)
                .map(|_| DVector::from_fn(model.mn(), |_, _| rng.gen_range(-1.0..1.0)))
                .collect(),
        )
        .unwrap();
        let sol = soft_backward(&model, &reward).unwrap();
        let set = sample_trajectories(&model, &sol.policy, 2_000, 7).unwrap();
        let (pi_hat, counts) = estimate_policy(&set, model.n, model.m, model.horizon).unwrap();
        let delta = 0.9999;
        let bv = build_bound_vector(&pi_hat, &counts, delta).unwrap();

        // independent scalar loop over every entry
        let mn = model.mn();
        let mut finite = 0;
        for t in 0..model.horizon {
            for a in 0..model.m {
                for s in 0..model.n {
                    let q = a * model.n + s;
                    let count = counts.n_ts[t][s];
                    let expected = if count == 0 {
                        f64::INFINITY
                    } else {
                        let eps =
                            ((2.0f64 / (1.0 - delta)).ln() / (2.0 * count as f64)).sqrt();
                        let p = counts.n_tsa[t][q] as f64 / count as f64;
                        if p > eps {
                            eps / (p - eps)
                        } else {
                            f64::INFINITY
                        }
                    };
                    let got = bv.b[t * mn + q];
                    if expected.is_finite() {
                        finite += 1;
                        assert!((got - expected).abs() < 1e-14, "t={t} a={a} s={s}");
                    } else {
                        assert!(got.is_infinite(), "t={t} a={a} s={s}");
                    }
                }
            }
        }
        assert!(finite > 0);
        assert!(
            (bv.finite_fraction() - finite as f64 / (model.horizon * mn) as f64).abs() < 1e-12
        );
    }

    #[test]
    fn log_deviation_coverage_meets_confidence() {
        // |log π̂ − log π| ≤ ε/(π − ε) should hold with frequency ≥ δ.
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let p = 0.7;
        for &delta in &[0.9, 0.99] {
            for &count in &[100u64, 1000] {
                let eps = epsilon_radius(count, delta).unwrap();
                assert!(p > eps);
                let bound = eps / (p - eps);
                let reps = 500;
                let mut covered = 0;
                for _ in 0..reps {
                    let k = (0..count).filter(|_| rng.gen_bool(p)).count();
                    let hat = k as f64 / count as f64;
                    if hat > 0.0 && (hat.ln() - p.ln()).abs() <= bound {
                        covered += 1;
                    }
                }
                let freq = covered as f64 / reps as f64;
                assert!(
                    freq >= delta,
                    "coverage {freq} < {delta} at count {count}"
                );
            }
        }
    }

    #[test]
    fn state_counts_ignore_which_actions_were_taken() {
        let states = [[0u32, 1, 0], [1, 1, 2], [2, 0, 1]];
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let build = |rng: &mut ChaCha8Rng| {
            let trajectories = states
                .iter()
                .map(|st| {
                    let actions: Vec<u32> = (0..2).map(|_| rng.gen_range(0..3)).collect();
                    traj(st, &actions)
                })
                .collect();
            estimate_policy(
                &TrajectorySet {
                    trajectories,
                    seed: 0,
                },
                3,
                3,
                2,
            )
            .unwrap()
        };
        let (_, c1) = build(&mut rng);
        let (_, c2) = build(&mut rng);
        assert_eq!(c1.n_ts, c2.n_ts);
        assert_ne!(c1.n_tsa, c2.n_tsa); // with overwhelming probability
    }

    #[test]
    fn estimates_and_bounds_tighten_with_more_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let model = random_model(&mut rng, 2, 2, 3, 0.9);
        let reward = TimeVaryingReward::new(
            (0..model.horizon)
                .map(|_| DVector::from_fn(model.mn(), |_, _| rng.gen_range(-1.0..1.0)))
                .collect(),
        )
        .unwrap();
        let sol = soft_backward(&model, &reward).unwrap();

        let stats = |count: usize, seed: u64| {
            let set = sample_trajectories(&model, &sol.policy, count, seed).unwrap();
            let (pi_hat, counts) =
                estimate_policy(&set, model.n, model.m, model.horizon).unwrap();
            let bv = build_bound_vector(&pi_hat, &counts, 0.9999).unwrap();
            let mut dist = 0.0f64;
            for t in 0..model.horizon {
                for s in 0..model.n {
                    if counts.n_ts[t][s] == 0 {
                        continue;
                    }
                    for a in 0..model.m {
                        dist = dist
                            .max((pi_hat.probs[t][(a, s)] - sol.policy.probs[t][(a, s)]).abs());
                    }
                }
            }
            let b_max = bv.b.iter().copied().filter(|v| v.is_finite()).fold(0.0, f64::max);
            (dist, b_max)
        };
        let (d_small, b_small) = stats(100, 41);
        let (d_large, b_large) = stats(10_000, 42);
        assert!(d_large < d_small, "{d_large} !< {d_small}");
        assert!(b_large < b_small, "{b_large} !< {b_small}");
    }

    #[test]
    fn merge_equals_bulk_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let model = random_model(&mut rng, 2, 2, 3, 0.9);
        let reward = TimeVaryingReward::new(
            (0..model.horizon)
                .map(|_| DVector::from_fn(model.mn(), |_, _| rng.gen_range(-1.0..1.0)))
                .collect(),
        )
        .unwrap();
        let sol = soft_backward(&model, &reward).unwrap();
        let set = sample_trajectories(&model, &sol.policy, 50, 9).unwrap();

        let mut bulk = CountTable::new(model.n, model.m, model.horizon);
        for tr in &set.trajectories {
            bulk.accumulate(tr).unwrap();
        }
        let mut left = CountTable::new(model.n, model.m, model.horizon);
        let mut right = CountTable::new(model.n, model.m, model.horizon);
        for (i, tr) in set.trajectories.iter().enumerate() {
            if i % 2 == 0 {
                left.accumulate(tr).unwrap();
            } else {
                right.accumulate(tr).unwrap();
            }
        }
        left.merge(&right).unwrap();
        assert_eq!(left.n_ts, bulk.n_ts);
        assert_eq!(left.n_tsa, bulk.n_tsa);
    }
}
