//! Minimally-switching reward recovery by greedy interval partitioning.
//!
//! Works backward from the horizon, extending each candidate interval as far
//! left as a single time-invariant reward stays feasible and bisecting to
//! find the exact step where feasibility breaks. The returned switch count
//! is provably minimal, and the per-interval rewards assemble into a member
//! of the exact (or robust) constraint set.
//!
//! The bisection state machine is implemented verbatim from the pseudocode
//! it is proved correct for, including the l = −1 sentinel (the window
//! starting at −1 is empty by convention) and floor division for the
//! midpoint, which is what lets l + u = −1 terminate the loop.

use nalgebra::DVector;

use crate::mdp::{MdpModel, Policy, TimeVaryingReward, ValueFunction};
use crate::sets::{
    build_invariant_interval_set, build_invariant_set, check_feasible, exact_membership_violation,
    robust_membership_violation, FeasiblePoint,
};
use crate::{Error, Result};

/// Default max-norm threshold below which a reward step change counts as zero.
pub const SWITCH_ZERO_TOL: f64 = 1e-6;

/// Absolute slack allowed when re-verifying cached witnesses and the final
/// assembled system; covers re-evaluation rounding on top of the oracle tol.
const REVERIFY_SLACK: f64 = 1e-8;

/// What the partitioning algorithm matches against.
#[derive(Clone, Copy)]
pub enum PartitionTarget<'a> {
    /// Exactly known policy: equality constraints.
    Exact(&'a Policy),
    /// Estimated policy with per-row log-space radii: interval constraints.
    Robust {
        pi_hat: &'a Policy,
        bound_b: &'a DVector<f64>,
    },
}

/// A segmentation of [0, T) into maximal time-invariant intervals, with the
/// reward of each interval and the value function certifying membership.
#[derive(Debug, Clone)]
pub struct Partition {
    /// Interval start times other than 0, strictly increasing, in (0, T).
    pub switch_times: Vec<usize>,
    /// One reward vector per interval, earliest interval first.
    pub interval_rewards: Vec<DVector<f64>>,
    /// ν_t for t = 0..T, with ν_T = 0.
    pub boundary_values: ValueFunction,
}

impl Partition {
    pub fn new(
        switch_times: Vec<usize>,
        interval_rewards: Vec<DVector<f64>>,
        boundary_values: ValueFunction,
    ) -> Result<Self> {
        let horizon = boundary_values.horizon();
        for (k, &t) in switch_times.iter().enumerate() {
            let ok = t > 0 && t < horizon && (k == 0 || switch_times[k - 1] < t);
            if !ok {
                return Err(Error::Index(format!(
                    "switch times must be strictly increasing within (0, {horizon}); got {switch_times:?}"
                )));
            }
        }
        if interval_rewards.len() != switch_times.len() + 1 {
            return Err(Error::ShapeMismatch {
                context: "interval rewards".to_string(),
                expected: (switch_times.len() + 1).to_string(),
                got: interval_rewards.len().to_string(),
            });
        }
        Ok(Self {
            switch_times,
            interval_rewards,
            boundary_values,
        })
    }

    /// Interval boundaries 0 = b_0 < b_1 < … < b_K = T.
    pub fn boundaries(&self, horizon: usize) -> Vec<usize> {
        let mut b = Vec::with_capacity(self.switch_times.len() + 2);
        b.push(0);
        b.extend_from_slice(&self.switch_times);
        b.push(horizon);
        b
    }

    /// Step labels 0..K for adjusted-Rand comparison against a reference.
    pub fn labels(&self, horizon: usize) -> Vec<usize> {
        let mut labels = vec![0; horizon];
        for (t, l) in labels.iter_mut().enumerate() {
            *l = self.switch_times.iter().filter(|&&s| s <= t).count();
        }
        labels
    }
}

struct Cached {
    point: FeasiblePoint,
    start: usize,
    tau: usize,
}

fn build_window(
    model: &MdpModel,
    target: PartitionTarget<'_>,
    i: usize,
    j: usize,
    nu_boundary: &DVector<f64>,
) -> Result<crate::sets::ConstraintSet> {
    match target {
        PartitionTarget::Exact(policy) => build_invariant_set(model, policy, i, j, nu_boundary),
        PartitionTarget::Robust { pi_hat, bound_b } => {
            build_invariant_interval_set(model, pi_hat, bound_b, i, j, nu_boundary)
        }
    }
}

/// Greedy interval partitioning with bisection. Returns the minimal-switch
/// segmentation whose assembled reward (see `assemble_reward`) together with
/// the returned boundary values satisfies the target constraint system
/// within `tol`.
pub fn greedy_partition(
    model: &MdpModel,
    target: PartitionTarget<'_>,
    tol: f64,
) -> Result<Partition> {
    greedy_partition_counted(model, target, tol).map(|(p, _)| p)
}

/// Same as `greedy_partition`, also reporting the number of feasibility
/// oracle queries (one per bisection step; O(k log T) in total).
pub(crate) fn greedy_partition_counted(
    model: &MdpModel,
    target: PartitionTarget<'_>,
    tol: f64,
) -> Result<(Partition, usize)> {
    let horizon = model.horizon as i64;
    let n = model.n;
    let mut v: Vec<DVector<f64>> = vec![DVector::zeros(n); model.horizon + 1];
    // built back-to-front; reversed before returning
    let mut switches_rev: Vec<usize> = Vec::new();
    let mut rewards_rev: Vec<DVector<f64>> = Vec::new();

    let (mut l, mut u, mut j, mut tau) = (-1i64, horizon, horizon - 1, horizon);
    let mut cache: Option<Cached> = None;
    let mut oracle_calls = 0usize;

    let commit = |cache: &mut Option<Cached>,
                      v: &mut Vec<DVector<f64>>,
                      switches_rev: &mut Vec<usize>,
                      rewards_rev: &mut Vec<DVector<f64>>,
                      start: usize,
                      tau: usize,
                      record_switch: bool|
     -> Result<()> {
        let c = cache.take().ok_or_else(|| {
            Error::InvariantViolation(format!(
                "no feasible witness for interval [{start}, {tau}); a single-step window \
                 must have been reported infeasible"
            ))
        })?;
        if c.start != start || c.tau != tau {
            return Err(Error::InvariantViolation(format!(
                "cached witness covers [{}, {}) but [{start}, {tau}) is being committed",
                c.start, c.tau
            )));
        }
        if c.point.residual > tol + REVERIFY_SLACK {
            return Err(Error::InvariantViolation(format!(
                "cached witness residual {} exceeds tolerance {tol}",
                c.point.residual
            )));
        }
        if record_switch {
            switches_rev.push(start);
        }
        rewards_rev.push(c.point.r[0].clone());
        for (offset, t) in (start..tau).enumerate() {
            v[t] = c.point.nu[offset].clone();
        }
        Ok(())
    };

    while j >= 0 {
        let set = build_window(model, target, j as usize, tau as usize, &v[tau as usize])?;
        oracle_calls += 1;
        match check_feasible(&set, tol)? {
            Some(point) => {
                u = j;
                cache = Some(Cached {
                    point,
                    start: j as usize,
                    tau: tau as usize,
                });
            }
            None => {
                l = j;
                if u == l + 1 {
                    commit(
                        &mut cache,
                        &mut v,
                        &mut switches_rev,
                        &mut rewards_rev,
                        u as usize,
                        tau as usize,
                        true,
                    )?;
                    tau = u;
                    l = -1;
                }
            }
        }
        j = (l + u).div_euclid(2);
    }
    commit(
        &mut cache,
        &mut v,
        &mut switches_rev,
        &mut rewards_rev,
        0,
        tau as usize,
        false,
    )?;

    switches_rev.reverse();
    rewards_rev.reverse();
    let boundary_values = ValueFunction::new(v)?;
    let partition = Partition::new(switches_rev, rewards_rev, boundary_values)?;

    // Full-system re-verification of the assembled output.
    let assembled = assemble_reward(&partition, model.horizon)?;
    let worst = match target {
        PartitionTarget::Exact(policy) => {
            exact_membership_violation(model, policy, &assembled, &partition.boundary_values)?
        }
        PartitionTarget::Robust { pi_hat, bound_b } => robust_membership_violation(
            model,
            pi_hat,
            bound_b,
            &assembled,
            &partition.boundary_values,
        )?,
    };
    if worst > tol + REVERIFY_SLACK {
        return Err(Error::InvariantViolation(format!(
            "assembled reward violates the target system by {worst} (tolerance {tol})"
        )));
    }
    Ok((partition, oracle_calls))
}

/// Piecewise-constant expansion of a partition over `horizon` steps.
pub fn assemble_reward(p: &Partition, horizon: usize) -> Result<TimeVaryingReward> {
    if p.boundary_values.horizon() != horizon {
        return Err(Error::ShapeMismatch {
            context: "partition horizon".to_string(),
            expected: horizon.to_string(),
            got: p.boundary_values.horizon().to_string(),
        });
    }
    let bounds = p.boundaries(horizon);
    let mut values = Vec::with_capacity(horizon);
    for k in 0..p.interval_rewards.len() {
        for _ in bounds[k]..bounds[k + 1] {
            values.push(p.interval_rewards[k].clone());
        }
    }
    TimeVaryingReward::new(values)
}

/// Number of steps t with ‖r_{t+1} − r_t‖_∞ above `zero_tol`.
pub fn count_switches(reward: &TimeVaryingReward, zero_tol: f64) -> usize {
    (1..reward.horizon())
        .filter(|&t| (&reward.values[t] - &reward.values[t - 1]).amax() > zero_tol)
        .count()
}
