//! Affine constraint sets over (reward, value) pairs and feasibility oracles.
//!
//! Three families of sets are built here, all of the form
//! lower ≤ A·[r; ν] ≤ upper:
//!
//! * the exact set of all (r, ν) inducing a given policy, with block rows
//!   r_t − E ν_t + γ P ν_{t+1} = log π_t (ν_T pinned to zero);
//! * its truncated time-invariant counterpart over a window [i, j) with one
//!   shared reward block and a fixed boundary value folded into the right
//!   side;
//! * the interval-relaxed variant for estimated policies, where each row is
//!   log π̂ ± b with rows of unbounded radius dropped to (−∞, +∞).
//!
//! `check_feasible` is the oracle the segmentation search queries. Equality
//! systems go through a minimum-norm least-squares solve; interval systems
//! are decided by the elastic phase-1 program min t s.t.
//! lower − t·1 ≤ Ax ≤ upper + t·1. Two shortcuts avoid the simplex when the
//! verdict is already forced: a least-squares midpoint witness (feasibility)
//! and a dual certificate derived from the weighted residual (infeasibility,
//! taken only with a wide safety margin). Both are cross-validated against
//! the full LP in the test suite.

use std::fmt::Write as _;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::lstsq::min_norm_lstsq_auto;
use crate::mdp::{build_phi, build_transition_stack, FlatIndex, MdpModel, Policy};
use crate::simplex::phase_one_interval;
use crate::{Error, Result};

/// Column ranges of the named variable blocks in a constraint system.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VarLayout {
    pub reward_blocks: Vec<Range<usize>>,
    pub nu_blocks: Vec<Range<usize>>,
}

impl VarLayout {
    pub fn cols(&self) -> usize {
        self.reward_blocks
            .iter()
            .chain(self.nu_blocks.iter())
            .map(|r| r.end)
            .max()
            .unwrap_or(0)
    }

    /// Ranges must tile [0, cols) in order: reward blocks, then ν blocks.
    fn validate(&self) -> Result<()> {
        let mut cursor = 0;
        for r in self.reward_blocks.iter().chain(self.nu_blocks.iter()) {
            if r.start != cursor || r.end <= r.start {
                return Err(Error::InvariantViolation(format!(
                    "variable layout does not partition the columns: block {}..{} at cursor {}",
                    r.start, r.end, cursor
                )));
            }
            cursor = r.end;
        }
        Ok(())
    }
}

/// A dense system lower ≤ A·x ≤ upper; equal bounds encode equalities and
/// infinite bounds encode one-sided or vacuous rows.
#[derive(Debug, Clone)]
pub struct ConstraintSet {
    pub a_matrix: DMatrix<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub var_layout: VarLayout,
}

impl ConstraintSet {
    pub fn new(
        a_matrix: DMatrix<f64>,
        lower: DVector<f64>,
        upper: DVector<f64>,
        var_layout: VarLayout,
    ) -> Result<Self> {
        let (rows, cols) = a_matrix.shape();
        if lower.len() != rows || upper.len() != rows {
            return Err(Error::ShapeMismatch {
                context: "constraint bounds".to_string(),
                expected: rows.to_string(),
                got: lower.len().max(upper.len()).to_string(),
            });
        }
        if a_matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "constraint matrix",
                index: 0,
            });
        }
        for i in 0..rows {
            if lower[i].is_nan() || upper[i].is_nan() || lower[i] > upper[i] {
                return Err(Error::InvariantViolation(format!(
                    "bounds out of order at row {i}: [{}, {}]",
                    lower[i], upper[i]
                )));
            }
        }
        var_layout.validate()?;
        if var_layout.cols() != cols {
            return Err(Error::ShapeMismatch {
                context: "variable layout".to_string(),
                expected: cols.to_string(),
                got: var_layout.cols().to_string(),
            });
        }
        Ok(Self {
            a_matrix,
            lower,
            upper,
            var_layout,
        })
    }

    pub fn rows(&self) -> usize {
        self.a_matrix.nrows()
    }

    pub fn cols(&self) -> usize {
        self.a_matrix.ncols()
    }

    /// Largest constraint violation of `x` (zero when feasible).
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        let y = &self.a_matrix * x;
        let mut worst = 0.0f64;
        for i in 0..self.rows() {
            let low = self.lower[i] - y[i];
            let high = y[i] - self.upper[i];
            if low > worst {
                worst = low;
            }
            if high > worst {
                worst = high;
            }
        }
        worst
    }

    fn point(&self, x: DVector<f64>) -> FeasiblePoint {
        let residual = self.max_violation(&x);
        let take = |r: &Range<usize>| x.rows(r.start, r.end - r.start).clone_owned();
        FeasiblePoint {
            r: self.var_layout.reward_blocks.iter().map(take).collect(),
            nu: self.var_layout.nu_blocks.iter().map(take).collect(),
            residual,
        }
    }

    /// Plain-text dump: "rows cols" header, dense matrix rows, then the
    /// lower and upper vectors, one per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} {}", self.rows(), self.cols());
        for i in 0..self.rows() {
            let mut line = String::new();
            for j in 0..self.cols() {
                if j > 0 {
                    line.push(' ');
                }
                let _ = write!(line, "{}", self.a_matrix[(i, j)]);
            }
            let _ = writeln!(out, "{line}");
        }
        for v in [&self.lower, &self.upper] {
            let mut line = String::new();
            for i in 0..self.rows() {
                if i > 0 {
                    line.push(' ');
                }
                let _ = write!(line, "{}", v[i]);
            }
            let _ = writeln!(out, "{line}");
        }
        out
    }
}

/// A witness produced by `check_feasible`, split back into named blocks.
#[derive(Debug, Clone)]
pub struct FeasiblePoint {
    pub r: Vec<DVector<f64>>,
    pub nu: Vec<DVector<f64>>,
    pub residual: f64,
}

impl FeasiblePoint {
    /// Flat variable vector in layout order.
    pub fn flat(&self) -> DVector<f64> {
        let len: usize = self
            .r
            .iter()
            .chain(self.nu.iter())
            .map(|v| v.len())
            .sum();
        let mut x = DVector::zeros(len);
        let mut at = 0;
        for block in self.r.iter().chain(self.nu.iter()) {
            x.rows_mut(at, block.len()).copy_from(block);
            at += block.len();
        }
        x
    }
}

/// Stacks log π_t over the given window of steps into one vector (flat
/// state-action blocks, one per step).
pub fn log_policy_stack(policy: &Policy, range: Range<usize>) -> Result<DVector<f64>> {
    let mn = policy.probs[0].len();
    let mut xi = DVector::zeros(range.len() * mn);
    for (k, t) in range.enumerate() {
        xi.rows_mut(k * mn, mn).copy_from(&policy.log_step(t)?);
    }
    Ok(xi)
}

/// All (r, ν) pairs that induce `policy` exactly: [I Φ_T][r; ν] = Ξ.
pub fn build_exact_set(model: &MdpModel, policy: &Policy) -> Result<ConstraintSet> {
    let (n, mn, horizon) = (model.n, model.mn(), model.horizon);
    if policy.probs.len() != horizon {
        return Err(Error::ShapeMismatch {
            context: "policy horizon".to_string(),
            expected: horizon.to_string(),
            got: policy.probs.len().to_string(),
        });
    }
    let xi = log_policy_stack(policy, 0..horizon)?;
    let phi = build_phi(model, horizon);
    let rows = horizon * mn;
    let mut a = DMatrix::zeros(rows, rows + horizon * n);
    a.view_mut((0, 0), (rows, rows))
        .copy_from(&DMatrix::identity(rows, rows));
    a.view_mut((0, rows), (rows, horizon * n)).copy_from(&phi);
    let layout = VarLayout {
        reward_blocks: (0..horizon).map(|t| t * mn..(t + 1) * mn).collect(),
        nu_blocks: (0..horizon)
            .map(|t| rows + t * n..rows + (t + 1) * n)
            .collect(),
    };
    ConstraintSet::new(a, xi.clone(), xi, layout)
}

/// Truncated time-invariant set over the window [i, j): a single shared
/// reward block must explain every step, with the boundary value treated as
/// data and folded into the right-hand side of the last block row.
pub fn build_invariant_set(
    model: &MdpModel,
    policy: &Policy,
    i: usize,
    j: usize,
    nu_boundary: &DVector<f64>,
) -> Result<ConstraintSet> {
    let (n, mn) = (model.n, model.mn());
    if i >= j || j > model.horizon {
        return Err(Error::Index(format!(
            "window [{i}, {j}) invalid: need 0 <= i < j <= {}",
            model.horizon
        )));
    }
    if nu_boundary.len() != n {
        return Err(Error::ShapeMismatch {
            context: "boundary value".to_string(),
            expected: n.to_string(),
            got: nu_boundary.len().to_string(),
        });
    }
    let steps = j - i;
    let mut xi = log_policy_stack(policy, i..j)?;
    // last block row: r̄ − E ν_{j−1} = ξ_{j−1} − γ P ν_boundary
    let p = build_transition_stack(model);
    let shift = &p * nu_boundary * model.gamma;
    let last = (steps - 1) * mn;
    for q in 0..mn {
        xi[last + q] -= shift[q];
    }

    let phi = build_phi(model, steps);
    let rows = steps * mn;
    let mut a = DMatrix::zeros(rows, mn + steps * n);
    // the shared reward block: identity repeated once per time step
    for t in 0..steps {
        a.view_mut((t * mn, 0), (mn, mn))
            .copy_from(&DMatrix::identity(mn, mn));
    }
    a.view_mut((0, mn), (rows, steps * n)).copy_from(&phi);
    let layout = VarLayout {
        reward_blocks: vec![0..mn],
        nu_blocks: (0..steps)
            .map(|t| mn + t * n..mn + (t + 1) * n)
            .collect(),
    };
    ConstraintSet::new(a, xi.clone(), xi, layout)
}

/// Interval relaxation around an estimated policy: Ξ̂ − b ≤ [I Φ][r;ν] ≤ Ξ̂ + b.
/// Rows with an unbounded radius carry no information and become (−∞, +∞).
pub fn build_robust_set(
    model: &MdpModel,
    pi_hat: &Policy,
    bound_b: &DVector<f64>,
) -> Result<ConstraintSet> {
    let (n, mn, horizon) = (model.n, model.mn(), model.horizon);
    let rows = horizon * mn;
    if bound_b.len() != rows {
        return Err(Error::ShapeMismatch {
            context: "bound vector".to_string(),
            expected: rows.to_string(),
            got: bound_b.len().to_string(),
        });
    }
    if pi_hat.probs.len() != horizon {
        return Err(Error::ShapeMismatch {
            context: "policy horizon".to_string(),
            expected: horizon.to_string(),
            got: pi_hat.probs.len().to_string(),
        });
    }
    let mut lower = DVector::zeros(rows);
    let mut upper = DVector::zeros(rows);
    for t in 0..horizon {
        let probs = &pi_hat.probs[t];
        for a in 0..model.m {
            for s in 0..n {
                let row = t * mn + FlatIndex { a, s }.flat(n);
                let b = bound_b[row];
                if b.is_nan() || b < 0.0 {
                    return Err(Error::BadParameter {
                        name: "bound_b",
                        value: b,
                        requirement: "nonnegative (possibly +inf)",
                    });
                }
                if b.is_finite() {
                    let p = probs[(a, s)];
                    if p <= 0.0 {
                        return Err(Error::InvariantViolation(format!(
                            "finite radius {b} on a zero-probability entry at row {row}"
                        )));
                    }
                    let center = p.ln();
                    lower[row] = center - b;
                    upper[row] = center + b;
                } else {
                    lower[row] = f64::NEG_INFINITY;
                    upper[row] = f64::INFINITY;
                }
            }
        }
    }
    let phi = build_phi(model, horizon);
    let mut a = DMatrix::zeros(rows, rows + horizon * n);
    a.view_mut((0, 0), (rows, rows))
        .copy_from(&DMatrix::identity(rows, rows));
    a.view_mut((0, rows), (rows, horizon * n)).copy_from(&phi);
    let layout = VarLayout {
        reward_blocks: (0..horizon).map(|t| t * mn..(t + 1) * mn).collect(),
        nu_blocks: (0..horizon)
            .map(|t| rows + t * n..rows + (t + 1) * n)
            .collect(),
    };
    ConstraintSet::new(a, lower, upper, layout)
}

/// Time-invariant window system with interval bounds around an estimated
/// policy; the robust-mode counterpart of `build_invariant_set`. Rows whose
/// radius is infinite are vacuous, and the boundary value is folded into
/// both bounds of the last block row.
pub fn build_invariant_interval_set(
    model: &MdpModel,
    pi_hat: &Policy,
    bound_b: &DVector<f64>,
    i: usize,
    j: usize,
    nu_boundary: &DVector<f64>,
) -> Result<ConstraintSet> {
    let (n, mn) = (model.n, model.mn());
    if i >= j || j > model.horizon {
        return Err(Error::Index(format!(
            "window [{i}, {j}) invalid: need 0 <= i < j <= {}",
            model.horizon
        )));
    }
    if nu_boundary.len() != n {
        return Err(Error::ShapeMismatch {
            context: "boundary value".to_string(),
            expected: n.to_string(),
            got: nu_boundary.len().to_string(),
        });
    }
    if bound_b.len() != model.horizon * mn {
        return Err(Error::ShapeMismatch {
            context: "bound vector".to_string(),
            expected: (model.horizon * mn).to_string(),
            got: bound_b.len().to_string(),
        });
    }
    let steps = j - i;
    let rows = steps * mn;
    let p = build_transition_stack(model);
    let shift = &p * nu_boundary * model.gamma;

    let mut lower = DVector::zeros(rows);
    let mut upper = DVector::zeros(rows);
    for (k, t) in (i..j).enumerate() {
        let probs = &pi_hat.probs[t];
        for a in 0..model.m {
            for s in 0..n {
                let q = FlatIndex { a, s }.flat(n);
                let row = k * mn + q;
                let b = bound_b[t * mn + q];
                if b.is_nan() || b < 0.0 {
                    return Err(Error::BadParameter {
                        name: "bound_b",
                        value: b,
                        requirement: "nonnegative (possibly +inf)",
                    });
                }
                if b.is_finite() {
                    let pr = probs[(a, s)];
                    if pr <= 0.0 {
                        return Err(Error::InvariantViolation(format!(
                            "finite radius {b} on a zero-probability entry at step {t}"
                        )));
                    }
                    let mut center = pr.ln();
                    if t == j - 1 {
                        center -= shift[q];
                    }
                    lower[row] = center - b;
                    upper[row] = center + b;
                } else {
                    lower[row] = f64::NEG_INFINITY;
                    upper[row] = f64::INFINITY;
                }
            }
        }
    }

    let phi = build_phi(model, steps);
    let mut a = DMatrix::zeros(rows, mn + steps * n);
    for t in 0..steps {
        a.view_mut((t * mn, 0), (mn, mn))
            .copy_from(&DMatrix::identity(mn, mn));
    }
    a.view_mut((0, mn), (rows, steps * n)).copy_from(&phi);
    let layout = VarLayout {
        reward_blocks: vec![0..mn],
        nu_blocks: (0..steps)
            .map(|t| mn + t * n..mn + (t + 1) * n)
            .collect(),
    };
    ConstraintSet::new(a, lower, upper, layout)
}

/// Max violation of the full equality system by (reward, ν), evaluated
/// block-by-block so the T·m·n × T·(m·n + n) matrix is never materialized.
pub fn exact_membership_violation(
    model: &MdpModel,
    policy: &Policy,
    reward: &crate::mdp::TimeVaryingReward,
    nu: &crate::mdp::ValueFunction,
) -> Result<f64> {
    let (n, horizon) = (model.n, model.horizon);
    if reward.horizon() != horizon || nu.horizon() != horizon {
        return Err(Error::ShapeMismatch {
            context: "membership horizon".to_string(),
            expected: horizon.to_string(),
            got: format!("reward {}, nu {}", reward.horizon(), nu.horizon()),
        });
    }
    let p = build_transition_stack(model);
    let mut worst = 0.0f64;
    for t in 0..horizon {
        let xi = policy.log_step(t)?;
        let shift = &p * &nu.values[t + 1] * model.gamma;
        let r = &reward.values[t];
        let v = &nu.values[t];
        for a in 0..model.m {
            for s in 0..n {
                let q = FlatIndex { a, s }.flat(n);
                let val = r[q] - v[s] + shift[q] - xi[q];
                if val.abs() > worst {
                    worst = val.abs();
                }
            }
        }
    }
    Ok(worst)
}

/// Max violation of the robust interval system by (reward, ν), skipping
/// vacuous rows; the streaming counterpart of `build_robust_set`.
pub fn robust_membership_violation(
    model: &MdpModel,
    pi_hat: &Policy,
    bound_b: &DVector<f64>,
    reward: &crate::mdp::TimeVaryingReward,
    nu: &crate::mdp::ValueFunction,
) -> Result<f64> {
    let (n, mn, horizon) = (model.n, model.mn(), model.horizon);
    if reward.horizon() != horizon || nu.horizon() != horizon {
        return Err(Error::ShapeMismatch {
            context: "membership horizon".to_string(),
            expected: horizon.to_string(),
            got: format!("reward {}, nu {}", reward.horizon(), nu.horizon()),
        });
    }
    if bound_b.len() != horizon * mn {
        return Err(Error::ShapeMismatch {
            context: "bound vector".to_string(),
            expected: (horizon * mn).to_string(),
            got: bound_b.len().to_string(),
        });
    }
    let p = build_transition_stack(model);
    let mut worst = 0.0f64;
    for t in 0..horizon {
        let shift = &p * &nu.values[t + 1] * model.gamma;
        let r = &reward.values[t];
        let v = &nu.values[t];
        let probs = &pi_hat.probs[t];
        for a in 0..model.m {
            for s in 0..n {
                let q = FlatIndex { a, s }.flat(n);
                let b = bound_b[t * mn + q];
                if !b.is_finite() {
                    continue;
                }
                let center = probs[(a, s)].ln();
                let val = r[q] - v[s] + shift[q];
                let viol = (center - b - val).max(val - (center + b));
                if viol > worst {
                    worst = viol;
                }
            }
        }
    }
    Ok(worst)
}

/// Worst finite-radius row violation of |log π − log π̂| ≤ b. This is the
/// certificate-free membership check: it asks whether the policy itself
/// stays inside the interval around the estimate, with no ν to choose.
pub fn log_policy_box_violation(
    pi_hat: &Policy,
    bound_b: &DVector<f64>,
    policy: &Policy,
) -> Result<f64> {
    let horizon = pi_hat.probs.len();
    if policy.probs.len() != horizon {
        return Err(Error::ShapeMismatch {
            context: "policy horizon".to_string(),
            expected: horizon.to_string(),
            got: policy.probs.len().to_string(),
        });
    }
    let (m, n) = pi_hat.probs[0].shape();
    let mn = m * n;
    if bound_b.len() != horizon * mn {
        return Err(Error::ShapeMismatch {
            context: "bound vector".to_string(),
            expected: (horizon * mn).to_string(),
            got: bound_b.len().to_string(),
        });
    }
    let mut worst = 0.0f64;
    for t in 0..horizon {
        for a in 0..m {
            for s in 0..n {
                let q = FlatIndex { a, s }.flat(n);
                let b = bound_b[t * mn + q];
                if !b.is_finite() {
                    continue;
                }
                let dev = (policy.probs[t][(a, s)].ln() - pi_hat.probs[t][(a, s)].ln()).abs();
                worst = worst.max(dev - b);
            }
        }
    }
    Ok(worst)
}

/// Re-certifies a robust-set member with its own soft values.
///
/// A feasible pair (r, ν) found by the solvers uses a free certificate ν, so
/// the reward's *induced* log-policy — which is r + Φν*(r) for the soft
/// values ν*(r), not the certificate — may leave the interval around
/// log π̂. This routine alternates between computing ν*(r) and re-centering
/// r inside the interval bounds evaluated at ν*(r), shrinking the gap until
/// the induced log-policy itself sits in the box (violation ≤ `tol`) or the
/// round budget runs out. `labels` ties groups of timesteps to one shared
/// reward vector (piecewise structure is preserved exactly); `None` leaves
/// every step free. Returns the refined reward, its soft values, and the
/// final violation as measured by [`log_policy_box_violation`].
pub fn refine_robust_reward(
    model: &MdpModel,
    pi_hat: &Policy,
    bound_b: &DVector<f64>,
    reward: &crate::mdp::TimeVaryingReward,
    labels: Option<&[usize]>,
    max_rounds: usize,
    tol: f64,
) -> Result<(crate::mdp::TimeVaryingReward, crate::mdp::ValueFunction, f64)> {
    let (n, mn, horizon) = (model.n, model.mn(), model.horizon);
    if reward.horizon() != horizon || pi_hat.probs.len() != horizon {
        return Err(Error::ShapeMismatch {
            context: "refinement horizon".to_string(),
            expected: horizon.to_string(),
            got: format!("reward {}, policy {}", reward.horizon(), pi_hat.probs.len()),
        });
    }
    if bound_b.len() != horizon * mn {
        return Err(Error::ShapeMismatch {
            context: "bound vector".to_string(),
            expected: (horizon * mn).to_string(),
            got: bound_b.len().to_string(),
        });
    }
    // Group timesteps sharing one reward vector.
    let groups: Vec<Vec<usize>> = match labels {
        Some(l) => {
            if l.len() != horizon {
                return Err(Error::ShapeMismatch {
                    context: "labels".to_string(),
                    expected: horizon.to_string(),
                    got: l.len().to_string(),
                });
            }
            let mut by_label = std::collections::BTreeMap::<usize, Vec<usize>>::new();
            for (t, &g) in l.iter().enumerate() {
                by_label.entry(g).or_default().push(t);
            }
            by_label.into_values().collect()
        }
        None => (0..horizon).map(|t| vec![t]).collect(),
    };
    let p = build_transition_stack(model);
    let mut current = reward.clone();
    let mut rounds = 0;
    loop {
        let sol = crate::soft::soft_backward(model, &current)?;
        let viol = log_policy_box_violation(pi_hat, bound_b, &sol.policy)?;
        if viol <= tol || rounds >= max_rounds {
            return Ok((current, sol.v, viol));
        }
        rounds += 1;
        let shifts: Vec<DVector<f64>> = (0..horizon)
            .map(|t| &p * &sol.v.values[t + 1] * model.gamma)
            .collect();
        for group in &groups {
            for q in 0..mn {
                let FlatIndex { a, s } = FlatIndex::unflatten(q, n);
                let mut lo = f64::NEG_INFINITY;
                let mut hi = f64::INFINITY;
                for &t in group {
                    let b = bound_b[t * mn + q];
                    if !b.is_finite() {
                        continue;
                    }
                    let base = pi_hat.probs[t][(a, s)].ln() + sol.v.values[t][s] - shifts[t][q];
                    lo = lo.max(base - b);
                    hi = hi.min(base + b);
                }
                let old = current.values[group[0]][q];
                // When the boxes cross, the midpoint minimizes the worst
                // overshoot for this coordinate.
                let new = if lo <= hi { old.clamp(lo, hi) } else { 0.5 * (lo + hi) };
                for &t in group {
                    current.values[t][q] = new;
                }
            }
        }
    }
}

/// Iteration budget for the phase-1 simplex, sized to the standard form.
fn lp_iteration_limit(rows: usize, cols: usize) -> usize {
    10_000 + 10 * (2 * rows + cols)
}

/// Decides whether the set is nonempty at tolerance `tol`.
///
/// Equality systems are decided by a minimum-norm least-squares solve
/// (feasible iff the max residual is ≤ tol). Interval systems are decided by
/// the elastic phase-1 program (feasible iff its optimum is ≤ tol); a
/// midpoint least-squares witness and a weighted-residual lower bound decide
/// clear-cut instances without entering the simplex, and anything within the
/// safety margin of the threshold falls through to the full LP.
pub fn check_feasible(cs: &ConstraintSet, tol: f64) -> Result<Option<FeasiblePoint>> {
    if !(tol >= 0.0) {
        return Err(Error::BadParameter {
            name: "tol",
            value: tol,
            requirement: ">= 0",
        });
    }
    let rows = cs.rows();
    let mut active = Vec::with_capacity(rows);
    let mut all_equalities = true;
    for i in 0..rows {
        let (l, u) = (cs.lower[i], cs.upper[i]);
        if l.is_infinite() && u.is_infinite() {
            continue;
        }
        active.push(i);
        if !(l == u) {
            all_equalities = false;
        }
    }
    if active.is_empty() {
        return Ok(Some(cs.point(DVector::zeros(cs.cols()))));
    }

    if all_equalities {
        let (a, rhs) = gather_rows(cs, &active, |i| cs.lower[i]);
        let sol = min_norm_lstsq_auto(&a, &rhs)?;
        let point = cs.point(sol.x);
        return Ok(if point.residual <= tol { Some(point) } else { None });
    }

    // Interval system. Weighted midpoint least squares: rows with two finite
    // bounds, each scaled by the reciprocal of its width so that narrow rows
    // dominate the fit.
    let two_sided: Vec<usize> = active
        .iter()
        .copied()
        .filter(|&i| cs.lower[i].is_finite() && cs.upper[i].is_finite())
        .collect();
    if !two_sided.is_empty() {
        let widths: Vec<f64> = two_sided.iter().map(|&i| cs.upper[i] - cs.lower[i]).collect();
        let floor = {
            let mut w = widths.clone();
            w.sort_by(|a, b| a.partial_cmp(b).unwrap());
            1e-6 * (1.0 + w[w.len() / 2])
        };
        let mut a = DMatrix::zeros(two_sided.len(), cs.cols());
        let mut m = DVector::zeros(two_sided.len());
        let mut weights = Vec::with_capacity(two_sided.len());
        for (k, &i) in two_sided.iter().enumerate() {
            let c = 1.0 / (widths[k] + floor);
            weights.push(c);
            for j in 0..cs.cols() {
                a[(k, j)] = c * cs.a_matrix[(i, j)];
            }
            m[k] = c * 0.5 * (cs.lower[i] + cs.upper[i]);
        }
        let sol = min_norm_lstsq_auto(&a, &m)?;
        let witness = cs.point(sol.x.clone());
        if witness.residual <= tol {
            return Ok(Some(witness));
        }
        // Lower bound on the phase-1 optimum from the weighted residual ρ:
        // ρᵀ(Ãx − m̃) is x-independent at the least-squares solution, so any
        // x meeting |Ã_i x − m̃_i| ≤ c_i(w_i/2 + t) forces
        //   t ≥ (‖ρ‖² − Σ|ρ_i| c_i w_i/2) / Σ|ρ_i| c_i.
        // The bound is exact only up to the accuracy of Ãᵀρ ≈ 0, so it is
        // trusted only with a wide margin; anything closer goes to the LP.
        let rho = &a * &sol.x - &m;
        let rho_sq = rho.norm_squared();
        let mut denom = 0.0;
        let mut width_term = 0.0;
        for (k, &c) in weights.iter().enumerate() {
            let az = rho[k].abs();
            denom += az * c;
            width_term += az * c * widths[k] / 2.0;
        }
        if denom > 0.0 {
            let t_lb = (rho_sq - width_term) / denom;
            let m_scale = m
                .iter()
                .zip(&weights)
                .map(|(v, c)| (v / c).abs())
                .fold(0.0, f64::max);
            let margin = 10.0 * tol + 1e-6 * (1.0 + m_scale);
            if t_lb > margin {
                return Ok(None);
            }
        }
    }

    let (a, _) = gather_rows(cs, &active, |_| 0.0);
    let lower = DVector::from_iterator(active.len(), active.iter().map(|&i| cs.lower[i]));
    let upper = DVector::from_iterator(active.len(), active.iter().map(|&i| cs.upper[i]));
    let limit = lp_iteration_limit(active.len(), cs.cols());
    let out = phase_one_interval(&a, &lower, &upper, limit)?;
    if out.objective <= tol {
        Ok(Some(cs.point(out.x)))
    } else {
        Ok(None)
    }
}

fn gather_rows(
    cs: &ConstraintSet,
    idx: &[usize],
    rhs_of: impl Fn(usize) -> f64,
) -> (DMatrix<f64>, DVector<f64>) {
    let mut a = DMatrix::zeros(idx.len(), cs.cols());
    let mut rhs = DVector::zeros(idx.len());
    for (k, &i) in idx.iter().enumerate() {
        for j in 0..cs.cols() {
            a[(k, j)] = cs.a_matrix[(i, j)];
        }
        rhs[k] = rhs_of(i);
    }
    (a, rhs)
}
