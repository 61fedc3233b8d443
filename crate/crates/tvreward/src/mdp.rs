//! Finite-horizon MDP model, canonical vectorization conventions, and the
//! structured matrices E, P, Φ used by the reward feasible sets.
//!
//! Every vector over state-action pairs uses the action-major, state-minor
//! layout of [`FlatIndex`]: entry `a·n + s` holds the value for action `a`
//! in state `s`. All modules share this convention; none do their own index
//! arithmetic.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Tolerance for probability-vector validation at construction time.
/// Inputs failing it are rejected, never renormalized.
pub const STOCHASTIC_TOL: f64 = 1e-12;

/// Finite-horizon MDP: states 0..n, actions 0..m, dense per-action
/// transition matrices, initial distribution, discount, horizon.
#[derive(Debug, Clone)]
pub struct MdpModel {
    pub n: usize,
    pub m: usize,
    /// `transitions[a][(i, j)]` = probability of moving to state j when
    /// taking action a in state i.
    pub transitions: Vec<DMatrix<f64>>,
    pub mu0: DVector<f64>,
    pub gamma: f64,
    /// Horizon T: rewards live on t = 0..T-1.
    pub horizon: usize,
}

impl MdpModel {
    pub fn new(
        transitions: Vec<DMatrix<f64>>,
        mu0: DVector<f64>,
        gamma: f64,
        horizon: usize,
    ) -> Result<Self> {
        let m = transitions.len();
        if m == 0 {
            return Err(Error::BadParameter {
                name: "m",
                value: 0.0,
                requirement: "at least one action",
            });
        }
        let n = transitions[0].nrows();
        if n == 0 {
            return Err(Error::BadParameter {
                name: "n",
                value: 0.0,
                requirement: "at least one state",
            });
        }
        for (a, tr) in transitions.iter().enumerate() {
            if tr.nrows() != n || tr.ncols() != n {
                return Err(Error::ShapeMismatch {
                    context: format!("transition matrix for action {a}"),
                    expected: format!("{n}x{n}"),
                    got: format!("{}x{}", tr.nrows(), tr.ncols()),
                });
            }
            for i in 0..n {
                let mut sum = 0.0;
                for j in 0..n {
                    let p = tr[(i, j)];
                    if p < 0.0 {
                        return Err(Error::NegativeProbability {
                            what: "transition matrix",
                            index: i * n + j,
                            value: p,
                        });
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > STOCHASTIC_TOL {
                    return Err(Error::NotStochastic {
                        what: "transition matrix",
                        index: a * n + i,
                        sum,
                        tol: STOCHASTIC_TOL,
                    });
                }
            }
        }
        if mu0.len() != n {
            return Err(Error::ShapeMismatch {
                context: "initial distribution mu0".to_string(),
                expected: format!("length {n}"),
                got: format!("length {}", mu0.len()),
            });
        }
        for (i, &p) in mu0.iter().enumerate() {
            if p < 0.0 {
                return Err(Error::NegativeProbability {
                    what: "mu0",
                    index: i,
                    value: p,
                });
            }
        }
        let s: f64 = mu0.sum();
        if (s - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::NotStochastic {
                what: "mu0",
                index: 0,
                sum: s,
                tol: STOCHASTIC_TOL,
            });
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::BadParameter {
                name: "gamma",
                value: gamma,
                requirement: "0 <= gamma <= 1",
            });
        }
        if horizon == 0 {
            return Err(Error::BadParameter {
                name: "horizon",
                value: 0.0,
                requirement: "T >= 1",
            });
        }
        Ok(MdpModel {
            n,
            m,
            transitions,
            mu0,
            gamma,
            horizon,
        })
    }

    /// Number of state-action pairs m·n.
    pub fn mn(&self) -> usize {
        self.m * self.n
    }
}

/// Action-major, state-minor flat index over state-action pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlatIndex {
    pub a: usize,
    pub s: usize,
}

impl FlatIndex {
    pub fn flatten(a: usize, s: usize, n: usize) -> usize {
        a * n + s
    }

    pub fn unflatten(flat: usize, n: usize) -> FlatIndex {
        FlatIndex {
            a: flat / n,
            s: flat % n,
        }
    }

    pub fn flat(&self, n: usize) -> usize {
        Self::flatten(self.a, self.s, n)
    }
}

/// Time-varying reward: one length-m·n vector per timestep in FlatIndex
/// layout.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeVaryingReward {
    pub values: Vec<DVector<f64>>,
}

impl TimeVaryingReward {
    pub fn new(values: Vec<DVector<f64>>) -> Result<Self> {
        for (t, v) in values.iter().enumerate() {
            if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    what: "reward",
                    index: t * v.len() + i,
                });
            }
        }
        Ok(TimeVaryingReward { values })
    }

    /// Constant-in-time reward built from a single step vector.
    pub fn constant(step: DVector<f64>, horizon: usize) -> Result<Self> {
        Self::new(vec![step; horizon])
    }

    pub fn horizon(&self) -> usize {
        self.values.len()
    }

    /// Max-norm of r_{t+1} - r_t.
    pub fn step_change(&self, t: usize) -> f64 {
        (&self.values[t + 1] - &self.values[t]).abs().max()
    }
}

/// Time-indexed policy: table t has shape m×n, column s holding the action
/// distribution π_t(·|s).
#[derive(Debug, Clone)]
pub struct Policy {
    pub probs: Vec<DMatrix<f64>>,
}

impl Policy {
    pub fn new(probs: Vec<DMatrix<f64>>) -> Result<Self> {
        for (t, table) in probs.iter().enumerate() {
            let (m, n) = table.shape();
            for s in 0..n {
                let mut sum = 0.0;
                for a in 0..m {
                    let p = table[(a, s)];
                    if p < 0.0 {
                        return Err(Error::NegativeProbability {
                            what: "policy",
                            index: t * m * n + a * n + s,
                            value: p,
                        });
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > STOCHASTIC_TOL {
                    return Err(Error::NotStochastic {
                        what: "policy",
                        index: t * n + s,
                        sum,
                        tol: STOCHASTIC_TOL,
                    });
                }
            }
        }
        Ok(Policy { probs })
    }

    pub fn horizon(&self) -> usize {
        self.probs.len()
    }

    /// True if every entry is strictly positive (exact MaxEnt policies are).
    pub fn strictly_positive(&self) -> bool {
        self.probs
            .iter()
            .all(|table| table.iter().all(|&p| p > 0.0))
    }

    /// log π_t stacked in FlatIndex order; errors on zero entries.
    pub fn log_step(&self, t: usize) -> Result<DVector<f64>> {
        let table = &self.probs[t];
        let (m, n) = table.shape();
        let mut out = DVector::zeros(m * n);
        for a in 0..m {
            for s in 0..n {
                let p = table[(a, s)];
                if p <= 0.0 {
                    return Err(Error::ZeroPolicyEntry { t, a, s });
                }
                out[FlatIndex::flatten(a, s, n)] = p.ln();
            }
        }
        Ok(out)
    }
}

/// Soft state values ν_0..ν_T with ν_T pinned to the zero vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction {
    pub values: Vec<DVector<f64>>,
}

impl ValueFunction {
    pub fn new(values: Vec<DVector<f64>>) -> Result<Self> {
        let last = values.last().ok_or(Error::BadParameter {
            name: "values",
            value: 0.0,
            requirement: "at least the terminal entry",
        })?;
        if last.iter().any(|&x| x != 0.0) {
            return Err(Error::InvariantViolation(
                "terminal value nu_T must be exactly zero".to_string(),
            ));
        }
        Ok(ValueFunction { values })
    }

    /// All-zero value function for horizon T over n states.
    pub fn zero(n: usize, horizon: usize) -> Self {
        ValueFunction {
            values: vec![DVector::zeros(n); horizon + 1],
        }
    }

    pub fn horizon(&self) -> usize {
        self.values.len() - 1
    }
}

/// Stacks the transposed-row transition structure of Eq-style reward sets:
/// row (a·n + s) of the result is row s of the transition matrix for a.
pub fn build_transition_stack(model: &MdpModel) -> DMatrix<f64> {
    let (n, m) = (model.n, model.m);
    let mut p = DMatrix::zeros(m * n, n);
    for a in 0..m {
        for s in 0..n {
            let flat = FlatIndex::flatten(a, s, n);
            for j in 0..n {
                p[(flat, j)] = model.transitions[a][(s, j)];
            }
        }
    }
    p
}

/// E = 1_m ⊗ I_n: maps a per-state vector to its copy at every action.
pub fn build_e(m: usize, n: usize) -> DMatrix<f64> {
    let mut e = DMatrix::zeros(m * n, n);
    for a in 0..m {
        for s in 0..n {
            e[(FlatIndex::flatten(a, s, n), s)] = 1.0;
        }
    }
    e
}

/// Block-bidiagonal Φ_k: −E on the diagonal, γP on the superdiagonal, and a
/// bare −E in the final block row (the terminal value is pinned to zero).
pub fn build_phi(model: &MdpModel, k: usize) -> DMatrix<f64> {
    let (n, mn) = (model.n, model.mn());
    let e = build_e(model.m, n);
    let p = build_transition_stack(model);
    let mut phi = DMatrix::zeros(k * mn, k * n);
    for i in 0..k {
        for r in 0..mn {
            for c in 0..n {
                phi[(i * mn + r, i * n + c)] = -e[(r, c)];
                if i + 1 < k {
                    phi[(i * mn + r, (i + 1) * n + c)] = model.gamma * p[(r, c)];
                }
            }
        }
    }
    phi
}
