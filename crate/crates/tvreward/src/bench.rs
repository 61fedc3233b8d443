//! Experiment infrastructure: gridworld construction (wind, walls, sticky
//! cells), random generators for piecewise-constant and feature-based
//! rewards, the Adjusted Rand Index for comparing recovered switch
//! partitions, and the transfer scoring protocol.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::mdp::{MdpModel, TimeVaryingReward};
use crate::soft::{mean_action_loglik, soft_backward, TrajectorySet};
use crate::{Error, Result};

/// Action indices used by every gridworld: up, down, left, right, stay.
pub const GRID_ACTIONS: [&str; 5] = ["up", "down", "left", "right", "stay"];

/// Named cells distinguished in the feature-based experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Landmarks {
    pub home: usize,
    pub water: usize,
}

/// Gridworld description: cells are indexed row-major (cell = row·width +
/// col, row 0 at the top); walls are undirected edges between adjacent
/// cells; sticky cells keep the agent in place with probability 0.8.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub wind_prob: f64,
    pub walls: Vec<(usize, usize)>,
    pub sticky_cells: Vec<usize>,
    pub landmarks: Landmarks,
}

impl GridSpec {
    /// Wall-free grid with default landmarks: home in the top-left corner,
    /// water in the bottom row's middle column.
    pub fn open(width: usize, height: usize, wind_prob: f64) -> Self {
        GridSpec {
            width,
            height,
            wind_prob,
            walls: Vec::new(),
            sticky_cells: Vec::new(),
            landmarks: Landmarks {
                home: 0,
                water: (height.saturating_sub(1)) * width + width / 2,
            },
        }
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    pub fn cell(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::BadParameter {
                name: "grid dims",
                value: (self.width * self.height) as f64,
                requirement: "width and height positive",
            });
        }
        if !(0.0..1.0).contains(&self.wind_prob) {
            return Err(Error::BadParameter {
                name: "wind_prob",
                value: self.wind_prob,
                requirement: "0 <= p_w < 1",
            });
        }
        let n = self.cells();
        for &(a, b) in &self.walls {
            if a >= n || b >= n {
                return Err(Error::Index(format!(
                    "wall ({a}, {b}) references a cell outside the {n}-cell grid"
                )));
            }
            let (ra, ca) = (a / self.width, a % self.width);
            let (rb, cb) = (b / self.width, b % self.width);
            let dist = ra.abs_diff(rb) + ca.abs_diff(cb);
            if dist != 1 {
                return Err(Error::Index(format!(
                    "wall ({a}, {b}) does not join adjacent cells"
                )));
            }
        }
        for &s in &self.sticky_cells {
            if s >= n {
                return Err(Error::Index(format!(
                    "sticky cell {s} outside the {n}-cell grid"
                )));
            }
        }
        for lm in [self.landmarks.home, self.landmarks.water] {
            if lm >= n {
                return Err(Error::Index(format!(
                    "landmark {lm} outside the {n}-cell grid"
                )));
            }
        }
        Ok(())
    }

    fn blocked(&self, a: usize, b: usize) -> bool {
        self.walls.contains(&(a, b)) || self.walls.contains(&(b, a))
    }

    /// Destination of a single cardinal step; walls and the grid boundary
    /// redirect the move to staying in place.
    fn step(&self, cell: usize, direction: usize) -> usize {
        let (row, col) = (cell / self.width, cell % self.width);
        let target = match direction {
            0 if row > 0 => Some(self.cell(row - 1, col)),
            1 if row + 1 < self.height => Some(self.cell(row + 1, col)),
            2 if col > 0 => Some(self.cell(row, col - 1)),
            3 if col + 1 < self.width => Some(self.cell(row, col + 1)),
            _ => None,
        };
        match target {
            Some(t) if !self.blocked(cell, t) => t,
            _ => cell,
        }
    }
}

/// Timestep-to-interval assignment; a nondecreasing step function.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledPartition {
    pub labels: Vec<usize>,
}

impl LabeledPartition {
    pub fn new(labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::BadParameter {
                name: "labels",
                value: 0.0,
                requirement: "at least one timestep",
            });
        }
        if labels.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Index(
                "labels must be a nondecreasing step function".to_string(),
            ));
        }
        Ok(LabeledPartition { labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_intervals(&self) -> usize {
        let mut count = 1;
        for w in self.labels.windows(2) {
            if w[1] != w[0] {
                count += 1;
            }
        }
        count
    }
}

/// Builds the 5-action gridworld MDP. The intended move lands with
/// probability 1 − p_w; with probability p_w the wind pushes one step in a
/// uniformly chosen cardinal direction (p_w/4 each, including the intended
/// one). Moves into walls or off the grid stay in place. Sticky cells stay
/// with probability 0.8 and follow the normal rule with the remaining 0.2.
pub fn make_gridworld(spec: &GridSpec, gamma: f64, horizon: usize) -> Result<MdpModel> {
    spec.validate()?;
    let n = spec.cells();
    let p_w = spec.wind_prob;
    let mut transitions = Vec::with_capacity(5);
    for action in 0..5usize {
        let mut tr = DMatrix::zeros(n, n);
        for cell in 0..n {
            let intended = if action < 4 { spec.step(cell, action) } else { cell };
            tr[(cell, intended)] += 1.0 - p_w;
            for direction in 0..4 {
                tr[(cell, spec.step(cell, direction))] += p_w / 4.0;
            }
            if spec.sticky_cells.contains(&cell) {
                for j in 0..n {
                    tr[(cell, j)] *= 0.2;
                }
                tr[(cell, cell)] += 0.8;
            }
        }
        transitions.push(tr);
    }
    let mu0 = DVector::from_element(n, 1.0 / n as f64);
    MdpModel::new(transitions, mu0, gamma, horizon)
}

/// Indicator feature columns: feature k is 1 on cell `cells[k]` under every
/// action and 0 elsewhere.
pub fn indicator_features(n: usize, m: usize, cells: &[usize]) -> Result<DMatrix<f64>> {
    let mut u = DMatrix::zeros(m * n, cells.len());
    for (k, &c) in cells.iter().enumerate() {
        if c >= n {
            return Err(Error::Index(format!(
                "indicator cell {c} outside the {n}-state space"
            )));
        }
        for a in 0..m {
            u[(a * n + c, k)] = 1.0;
        }
    }
    Ok(u)
}

/// Piecewise-constant reward with k switches placed uniformly at random:
/// the first interval is U[0,1]^{mn} and interval i adds a U[0,β_i]^{mn}
/// perturbation, with β_i linearly spaced across `beta_range`.
pub fn random_piecewise_reward(
    mn: usize,
    horizon: usize,
    k: usize,
    beta_range: (f64, f64),
    seed: u64,
) -> Result<(TimeVaryingReward, LabeledPartition)> {
    if horizon == 0 || mn == 0 {
        return Err(Error::BadParameter {
            name: "dims",
            value: (mn * horizon) as f64,
            requirement: "mn and horizon positive",
        });
    }
    if k > horizon - 1 {
        return Err(Error::BadParameter {
            name: "k",
            value: k as f64,
            requirement: "at most T - 1 switches",
        });
    }
    if !(beta_range.0 >= 0.0 && beta_range.1 >= beta_range.0) {
        return Err(Error::BadParameter {
            name: "beta_range",
            value: beta_range.0,
            requirement: "0 <= low <= high",
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Partial Fisher-Yates over {1..T−1}: k distinct switch times.
    let mut candidates: Vec<usize> = (1..horizon).collect();
    let mut switches = Vec::with_capacity(k);
    for i in 0..k {
        let j = rng.gen_range(i..candidates.len());
        candidates.swap(i, j);
        switches.push(candidates[i]);
    }
    switches.sort_unstable();

    let mut current = DVector::from_fn(mn, |_, _| rng.gen_range(0.0..1.0));
    let mut values = Vec::with_capacity(horizon);
    let mut labels = vec![0usize; horizon];
    let mut interval = 0usize;
    for t in 0..horizon {
        if interval < switches.len() && t == switches[interval] {
            let beta = if k <= 1 {
                beta_range.0
            } else {
                beta_range.0
                    + interval as f64 * (beta_range.1 - beta_range.0) / (k as f64 - 1.0)
            };
            current += DVector::from_fn(mn, |_, _| rng.gen_range(0.0..=beta));
            interval += 1;
        }
        labels[t] = interval;
        values.push(current.clone());
    }
    Ok((
        TimeVaryingReward::new(values)?,
        LabeledPartition::new(labels)?,
    ))
}

/// Feature-based reward whose weights follow a Gaussian random walk:
/// α_0 ~ N(0, I), α_{t+1} = α_t + N(0, σ²I), r_t = u_basis·α_t. Returns the
/// reward together with the K×T weight matrix.
pub fn random_walk_feature_reward(
    u_basis: &DMatrix<f64>,
    horizon: usize,
    sigma: f64,
    seed: u64,
) -> Result<(TimeVaryingReward, DMatrix<f64>)> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::BadParameter {
            name: "sigma",
            value: sigma,
            requirement: "positive and finite",
        });
    }
    if horizon == 0 || u_basis.ncols() == 0 {
        return Err(Error::BadParameter {
            name: "dims",
            value: horizon as f64,
            requirement: "horizon and feature count positive",
        });
    }
    let k = u_basis.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut alpha = DVector::from_fn(k, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut weights = DMatrix::zeros(k, horizon);
    let mut values = Vec::with_capacity(horizon);
    for t in 0..horizon {
        weights.set_column(t, &alpha);
        values.push(u_basis * &alpha);
        if t + 1 < horizon {
            alpha += DVector::from_fn(k, |_, _| sigma * rng.sample::<f64, _>(StandardNormal));
        }
    }
    Ok((TimeVaryingReward::new(values)?, weights))
}

// First-occurrence normal form, so partitions compare as equivalence
// classes rather than by raw label values.
fn canonical(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|&l| {
            let next = map.len();
            *map.entry(l).or_insert(next)
        })
        .collect()
}

/// Adjusted Rand Index between two labelings of the same timesteps: 1 for
/// identical partitions, expected value 0 under independent random labeling.
/// The degenerate case (both trivial partitions) is defined as 1 when the
/// partitions are identical and 0 otherwise.
pub fn adjusted_rand_index(a: &LabeledPartition, b: &LabeledPartition) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            context: "partition lengths".to_string(),
            expected: a.len().to_string(),
            got: b.len().to_string(),
        });
    }
    let total = a.len();
    let mut joint = std::collections::HashMap::new();
    let mut rows = std::collections::HashMap::new();
    let mut cols = std::collections::HashMap::new();
    for (&la, &lb) in a.labels.iter().zip(&b.labels) {
        *joint.entry((la, lb)).or_insert(0u64) += 1;
        *rows.entry(la).or_insert(0u64) += 1;
        *cols.entry(lb).or_insert(0u64) += 1;
    }
    let c2 = |x: u64| (x * x.saturating_sub(1)) as f64 / 2.0;
    let sum_joint: f64 = joint.values().map(|&v| c2(v)).sum();
    let sum_a: f64 = rows.values().map(|&v| c2(v)).sum();
    let sum_b: f64 = cols.values().map(|&v| c2(v)).sum();
    let pairs = c2(total as u64);
    let expected = sum_a * sum_b / pairs;
    let maximum = 0.5 * (sum_a + sum_b);
    if (maximum - expected).abs() < 1e-9 {
        let identical = canonical(&a.labels) == canonical(&b.labels);
        return Ok(if identical { 1.0 } else { 0.0 });
    }
    Ok((sum_joint - expected) / (maximum - expected))
}

/// Transfer scoring: solve the entropy-regularized control problem for the
/// reward on the target dynamics and report the mean per-step action
/// log-likelihood of the reference trajectories under that policy.
pub fn transfer_eval(
    reward: &TimeVaryingReward,
    target_model: &MdpModel,
    reference_policy_samples: &TrajectorySet,
) -> Result<f64> {
    let solution = soft_backward(target_model, reward)?;
    Ok(mean_action_loglik(&solution.policy, reference_policy_samples)?.mean)
}
