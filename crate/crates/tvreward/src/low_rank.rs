//! Low-rank reward recovery: nuclear-norm minimization over a reward
//! feasible set via ADMM with singular-value thresholding, SVD-based
//! decomposition of the recovered matrix into an orthonormal feature basis
//! with per-step weights, and alignment of a recovered basis against a
//! reference basis.
//!
//! Identifiability caveat: the feasible sets are invariant to per-step
//! shifts r_t → r_t + E·w_t − γ·P·w_{t+1}, so reward components inside
//! range([E P]) cannot be determined from the policy — the program returns
//! the minimum-nuclear-norm representative instead. Recovery of a planted
//! basis is only exact when its feature directions avoid that subspace
//! (e.g. drawn orthogonal to it); state-indicator features replicated
//! across actions lie entirely inside it and come back altered.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::mdp::TimeVaryingReward;
use crate::sets::ConstraintSet;
use crate::{Error, Result};

/// Stacked reward matrix: column t holds the reward vector r_t, indexed by
/// flat state-action pairs (action-major, a·n + s).
#[derive(Debug, Clone, PartialEq)]
pub struct RewardMatrix {
    pub matrix: DMatrix<f64>,
}

impl RewardMatrix {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if let Some(idx) = matrix.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "reward matrix",
                index: idx,
            });
        }
        Ok(RewardMatrix { matrix })
    }

    pub fn from_reward(reward: &TimeVaryingReward) -> Self {
        let t = reward.horizon();
        let mn = reward.values[0].len();
        let mut matrix = DMatrix::zeros(mn, t);
        for (j, step) in reward.values.iter().enumerate() {
            matrix.set_column(j, step);
        }
        RewardMatrix { matrix }
    }

    pub fn to_reward(&self) -> Result<TimeVaryingReward> {
        TimeVaryingReward::new(
            (0..self.matrix.ncols())
                .map(|j| self.matrix.column(j).into_owned())
                .collect(),
        )
    }

    pub fn horizon(&self) -> usize {
        self.matrix.ncols()
    }

    /// Sum of singular values.
    pub fn nuclear_norm(&self) -> f64 {
        self.matrix
            .clone()
            .svd(false, false)
            .singular_values
            .sum()
    }
}

/// Orthonormal feature basis and weights for a reward matrix. For outputs of
/// [`decompose`], `u_basis · weights` reproduces the input within
/// `rank_tol_used` in spectral norm; alignment post-processing trades that
/// identity for comparability (standardized weight rows).
#[derive(Debug, Clone)]
pub struct FeatureDecomposition {
    /// (m·n)×K with orthonormal columns.
    pub u_basis: DMatrix<f64>,
    /// K×T; column t is the weight vector α_t.
    pub weights: DMatrix<f64>,
    /// Absolute spectral-norm reconstruction bound (relative tolerance times
    /// the largest singular value of the decomposed matrix).
    pub rank_tol_used: f64,
}

impl FeatureDecomposition {
    pub fn k(&self) -> usize {
        self.u_basis.ncols()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.u_basis * &self.weights
    }
}

/// ADMM solver knobs. Defaults: rho 1.0, 5000 iterations, both tolerances
/// 1e-6.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmmParams {
    pub rho: f64,
    pub max_iter: usize,
    pub primal_tol: f64,
    pub dual_tol: f64,
}

impl Default for AdmmParams {
    fn default() -> Self {
        AdmmParams {
            rho: 1.0,
            max_iter: 5000,
            primal_tol: 1e-6,
            dual_tol: 1e-6,
        }
    }
}

impl AdmmParams {
    fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("rho", self.rho),
            ("primal_tol", self.primal_tol),
            ("dual_tol", self.dual_tol),
            ("max_iter", self.max_iter as f64),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::BadParameter {
                    name,
                    value,
                    requirement: "positive and finite",
                });
            }
        }
        Ok(())
    }
}

/// Convergence record for one ADMM run. Non-convergence is reported here,
/// never silently dropped.
#[derive(Debug, Clone)]
pub struct AdmmDiagnostics {
    pub iterations: usize,
    pub converged: bool,
    /// Max-norm violation of the input constraint set at the returned point.
    pub primal_residual: f64,
    /// ρ-scaled max-norm change of the splitting variables on the last sweep.
    pub dual_residual: f64,
    pub rho_final: f64,
    /// Number of residual-balancing penalty updates performed.
    pub rho_updates: usize,
    /// Times the 50-iteration moving average of the residuals increased;
    /// expected to stay small but not fatal for this class of method.
    pub backslides: usize,
    /// Downsampled (iteration, primal, dual) residual trace.
    pub trace: Vec<(usize, f64, f64)>,
}

/// Singular-value thresholding: the proximal operator of the nuclear norm.
/// Every singular value is shrunk to max(σ − threshold, 0).
pub fn svt(matrix: &DMatrix<f64>, threshold: f64) -> Result<DMatrix<f64>> {
    if !(threshold >= 0.0 && threshold.is_finite()) {
        return Err(Error::BadParameter {
            name: "threshold",
            value: threshold,
            requirement: "finite and nonnegative",
        });
    }
    let mut svd = matrix.clone().svd(true, true);
    for s in svd.singular_values.iter_mut() {
        *s = (*s - threshold).max(0.0);
    }
    svd.recompose()
        .map_err(|_| Error::Factorization { what: "svt" })
}

/// Principal angles (radians, ascending) between the column spans of two
/// bases with equally many columns. Inputs need not be orthonormal.
pub fn principal_angles(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Vec<f64>> {
    if a.nrows() != b.nrows() || a.ncols() != b.ncols() {
        return Err(Error::ShapeMismatch {
            context: "principal angle bases".to_string(),
            expected: format!("{}x{}", a.nrows(), a.ncols()),
            got: format!("{}x{}", b.nrows(), b.ncols()),
        });
    }
    if a.ncols() == 0 {
        return Ok(Vec::new());
    }
    let qa = a.clone().qr().q();
    let qb = b.clone().qr().q();
    let mut cosines: Vec<f64> = qa
        .tr_mul(&qb)
        .svd(false, false)
        .singular_values
        .iter()
        .map(|c| c.min(1.0).max(-1.0).acos())
        .collect();
    cosines.sort_by(|x, y| x.partial_cmp(y).unwrap());
    Ok(cosines)
}

// How the joint (r, ν) ridge update is solved. The sets built over a full
// horizon have A = [I | B]; eliminating r leaves a ν-system of size T·n
// whose Cholesky factor is reused across iterations (Schur). Anything else
// falls back to factoring the full normal matrix (Dense).
enum XSolver {
    Schur {
        b: DMatrix<f64>,
        gram: DMatrix<f64>,
        chol: Cholesky<f64, Dyn>,
    },
    Dense {
        ata: DMatrix<f64>,
        chol: Cholesky<f64, Dyn>,
    },
}

const RIDGE: f64 = 1e-10;
const RHO_CHECK_EVERY: usize = 50;
const RHO_RATIO: f64 = 10.0;
const RHO_FACTOR: f64 = 2.0;
const RHO_MIN: f64 = 1e-4;
const RHO_MAX: f64 = 1e4;

fn schur_factor(gram: &DMatrix<f64>, rho: f64) -> Result<Cholesky<f64, Dyn>> {
    let c1 = rho * (rho + RIDGE) / (2.0 * rho + RIDGE);
    let mut m = gram * c1;
    for i in 0..m.nrows() {
        m[(i, i)] += RIDGE;
    }
    Cholesky::new(m).ok_or(Error::Factorization {
        what: "admm normal equations",
    })
}

fn dense_factor(
    ata: &DMatrix<f64>,
    r_idx: &[usize],
    rho: f64,
) -> Result<Cholesky<f64, Dyn>> {
    let mut m = ata * rho;
    for i in 0..m.nrows() {
        m[(i, i)] += RIDGE;
    }
    for &c in r_idx {
        m[(c, c)] += rho;
    }
    Cholesky::new(m).ok_or(Error::Factorization {
        what: "admm normal equations",
    })
}

/// Minimizes the nuclear norm of the (m·n)×T reward matrix over a reward
/// feasible set (equalities and/or intervals), returning the recovered
/// matrix, the stacked ν variables, and convergence diagnostics.
///
/// Three-block alternating scheme: the nuclear block is updated by
/// singular-value thresholding at 1/ρ, the constraint block by clipping into
/// [lower, upper], and the joint (r, ν) block by a ridge-regularized
/// least-squares solve whose factorization is reused until ρ changes. After
/// the loop, solutions on [I | B]-structured sets are polished row-by-row
/// onto the constraint box, so converged solves satisfy the set essentially
/// exactly.
pub fn solve_nuclear(
    cs: &ConstraintSet,
    dims: (usize, usize),
    params: &AdmmParams,
) -> Result<(RewardMatrix, DVector<f64>, AdmmDiagnostics)> {
    params.validate()?;
    let (mn, t) = dims;
    if mn == 0 || t == 0 {
        return Err(Error::BadParameter {
            name: "dims",
            value: (mn * t) as f64,
            requirement: "both reward dimensions positive",
        });
    }
    let r_idx: Vec<usize> = cs
        .var_layout
        .reward_blocks
        .iter()
        .flat_map(|r| r.clone())
        .collect();
    let nu_idx: Vec<usize> = cs
        .var_layout
        .nu_blocks
        .iter()
        .flat_map(|r| r.clone())
        .collect();
    if r_idx.len() != mn * t {
        return Err(Error::ShapeMismatch {
            context: "reward variable count".to_string(),
            expected: format!("{}", mn * t),
            got: format!("{}", r_idx.len()),
        });
    }
    let (rows, cols) = (cs.rows(), cs.cols());
    let r_len = r_idx.len();
    let nu_len = nu_idx.len();

    // Detect the [I | B] layout produced by the full-horizon set builders.
    let structured = rows == r_len
        && r_idx.iter().enumerate().all(|(k, &c)| k == c)
        && nu_idx.iter().enumerate().all(|(k, &c)| r_len + k == c)
        && (0..r_len).all(|j| {
            (0..rows).all(|i| cs.a_matrix[(i, j)] == if i == j { 1.0 } else { 0.0 })
        });

    let mut rho = params.rho;
    let mut rho_updates = 0usize;
    let mut solver = if structured {
        let b = cs.a_matrix.columns(r_len, nu_len).into_owned();
        let gram = b.tr_mul(&b);
        let chol = schur_factor(&gram, rho)?;
        XSolver::Schur { b, gram, chol }
    } else {
        let ata = cs.a_matrix.tr_mul(&cs.a_matrix);
        let chol = dense_factor(&ata, &r_idx, rho)?;
        XSolver::Dense { ata, chol }
    };

    let mut x = DVector::<f64>::zeros(cols);
    let mut m_split = DMatrix::<f64>::zeros(mn, t);
    let mut z_split = DVector::<f64>::zeros(rows);
    let mut u_m = DMatrix::<f64>::zeros(mn, t);
    let mut u_z = DVector::<f64>::zeros(rows);

    let gather_r = |x: &DVector<f64>| -> DMatrix<f64> {
        if structured {
            DMatrix::from_column_slice(mn, t, &x.as_slice()[..r_len])
        } else {
            DMatrix::from_fn(mn, t, |i, j| x[r_idx[j * mn + i]])
        }
    };
    let apply_a = |x: &DVector<f64>, solver: &XSolver| -> DVector<f64> {
        match solver {
            XSolver::Schur { b, .. } => {
                let mut ax = x.rows(0, r_len).into_owned();
                ax.gemv(1.0, b, &x.rows(r_len, nu_len), 1.0);
                ax
            }
            XSolver::Dense { .. } => &cs.a_matrix * x,
        }
    };

    let stride = (params.max_iter / 200).max(1);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0usize;
    let mut dual_res = f64::INFINITY;
    let mut primal_res = f64::INFINITY;
    let mut backslides = 0usize;
    let mut win_sum = 0.0;
    let mut win_count = 0usize;
    let mut prev_win_mean = f64::INFINITY;

    for k in 1..=params.max_iter {
        iterations = k;
        let m_old = m_split.clone();
        let z_old = z_split.clone();

        // (a) nuclear block: prox of ‖·‖_*/ρ at mat(r) + scaled dual.
        m_split = svt(&(gather_r(&x) + &u_m), 1.0 / rho)?;
        // (b) constraint block: clip onto the box.
        let ax = apply_a(&x, &solver);
        for q in 0..rows {
            z_split[q] = (ax[q] + u_z[q]).clamp(cs.lower[q], cs.upper[q]);
        }

        // (c) joint (r, ν) ridge solve against both split targets.
        let m_tilde = &m_split - &u_m;
        let z_tilde = &z_split - &u_z;
        match &solver {
            XSolver::Schur { b, chol, .. } => {
                let denom = 2.0 * rho + RIDGE;
                let mut rhs_r = DVector::from_column_slice(m_tilde.as_slice());
                rhs_r += &z_tilde;
                rhs_r *= rho;
                let mut rhs_nu = b.tr_mul(&z_tilde) * rho;
                rhs_nu.gemv_tr(-rho / denom, b, &rhs_r, 1.0);
                let nu = chol.solve(&rhs_nu);
                let mut r = rhs_r;
                r.gemv(-rho / denom, b, &nu, 1.0 / denom);
                x.rows_mut(0, r_len).copy_from(&r);
                x.rows_mut(r_len, nu_len).copy_from(&nu);
            }
            XSolver::Dense { chol, .. } => {
                let mut rhs = cs.a_matrix.tr_mul(&z_tilde);
                for (k_r, &c) in r_idx.iter().enumerate() {
                    rhs[c] += m_tilde[(k_r % mn, k_r / mn)];
                }
                rhs *= rho;
                x = chol.solve(&rhs);
            }
        }

        // Scaled dual ascent and residuals at the end of the sweep.
        let mat_r = gather_r(&x);
        let ax = apply_a(&x, &solver);
        let mut primal = 0.0f64;
        for j in 0..t {
            for i in 0..mn {
                let gap = mat_r[(i, j)] - m_split[(i, j)];
                u_m[(i, j)] += gap;
                primal = primal.max(gap.abs());
            }
        }
        for q in 0..rows {
            let gap = ax[q] - z_split[q];
            u_z[q] += gap;
            primal = primal.max(gap.abs());
        }
        let shift = (&m_split - m_old).amax().max((&z_split - z_old).amax());
        dual_res = rho * shift;
        primal_res = primal;

        if k % stride == 0 || k == 1 {
            trace.push((k, primal_res, dual_res));
        }
        win_sum += primal_res.max(dual_res);
        win_count += 1;
        if win_count == RHO_CHECK_EVERY {
            let mean = win_sum / RHO_CHECK_EVERY as f64;
            if mean > prev_win_mean * (1.0 + 1e-9) {
                backslides += 1;
            }
            prev_win_mean = mean;
            win_sum = 0.0;
            win_count = 0;
        }

        if primal_res <= params.primal_tol && dual_res <= params.dual_tol {
            converged = true;
            break;
        }

        // Residual balancing: keep primal and dual progress comparable.
        if k % RHO_CHECK_EVERY == 0 {
            let grow = primal_res > RHO_RATIO * dual_res && rho * RHO_FACTOR <= RHO_MAX;
            let shrink = dual_res > RHO_RATIO * primal_res && rho / RHO_FACTOR >= RHO_MIN;
            if grow || shrink {
                let scale = if grow { RHO_FACTOR } else { 1.0 / RHO_FACTOR };
                rho *= scale;
                u_m /= scale;
                u_z /= scale;
                rho_updates += 1;
                match &mut solver {
                    XSolver::Schur { gram, chol, .. } => *chol = schur_factor(gram, rho)?,
                    XSolver::Dense { ata, chol } => *chol = dense_factor(ata, &r_idx, rho)?,
                }
            }
        }
    }

    // Row-wise polish: with A = [I | B] each row constrains exactly one
    // reward coordinate, so clamping r onto [lower − Bν, upper − Bν] lands
    // exactly on the set (equality rows become r = ξ − Bν).
    if structured {
        if let XSolver::Schur { b, .. } = &solver {
            let znu = b * x.rows(r_len, nu_len);
            for q in 0..rows {
                let v = x[q].clamp(cs.lower[q] - znu[q], cs.upper[q] - znu[q]);
                x[q] = v;
            }
        }
    }
    let final_violation = cs.max_violation(&x);

    trace.push((iterations, primal_res, dual_res));
    let diagnostics = AdmmDiagnostics {
        iterations,
        converged,
        primal_residual: final_violation,
        dual_residual: dual_res,
        rho_final: rho,
        rho_updates,
        backslides,
        trace,
    };
    let nu = DVector::from_fn(nu_len, |k, _| {
        if structured {
            x[r_len + k]
        } else {
            x[nu_idx[k]]
        }
    });
    Ok((RewardMatrix::new(gather_r(&x))?, nu, diagnostics))
}

/// SVD-based split of a reward matrix into an orthonormal basis and weights.
/// K counts the singular values above rank_tol·σ₁; the zero matrix yields an
/// empty decomposition.
pub fn decompose(rm: &RewardMatrix, rank_tol: f64) -> Result<FeatureDecomposition> {
    if !(rank_tol > 0.0 && rank_tol.is_finite()) {
        return Err(Error::BadParameter {
            name: "rank_tol",
            value: rank_tol,
            requirement: "positive and finite",
        });
    }
    let (mn, t) = (rm.matrix.nrows(), rm.matrix.ncols());
    let svd = rm.matrix.clone().svd(true, false);
    let top = svd.singular_values.max();
    if top == 0.0 {
        return Ok(FeatureDecomposition {
            u_basis: DMatrix::zeros(mn, 0),
            weights: DMatrix::zeros(0, t),
            rank_tol_used: 0.0,
        });
    }
    let cut = rank_tol * top;
    let k = svd.singular_values.iter().filter(|&&s| s > cut).count();
    let u = svd.u.as_ref().ok_or(Error::Factorization { what: "svd" })?;
    let u_basis = u.columns(0, k).into_owned();
    let weights = u_basis.tr_mul(&rm.matrix);
    Ok(FeatureDecomposition {
        u_basis,
        weights,
        rank_tol_used: cut,
    })
}

// Zero-mean, unit-variance (population) standardization; rows that carry no
// variation are left centered rather than divided by ~0.
fn standardize_row(row: &mut [f64]) {
    let len = row.len() as f64;
    let mean = row.iter().sum::<f64>() / len;
    for v in row.iter_mut() {
        *v -= mean;
    }
    let var = row.iter().map(|v| v * v).sum::<f64>() / len;
    let sd = var.sqrt();
    if sd > 1e-12 * (1.0 + mean.abs()) {
        for v in row.iter_mut() {
            *v /= sd;
        }
    }
}

/// Re-expresses a decomposition in the coordinates of a reference basis:
/// least-squares change of basis G (u_basis·G ≈ u_ref), weights mapped
/// through G⁻¹, then each weight row standardized to zero mean and unit
/// variance. When reference weight rows are supplied, each standardized row
/// is sign-flipped to correlate positively with its reference row. Fails
/// when the two subspaces are essentially orthogonal.
pub fn align_to_reference(
    fd: &FeatureDecomposition,
    u_ref: &DMatrix<f64>,
    weights_ref: Option<&DMatrix<f64>>,
) -> Result<FeatureDecomposition> {
    let k = fd.k();
    if u_ref.nrows() != fd.u_basis.nrows() || u_ref.ncols() != k {
        return Err(Error::ShapeMismatch {
            context: "reference basis".to_string(),
            expected: format!("{}x{}", fd.u_basis.nrows(), k),
            got: format!("{}x{}", u_ref.nrows(), u_ref.ncols()),
        });
    }
    if let Some(w) = weights_ref {
        if w.nrows() != k || w.ncols() != fd.weights.ncols() {
            return Err(Error::ShapeMismatch {
                context: "reference weights".to_string(),
                expected: format!("{}x{}", k, fd.weights.ncols()),
                got: format!("{}x{}", w.nrows(), w.ncols()),
            });
        }
    }
    if k == 0 {
        return Ok(fd.clone());
    }

    let angles = principal_angles(&fd.u_basis, u_ref)?;
    let largest = *angles.last().unwrap();
    if largest.cos() <= 1e-8 {
        return Err(Error::SingularAlignment {
            angle_rad: angles[0],
        });
    }

    // u_basis has orthonormal columns, so the least-squares change of basis
    // is the plain projection.
    let g = fd.u_basis.tr_mul(u_ref);
    let g_inv = g.clone().try_inverse().ok_or(Error::SingularAlignment {
        angle_rad: angles[0],
    })?;
    let aligned_basis = &fd.u_basis * &g;
    let mut weights = g_inv * &fd.weights;
    for i in 0..k {
        let mut row: Vec<f64> = weights.row(i).iter().copied().collect();
        standardize_row(&mut row);
        if let Some(w_ref) = weights_ref {
            let mut reference: Vec<f64> = w_ref.row(i).iter().copied().collect();
            standardize_row(&mut reference);
            let dot: f64 = row.iter().zip(&reference).map(|(a, b)| a * b).sum();
            if dot < 0.0 {
                for v in row.iter_mut() {
                    *v = -*v;
                }
            }
        }
        for (j, v) in row.into_iter().enumerate() {
            weights[(i, j)] = v;
        }
    }
    Ok(FeatureDecomposition {
        u_basis: aligned_basis,
        weights,
        rank_tol_used: fd.rank_tol_used,
    })
}
