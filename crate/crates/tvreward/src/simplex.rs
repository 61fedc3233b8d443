//! Dense phase-1 simplex for interval feasibility.
//!
//! Decides whether lower ≤ A·x ≤ upper has a solution by minimizing the
//! uniform elastic slack t in
//!
//!   min t   s.t.   lower − t·1 ≤ A·x ≤ upper + t·1,   t ≥ 0,
//!
//! which is always feasible (take t large). Square-ish systems go through a
//! textbook two-phase tableau simplex on the row-doubled standard form with
//! split free variables. Fat systems — many constraint rows over few
//! variables, the common shape here — are instead solved through the dual
//!
//!   min hᵀy   s.t.   Sᵀy = 0,  Σy ≤ 1,  y ≥ 0,
//!
//! whose tableau has one row per *variable*; y = 0 is a valid starting basis
//! (no artificial phase) and the optimal primal point is read off the
//! multipliers. Pricing is most-negative reduced cost, falling back to
//! Bland's rule permanently once the objective stalls, which guarantees
//! termination.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Result of the elastic phase-1 solve.
#[derive(Debug, Clone)]
pub struct PhaseOneOutcome {
    /// Optimal uniform slack t*; the system is feasible iff t* ≤ tol.
    pub objective: f64,
    /// Minimizer in the original variables.
    pub x: DVector<f64>,
}

/// Number of consecutive non-improving pivots before switching to Bland.
const STALL_SWITCH: usize = 40;
/// Pivot tolerance.
const PIV_TOL: f64 = 1e-10;
/// Reduced-cost tolerance.
const COST_TOL: f64 = 1e-9;
/// Sides-per-variable ratio beyond which the dual form is attempted first.
const DUAL_FORM_RATIO: usize = 2;

/// One finite side of an interval row, as sign·(A_row·x) ≤ rhs.
struct Side {
    row: usize,
    sign: f64,
    rhs: f64,
}

struct Tableau {
    /// rows × (cols + 1); last column is the RHS.
    t: DMatrix<f64>,
    basis: Vec<usize>,
    cols: usize,
}

impl Tableau {
    fn rhs(&self, i: usize) -> f64 {
        self.t[(i, self.cols)]
    }

    fn pivot(&mut self, row: usize, col: usize) {
        let nrows = self.t.nrows();
        let ncols = self.cols + 1;
        let piv = self.t[(row, col)];
        for j in 0..ncols {
            self.t[(row, j)] /= piv;
        }
        // Cache the entering column, then eliminate column-by-column so the
        // inner loop walks contiguous (column-major) storage.
        let mut f = self.t.column(col).clone_owned();
        f[row] = 0.0;
        let data = self.t.as_mut_slice();
        for j in 0..ncols {
            let rj = data[j * nrows + row];
            if rj != 0.0 {
                let col_block = &mut data[j * nrows..j * nrows + nrows];
                for (d, fi) in col_block.iter_mut().zip(f.iter()) {
                    *d -= fi * rj;
                }
            }
        }
        self.basis[row] = col;
    }
}

/// Runs the simplex on `tab` minimizing the objective encoded in `cost`
/// (dense over all columns). Returns the optimal objective value and the
/// final reduced-cost row z − c (whose entries under initial identity
/// columns are the simplex multipliers).
fn run_simplex(
    tab: &mut Tableau,
    cost: &[f64],
    allowed: &[bool],
    limit: usize,
) -> Result<(f64, Vec<f64>)> {
    let nrows = tab.t.nrows();
    let cols = tab.cols;

    // Reduced-cost row: z_j - c_j, maintained by elimination over the basis.
    let mut obj = vec![0.0; cols + 1];
    for (j, &c) in cost.iter().enumerate() {
        obj[j] = -c;
    }
    for (i, &b) in tab.basis.clone().iter().enumerate() {
        let cb = cost[b];
        if cb != 0.0 {
            for j in 0..=cols {
                obj[j] += cb * tab.t[(i, j)];
            }
        }
    }

    let mut bland = false;
    let mut stall = 0usize;
    let mut iters = 0usize;
    loop {
        // entering column
        let mut enter: Option<usize> = None;
        if bland {
            for j in 0..cols {
                if allowed[j] && obj[j] > COST_TOL {
                    enter = Some(j);
                    break;
                }
            }
        } else {
            let mut best = COST_TOL;
            for j in 0..cols {
                if allowed[j] && obj[j] > best {
                    best = obj[j];
                    enter = Some(j);
                }
            }
        }
        let Some(col) = enter else {
            let value = obj[cols];
            return Ok((value, obj));
        };
        if iters >= limit {
            return Err(Error::SolverStalled {
                limit,
                objective: obj[cols],
            });
        }
        iters += 1;

        // ratio test
        let mut leave: Option<usize> = None;
        let mut best_ratio = f64::INFINITY;
        for i in 0..nrows {
            let a = tab.t[(i, col)];
            if a > PIV_TOL {
                let ratio = tab.rhs(i) / a;
                let better = ratio < best_ratio - 1e-12
                    || (ratio < best_ratio + 1e-12
                        && leave.is_some_and(|l| tab.basis[i] < tab.basis[l]));
                if better {
                    best_ratio = ratio;
                    leave = Some(i);
                }
            }
        }
        let Some(row) = leave else {
            return Err(Error::InvariantViolation(
                "phase-1 objective unbounded below".to_string(),
            ));
        };

        let before = obj[cols];
        tab.pivot(row, col);
        // eliminate the entering column from the objective row
        let f = obj[col];
        if f != 0.0 {
            for j in 0..=tab.cols {
                obj[j] -= f * tab.t[(row, j)];
            }
        }
        let after = obj[cols];
        if after > before - 1e-13 {
            stall += 1;
            if stall >= STALL_SWITCH {
                bland = true;
            }
        } else {
            stall = 0;
        }
    }
}

/// Solves min t s.t. lower − t·1 ≤ A·x ≤ upper + t·1, t ≥ 0.
/// Rows with an infinite bound on a side contribute no constraint on that
/// side; fully unbounded rows are ignored.
pub fn phase_one_interval(
    a: &DMatrix<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    limit: usize,
) -> Result<PhaseOneOutcome> {
    let (nrows, nvars) = a.shape();
    assert_eq!(lower.len(), nrows);
    assert_eq!(upper.len(), nrows);

    let mut sides = Vec::new();
    for i in 0..nrows {
        if upper[i].is_finite() {
            sides.push(Side {
                row: i,
                sign: 1.0,
                rhs: upper[i],
            });
        }
        if lower[i].is_finite() {
            sides.push(Side {
                row: i,
                sign: -1.0,
                rhs: -lower[i],
            });
        }
    }
    if sides.is_empty() {
        return Ok(PhaseOneOutcome {
            objective: 0.0,
            x: DVector::zeros(nvars),
        });
    }

    if sides.len() >= DUAL_FORM_RATIO * (nvars + 1) {
        // The primal tableau stays authoritative: fall through to it when
        // the dual solve stalls or its multiplier point fails verification.
        if let Ok(Some(out)) = solve_dual(a, &sides, nvars, limit) {
            return Ok(out);
        }
    }
    solve_primal(a, &sides, nvars, limit)
}

/// Dual form for fat systems. Returns Ok(None) when the recovered primal
/// point does not reproduce the dual objective, signalling the caller to
/// rerun in primal form.
fn solve_dual(
    a: &DMatrix<f64>,
    sides: &[Side],
    nvars: usize,
    limit: usize,
) -> Result<Option<PhaseOneOutcome>> {
    let m = sides.len();
    let s_col = m; // slack of the Σy ≤ 1 row
    let art0 = m + 1; // identity columns carrying the multipliers
    let cols = m + 1 + nvars;
    let rows = nvars + 1;
    let mut t = DMatrix::zeros(rows, cols + 1);
    for (i, side) in sides.iter().enumerate() {
        for j in 0..nvars {
            t[(j, i)] = side.sign * a[(side.row, j)];
        }
        t[(nvars, i)] = 1.0;
    }
    t[(nvars, s_col)] = 1.0;
    for k in 0..nvars {
        t[(k, art0 + k)] = 1.0;
    }
    t[(nvars, cols)] = 1.0;

    let mut basis: Vec<usize> = (0..nvars).map(|k| art0 + k).collect();
    basis.push(s_col);
    let mut tab = Tableau { t, basis, cols };

    // The artificials carry the identity but have zero cost, so a later
    // pivot could raise one above zero and silently relax its equality row.
    // Every row has zero RHS here, making pivots on any sign free of
    // feasibility concerns: eliminate each artificial up front on the
    // largest real entry of its row. All-zero rows keep theirs, harmlessly.
    for k in 0..nvars {
        let mut best = (PIV_TOL, None);
        for j in 0..m {
            let v = tab.t[(k, j)].abs();
            if v > best.0 {
                best = (v, Some(j));
            }
        }
        if let Some(j) = best.1 {
            tab.pivot(k, j);
        }
    }

    let mut cost = vec![0.0; cols];
    for (i, side) in sides.iter().enumerate() {
        cost[i] = side.rhs;
    }
    let mut allowed = vec![true; cols];
    for k in 0..nvars {
        allowed[art0 + k] = false;
    }
    let (objective, multipliers) = match run_simplex(&mut tab, &cost, &allowed, limit) {
        Ok(out) => out,
        Err(Error::SolverStalled { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    // A lingering artificial above zero level means an equality row was
    // relaxed and the objective cannot be trusted.
    for (i, &b) in tab.basis.iter().enumerate() {
        if b >= art0 && tab.rhs(i) > 1e-9 {
            return Ok(None);
        }
    }
    let t_star = (-objective).max(0.0);
    let x = DVector::from_fn(nvars, |k, _| multipliers[art0 + k]);

    // In exact arithmetic the multiplier point attains the optimum: its
    // worst side violation equals t*. A gap reveals numerical breakdown.
    let ax = a * &x;
    let mut viol = 0.0f64;
    for side in sides {
        viol = viol.max(side.sign * ax[side.row] - side.rhs);
    }
    let guard = 1e-7 * (1.0 + t_star.abs() + x.amax());
    if (viol.max(0.0) - t_star).abs() > guard {
        return Ok(None);
    }
    Ok(Some(PhaseOneOutcome {
        objective: t_star,
        x,
    }))
}

/// Row-doubled primal standard form over z = [x⁺, x⁻, t, slacks, artificials].
fn solve_primal(
    a: &DMatrix<f64>,
    sides: &[Side],
    nvars: usize,
    limit: usize,
) -> Result<PhaseOneOutcome> {
    let m_rows = sides.len();
    let t_col = 2 * nvars;
    let slack0 = t_col + 1;
    let mut n_art = 0usize;
    for side in sides {
        if side.rhs < 0.0 {
            n_art += 1;
        }
    }
    let cols = slack0 + m_rows + n_art;
    let mut t = DMatrix::zeros(m_rows, cols + 1);
    let mut basis = vec![0usize; m_rows];
    let mut art_cols = Vec::with_capacity(n_art);
    let mut next_art = slack0 + m_rows;
    for (i, side) in sides.iter().enumerate() {
        // sign·(A_i x) − t + slack = rhs, then normalized to rhs ≥ 0
        let flip = if side.rhs < 0.0 { -1.0 } else { 1.0 };
        for j in 0..nvars {
            let v = flip * side.sign * a[(side.row, j)];
            t[(i, j)] = v;
            t[(i, nvars + j)] = -v;
        }
        t[(i, t_col)] = -flip;
        t[(i, slack0 + i)] = flip;
        t[(i, cols)] = flip * side.rhs;
        if flip < 0.0 {
            t[(i, next_art)] = 1.0;
            basis[i] = next_art;
            art_cols.push(next_art);
            next_art += 1;
        } else {
            basis[i] = slack0 + i;
        }
    }

    let mut tab = Tableau { t, basis, cols };

    // Phase A: drive artificials to zero (skipped when none were needed).
    if n_art > 0 {
        let mut cost = vec![0.0; cols];
        for &c in &art_cols {
            cost[c] = 1.0;
        }
        let allowed = vec![true; cols];
        let (resid, _) = run_simplex(&mut tab, &cost, &allowed, limit)?;
        if resid > 1e-7 {
            // The elastic system is feasible by construction; failing to
            // zero the artificials is a numerical breakdown, not a verdict.
            return Err(Error::SolverStalled {
                limit,
                objective: resid,
            });
        }
        // Pivot lingering zero-level artificials out of the basis.
        for i in 0..m_rows {
            if art_cols.contains(&tab.basis[i]) {
                let col = (0..slack0 + m_rows).find(|&j| tab.t[(i, j)].abs() > PIV_TOL);
                if let Some(j) = col {
                    tab.pivot(i, j);
                }
            }
        }
    }

    // Phase B: minimize t, artificials barred.
    let mut cost = vec![0.0; cols];
    cost[t_col] = 1.0;
    let mut allowed = vec![true; cols];
    for &c in &art_cols {
        allowed[c] = false;
    }
    let (objective, _) = run_simplex(&mut tab, &cost, &allowed, limit)?;

    let mut x = DVector::zeros(nvars);
    for (i, &b) in tab.basis.iter().enumerate() {
        if b < nvars {
            x[b] += tab.rhs(i);
        } else if b < 2 * nvars {
            x[b - nvars] -= tab.rhs(i);
        }
    }
    Ok(PhaseOneOutcome {
        objective: objective.max(0.0),
        x,
    })
}
