//! Dense convex QP solver for the SQP subproblems.
//!
//! Solves
//! ```text
//!     min  1/2 p' H p + g' p
//!     s.t. lb <= p <= ub          (simple bounds, +-inf allowed)
//!          G p >= h               (a few general rows)
//! ```
//! with a primal active-set method. H must be positive definite (the
//! caller adds damping). The caller supplies a feasible starting point;
//! step directions solve the free-variable KKT system via Cholesky plus a
//! small Schur complement over the active general rows.

use alloc::vec;
use alloc::vec::Vec;

/// A general inequality row `coeffs · p >= rhs`.
#[derive(Debug, Clone)]
pub struct QpRow {
    pub coeffs: Vec<f64>,
    pub rhs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    IterationLimit,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub p: Vec<f64>,
    /// Multiplier per general row (zero when inactive).
    pub row_multipliers: Vec<f64>,
    /// Signed bound multiplier per variable: positive for an active lower
    /// bound, negative for an active upper bound, zero otherwise.
    pub bound_multipliers: Vec<f64>,
    pub status: QpStatus,
}

/// Dense symmetric problem data; `h` is stored row-major n x n.
pub struct QpProblem<'a> {
    pub h: &'a [f64],
    pub g: &'a [f64],
    pub lb: &'a [f64],
    pub ub: &'a [f64],
    pub rows: &'a [QpRow],
}

const FEAS_TOL: f64 = 1e-10;
const STEP_TOL: f64 = 1e-12;
const MULT_TOL: f64 = 1e-9;

/// In-place Cholesky factorization of the lower triangle; returns false
/// if the matrix is not positive definite.
fn cholesky(a: &mut [f64], n: usize) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if d <= 0.0 {
            return false;
        }
        let d = libm::sqrt(d);
        a[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    true
}

/// Solve L L' x = b in place given the Cholesky factor.
fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Solve a small symmetric positive definite system (used for the Schur
/// complement over active rows).
fn solve_spd(a: &mut [f64], n: usize, b: &mut [f64]) -> bool {
    if !cholesky(a, n) {
        return false;
    }
    cholesky_solve(a, n, b);
    true
}

struct WorkingSet {
    /// Per variable: 0 free, -1 at lower bound, +1 at upper bound.
    bound_state: Vec<i8>,
    /// Active general rows.
    active_rows: Vec<usize>,
}

/// Solve the QP starting from the feasible point `p0`.
pub fn solve_qp(prob: &QpProblem<'_>, p0: &[f64], max_iter: usize) -> QpSolution {
    let n = p0.len();
    debug_assert_eq!(prob.g.len(), n);
    let mut p = p0.to_vec();

    // Initial working set: bounds that start active.
    let mut ws = WorkingSet {
        bound_state: vec![0i8; n],
        active_rows: Vec::new(),
    };
    for i in 0..n {
        if p[i] <= prob.lb[i] + FEAS_TOL {
            p[i] = prob.lb[i];
            ws.bound_state[i] = -1;
        } else if p[i] >= prob.ub[i] - FEAS_TOL {
            p[i] = prob.ub[i];
            ws.bound_state[i] = 1;
        }
    }

    let mut row_mult = vec![0.0; prob.rows.len()];
    let mut bound_mult = vec![0.0; n];

    for _ in 0..max_iter {
        // Gradient at the current point.
        let mut grad = prob.g.to_vec();
        for i in 0..n {
            let mut s = 0.0;
            for j in 0..n {
                s += prob.h[i * n + j] * p[j];
            }
            grad[i] += s;
        }

        // Free variable index map.
        let free: Vec<usize> = (0..n).filter(|i| ws.bound_state[*i] == 0).collect();
        let nf = free.len();
        let na = ws.active_rows.len();

        // Equality-constrained step on the free variables:
        //   H_ff d = -grad_f + G_f' lambda,  G_f d = 0.
        let mut d = vec![0.0; n];
        let mut lambda = vec![0.0; na];
        if nf > 0 {
            let mut hff = vec![0.0; nf * nf];
            for (a, &i) in free.iter().enumerate() {
                for (b, &j) in free.iter().enumerate() {
                    hff[a * nf + b] = prob.h[i * n + j];
                }
            }
            if !cholesky(&mut hff, nf) {
                // Damped fallback; the caller's Hessian should prevent this.
                for k in 0..nf {
                    hff[k * nf + k] += 1e-8;
                }
                for (a, &i) in free.iter().enumerate() {
                    for (b, &j) in free.iter().enumerate() {
                        if a != b {
                            hff[a * nf + b] = prob.h[i * n + j];
                        }
                    }
                }
                if !cholesky(&mut hff, nf) {
                    break;
                }
            }

            // y = H_ff^-1 grad_f
            let mut y = vec![0.0; nf];
            for (a, &i) in free.iter().enumerate() {
                y[a] = grad[i];
            }
            cholesky_solve(&hff, nf, &mut y);

            if na == 0 {
                for (a, &i) in free.iter().enumerate() {
                    d[i] = -y[a];
                }
            } else {
                // X = H_ff^-1 G_f', S = G_f X, S lambda = G_f y.
                let mut x_cols = vec![0.0; nf * na];
                for (r, &row_idx) in ws.active_rows.iter().enumerate() {
                    let mut col = vec![0.0; nf];
                    for (a, &i) in free.iter().enumerate() {
                        col[a] = prob.rows[row_idx].coeffs[i];
                    }
                    cholesky_solve(&hff, nf, &mut col);
                    for a in 0..nf {
                        x_cols[a * na + r] = col[a];
                    }
                }
                let mut schur = vec![0.0; na * na];
                let mut rhs = vec![0.0; na];
                for (r, &row_idx) in ws.active_rows.iter().enumerate() {
                    for c in 0..na {
                        let mut s = 0.0;
                        for (a, &i) in free.iter().enumerate() {
                            s += prob.rows[row_idx].coeffs[i] * x_cols[a * na + c];
                        }
                        schur[r * na + c] = s;
                    }
                    let mut s = 0.0;
                    for (a, &i) in free.iter().enumerate() {
                        s += prob.rows[row_idx].coeffs[i] * y[a];
                    }
                    rhs[r] = s;
                }
                if !solve_spd(&mut schur, na, &mut rhs) {
                    // Degenerate active rows: drop the most recent one.
                    ws.active_rows.pop();
                    continue;
                }
                lambda.copy_from_slice(&rhs);
                for (a, &i) in free.iter().enumerate() {
                    let mut s = -y[a];
                    for r in 0..na {
                        s += x_cols[a * na + r] * lambda[r];
                    }
                    d[i] = s;
                }
            }
        }

        let step_norm = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));

        if step_norm < STEP_TOL {
            // Stationary on the working set: check multipliers.
            row_mult.iter_mut().for_each(|v| *v = 0.0);
            for (r, &row_idx) in ws.active_rows.iter().enumerate() {
                row_mult[row_idx] = lambda[r];
            }
            bound_mult.iter_mut().for_each(|v| *v = 0.0);
            let mut worst = (0.0f64, usize::MAX, 0u8); // (value, index, kind)
            for i in 0..n {
                if ws.bound_state[i] == 0 {
                    continue;
                }
                // Stationarity: grad_i - sum_r lambda_r G_ri - mu_i = 0.
                let mut s = grad[i];
                for (r, &row_idx) in ws.active_rows.iter().enumerate() {
                    s -= lambda[r] * prob.rows[row_idx].coeffs[i];
                }
                // mu = s for lower-active (must be >= 0), -s for upper.
                let mu = if ws.bound_state[i] == -1 { s } else { -s };
                bound_mult[i] = if ws.bound_state[i] == -1 { mu } else { -mu };
                if mu < worst.0 {
                    worst = (mu, i, 0);
                }
            }
            for (r, &row_idx) in ws.active_rows.iter().enumerate() {
                if lambda[r] < worst.0 {
                    worst = (lambda[r], row_idx, 1);
                }
            }
            if worst.0 >= -MULT_TOL {
                return QpSolution {
                    p,
                    row_multipliers: row_mult,
                    bound_multipliers: bound_mult,
                    status: QpStatus::Optimal,
                };
            }
            // Release the most negative constraint and continue.
            if worst.2 == 0 {
                ws.bound_state[worst.1] = 0;
            } else {
                ws.active_rows.retain(|r| *r != worst.1);
            }
            continue;
        }

        // Ratio test against the inactive constraints.
        let mut alpha = 1.0f64;
        let mut blocking: Option<(usize, u8, i8)> = None; // (index, kind, side)
        for i in 0..n {
            if ws.bound_state[i] != 0 {
                continue;
            }
            if d[i] > STEP_TOL && prob.ub[i].is_finite() {
                let a = (prob.ub[i] - p[i]) / d[i];
                if a < alpha {
                    alpha = a.max(0.0);
                    blocking = Some((i, 0, 1));
                }
            } else if d[i] < -STEP_TOL && prob.lb[i].is_finite() {
                let a = (prob.lb[i] - p[i]) / d[i];
                if a < alpha {
                    alpha = a.max(0.0);
                    blocking = Some((i, 0, -1));
                }
            }
        }
        for (row_idx, row) in prob.rows.iter().enumerate() {
            if ws.active_rows.contains(&row_idx) {
                continue;
            }
            let gd: f64 = row.coeffs.iter().zip(&d).map(|(c, v)| c * v).sum();
            if gd < -STEP_TOL {
                let gp: f64 = row.coeffs.iter().zip(&p).map(|(c, v)| c * v).sum();
                let a = (row.rhs - gp) / gd;
                if a < alpha {
                    alpha = a.max(0.0);
                    blocking = Some((row_idx, 1, 0));
                }
            }
        }

        for i in 0..n {
            p[i] += alpha * d[i];
        }
        if let Some((idx, kind, side)) = blocking {
            if kind == 0 {
                ws.bound_state[idx] = side;
                p[idx] = if side == -1 { prob.lb[idx] } else { prob.ub[idx] };
            } else {
                ws.active_rows.push(idx);
            }
        }
    }

    QpSolution {
        p,
        row_multipliers: row_mult,
        bound_multipliers: bound_mult,
        status: QpStatus::IterationLimit,
    }
}
