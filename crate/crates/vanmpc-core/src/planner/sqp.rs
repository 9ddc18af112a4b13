//! Condensed multiple-shooting SQP for the tracking OCP.
//!
//! Decision variables are the N inputs and N+1 shooting states; the
//! shooting-gap equalities are eliminated from each QP subproblem by
//! forward sensitivity propagation (condensing), leaving a small dense
//! bound-constrained QP over the input moves plus slack variables for the
//! CLF row (and state-box rows when enabled). States still move as
//! independent variables through the linearized gap correction, so the
//! transcription stays multiple shooting: gaps close only at convergence.
//!
//! The Hessian is the damped Gauss-Newton Hessian of the quadratic
//! tracking cost; steps are globalized by backtracking on an L1 merit
//! function. Convergence is declared when the KKT residual (stationarity
//! plus the largest shooting gap) drops below 1e-6; the iteration cap is
//! 50 with the best iterate returned.

use super::qp::{solve_qp, QpProblem, QpRow};
use super::{
    clf_value_with_delta, shoot_step, OcpConfig, OcpProblem, OcpSolution, SolverStatus,
    ROLL_BOX_LIMIT,
};
use crate::math::{angle_diff, Mat3, Mat32, Vec2, Vec3};
use crate::plant::{self, CommandInput, RobotState};
use alloc::vec;
use alloc::vec::Vec;

const KKT_TOL: f64 = 1e-6;
const MAX_SQP_ITER: usize = 50;
const SLACK_CURVATURE: f64 = 2e-8;

/// Stage derivative of the compensated model and its Jacobians wrt state
/// and input. Only the yaw column of the state Jacobian is nonzero.
fn stage_derivative(x: &Vec3, u: &Vec2, delta: &Vec2, radius: f64) -> (Vec3, Mat3, Mat32) {
    let (sin_phi, cos_phi) = (libm::sin(x[2]), libm::cos(x[2]));
    let tan_q = libm::tan(u[1]);
    let cos_q = libm::cos(u[1]);
    let sec2 = 1.0 / (cos_q * cos_q);
    let v_eff = u[0] - delta[0];

    let g = [
        v_eff * cos_phi,
        v_eff * sin_phi,
        (v_eff * tan_q - u[0] * sec2 * delta[1]) / radius,
    ];
    let gx = [
        [0.0, 0.0, -v_eff * sin_phi],
        [0.0, 0.0, v_eff * cos_phi],
        [0.0, 0.0, 0.0],
    ];
    let gu = [
        [cos_phi, 0.0],
        [sin_phi, 0.0],
        [
            (tan_q - sec2 * delta[1]) / radius,
            (v_eff * sec2 - 2.0 * u[0] * sec2 * tan_q * delta[1]) / radius,
        ],
    ];
    (g, gx, gu)
}

fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

fn mat3_mul32(a: &Mat3, b: &Mat32) -> Mat32 {
    let mut out = [[0.0; 2]; 3];
    for i in 0..3 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

fn mat3_mul_vec(a: &Mat3, v: &Vec3) -> Vec3 {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

fn mat3_tr_mul_vec(a: &Mat3, v: &Vec3) -> Vec3 {
    [
        a[0][0] * v[0] + a[1][0] * v[1] + a[2][0] * v[2],
        a[0][1] * v[0] + a[1][1] * v[1] + a[2][1] * v[2],
        a[0][2] * v[0] + a[1][2] * v[1] + a[2][2] * v[2],
    ]
}

/// One RK4 shooting step together with its state and input sensitivities,
/// chained analytically through the four stages.
pub(crate) fn step_with_jacobians(
    x: &Vec3,
    u: &Vec2,
    delta: &Vec2,
    h: f64,
    radius: f64,
) -> (Vec3, Mat3, Mat32) {
    let eye: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

    let (k1, g1, gu1) = stage_derivative(x, u, delta, radius);
    let x2 = [
        x[0] + 0.5 * h * k1[0],
        x[1] + 0.5 * h * k1[1],
        x[2] + 0.5 * h * k1[2],
    ];
    let (k2, g2, gu2) = stage_derivative(&x2, u, delta, radius);
    let x3 = [
        x[0] + 0.5 * h * k2[0],
        x[1] + 0.5 * h * k2[1],
        x[2] + 0.5 * h * k2[2],
    ];
    let (k3, g3, gu3) = stage_derivative(&x3, u, delta, radius);
    let x4 = [x[0] + h * k3[0], x[1] + h * k3[1], x[2] + h * k3[2]];
    let (k4, g4, gu4) = stage_derivative(&x4, u, delta, radius);

    let next = [
        x[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        x[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        x[2] + h / 6.0 * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2]),
    ];

    // dk_i/dx chains.
    let dk1 = g1;
    let mut t = eye;
    add_scaled3(&mut t, &dk1, 0.5 * h);
    let dk2 = mat3_mul(&g2, &t);
    let mut t = eye;
    add_scaled3(&mut t, &dk2, 0.5 * h);
    let dk3 = mat3_mul(&g3, &t);
    let mut t = eye;
    add_scaled3(&mut t, &dk3, h);
    let dk4 = mat3_mul(&g4, &t);

    let mut a = eye;
    for i in 0..3 {
        for j in 0..3 {
            a[i][j] += h / 6.0
                * (dk1[i][j] + 2.0 * dk2[i][j] + 2.0 * dk3[i][j] + dk4[i][j]);
        }
    }

    // dk_i/du chains.
    let du1 = gu1;
    let du2 = add32(&gu2, &mat3_mul32(&g2, &scale32(&du1, 0.5 * h)));
    let du3 = add32(&gu3, &mat3_mul32(&g3, &scale32(&du2, 0.5 * h)));
    let du4 = add32(&gu4, &mat3_mul32(&g4, &scale32(&du3, h)));

    let mut b = [[0.0; 2]; 3];
    for i in 0..3 {
        for j in 0..2 {
            b[i][j] =
                h / 6.0 * (du1[i][j] + 2.0 * du2[i][j] + 2.0 * du3[i][j] + du4[i][j]);
        }
    }
    (next, a, b)
}

fn add_scaled3(out: &mut Mat3, m: &Mat3, s: f64) {
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] += s * m[i][j];
        }
    }
}

fn add32(a: &Mat32, b: &Mat32) -> Mat32 {
    let mut out = *a;
    for i in 0..3 {
        for j in 0..2 {
            out[i][j] += b[i][j];
        }
    }
    out
}

fn scale32(a: &Mat32, s: f64) -> Mat32 {
    let mut out = *a;
    for i in 0..3 {
        for j in 0..2 {
            out[i][j] *= s;
        }
    }
    out
}

/// Tracking cost over unwrapped trajectories.
fn cost_unwrapped(
    xs: &[Vec3],
    us: &[Vec2],
    refs: &[Vec3],
    input_refs: &[Vec2],
    delta_hat: &Vec2,
    cfg: &OcpConfig,
) -> f64 {
    let q = cfg.state_weights;
    let r = cfg.input_weights;
    let mut j = 0.0;
    for (x, xr) in xs.iter().zip(refs) {
        for c in 0..3 {
            let e = x[c] - xr[c];
            j += q[c] * e * e;
        }
    }
    for (u, ur) in us.iter().zip(input_refs) {
        for c in 0..2 {
            let e = u[c] - delta_hat[c] - ur[c];
            j += r[c] * e * e;
        }
    }
    j
}

/// Gradient of the CLF value with respect to u(0|k).
fn clf_gradient(problem: &OcpProblem, u0: &Vec2, radius: f64) -> Vec2 {
    let jac_u0 = plant::input_jacobian_raw_pub(
        problem.initial_state.yaw,
        u0[0],
        u0[1],
        radius,
    );
    let e_c = problem.errors.e_c;
    [
        -(jac_u0[0][0] * e_c[0] + jac_u0[1][0] * e_c[1] + jac_u0[2][0] * e_c[2]),
        -(jac_u0[0][1] * e_c[0] + jac_u0[1][1] * e_c[1] + jac_u0[2][1] * e_c[2]),
    ]
}

/// Solve the horizon-N tracking OCP by condensed multiple-shooting SQP.
///
/// A warm start shifts the previous solution by one interval. The
/// returned status is `max_iterations` (with the best iterate) when the
/// cap is hit, and `infeasible_boxes` when the initial state violates an
/// enabled state box beyond tolerance.
pub fn solve_ocp(
    problem: &OcpProblem,
    cfg: &OcpConfig,
    warm_start: Option<&OcpSolution>,
) -> OcpSolution {
    let n = cfg.horizon;
    let dt = cfg.dt;
    let radius = cfg.wheel_radius;
    assert_eq!(problem.state_refs.len(), n + 1, "state reference window");
    assert_eq!(problem.input_refs.len(), n, "input reference window");
    let delta_hat = problem.delta_hat;

    // Shifted input box (Δû moves both walls), with the roll-angle walls
    // clamped into the tan domain.
    let mut lo = [
        cfg.input_min[0] + delta_hat[0],
        cfg.input_min[1] + delta_hat[1],
    ];
    let mut hi = [
        cfg.input_max[0] + delta_hat[0],
        cfg.input_max[1] + delta_hat[1],
    ];
    lo[1] = lo[1].max(-ROLL_BOX_LIMIT);
    hi[1] = hi[1].min(ROLL_BOX_LIMIT);
    if lo[1] >= hi[1] {
        let mid = (0.5 * (lo[1] + hi[1])).clamp(-ROLL_BOX_LIMIT + 1e-6, ROLL_BOX_LIMIT - 1e-6);
        lo[1] = mid - 1e-6;
        hi[1] = mid + 1e-6;
    }

    let x0 = problem.initial_state.as_array();
    let refs = unwrap_refs(problem, n);

    let state_box = cfg.state_box_enabled();
    if state_box {
        for c in 0..3 {
            if x0[c] < cfg.state_min[c] - 1e-6 || x0[c] > cfg.state_max[c] + 1e-6 {
                let (xs, us) = cold_start(problem, cfg, &lo, &hi);
                return finalize(
                    problem,
                    cfg,
                    &xs,
                    &us,
                    SolverStatus::InfeasibleBoxes,
                    0,
                    f64::INFINITY,
                );
            }
        }
    }

    // Initial iterate: shifted warm start or a feedforward rollout.
    let (mut xs, mut us) = match warm_start {
        Some(w) if w.states.len() == n + 1 && w.inputs.len() == n => {
            let mut us: Vec<Vec2> = (0..n)
                .map(|i| w.inputs[(i + 1).min(n - 1)].as_array())
                .collect();
            for u in &mut us {
                u[0] = u[0].clamp(lo[0], hi[0]);
                u[1] = u[1].clamp(lo[1], hi[1]);
            }
            // Shift states and re-unwrap the yaw chain from x0.
            let mut xs: Vec<Vec3> = Vec::with_capacity(n + 1);
            xs.push(x0);
            let mut prev_raw = problem.initial_state.yaw;
            for i in 1..=n {
                let s = w.states[(i + 1).min(n)].as_array();
                let yaw = xs[i - 1][2] + angle_diff(s[2], prev_raw);
                prev_raw = s[2];
                xs.push([s[0], s[1], yaw]);
            }
            (xs, us)
        }
        _ => cold_start(problem, cfg, &lo, &hi),
    };

    // One soft row per finite state-box wall per shooting state past the
    // first (x_0 is fixed).
    let n_state_rows = if state_box {
        let walls = (0..3)
            .map(|c| {
                cfg.state_min[c].is_finite() as usize + cfg.state_max[c].is_finite() as usize
            })
            .sum::<usize>();
        walls * n
    } else {
        0
    };
    let n_clf_rows = if cfg.clf_enabled { 1 } else { 0 };
    let n_rows = n_clf_rows + n_state_rows;
    let nv = 2 * n + n_rows; // input moves plus one slack per row

    let mut status = SolverStatus::MaxIterations;
    let mut iterations = 0;
    let mut kkt = f64::INFINITY;
    let mut mu_merit = 10.0f64;

    let mut h_mat = vec![0.0; nv * nv];
    let mut g_vec = vec![0.0; nv];

    for _ in 0..MAX_SQP_ITER {
        iterations += 1;

        // Linearize the shooting map along the current iterate.
        let mut a_mats: Vec<Mat3> = Vec::with_capacity(n);
        let mut b_mats: Vec<Mat32> = Vec::with_capacity(n);
        let mut gaps: Vec<Vec3> = Vec::with_capacity(n);
        let mut gap_inf = 0.0f64;
        for i in 0..n {
            let (next, a, b) = step_with_jacobians(&xs[i], &us[i], &delta_hat, dt, radius);
            let gap = [next[0] - xs[i + 1][0], next[1] - xs[i + 1][1], next[2] - xs[i + 1][2]];
            for c in 0..3 {
                gap_inf = gap_inf.max(gap[c].abs());
            }
            a_mats.push(a);
            b_mats.push(b);
            gaps.push(gap);
        }

        let j_now = cost_unwrapped(&xs, &us, &refs, &problem.input_refs, &delta_hat, cfg);
        let clf_now = if cfg.clf_enabled {
            clf_value_with_delta(problem, &us[0], &delta_hat, cfg).unwrap_or(f64::NEG_INFINITY)
        } else {
            0.0
        };

        // Assemble the condensed QP.
        h_mat.iter_mut().for_each(|v| *v = 0.0);
        g_vec.iter_mut().for_each(|v| *v = 0.0);
        let mut rows: Vec<QpRow> = Vec::with_capacity(n_rows);
        let mut lb = vec![f64::NEG_INFINITY; nv];
        let mut ub = vec![f64::INFINITY; nv];
        for i in 0..n {
            for c in 0..2 {
                lb[2 * i + c] = lo[c] - us[i][c];
                ub[2 * i + c] = hi[c] - us[i][c];
            }
        }

        // Input cost blocks.
        for i in 0..n {
            for c in 0..2 {
                let idx = 2 * i + c;
                h_mat[idx * nv + idx] += 2.0 * cfg.input_weights[c];
                let e = us[i][c] - delta_hat[c] - problem.input_refs[i][c];
                g_vec[idx] += 2.0 * cfg.input_weights[c] * e;
            }
        }

        // State cost via forward sensitivities. sens[j] holds dx_i/du_j
        // for the current state index i; m is the affine gap correction.
        let mut sens: Vec<Mat32> = vec![[[0.0; 2]; 3]; n];
        let mut m_aff: Vec3 = [0.0; 3];
        let mut dx_dir: Vec<Vec3> = vec![[0.0; 3]; n + 1];
        let mut row_slack = 2 * n; // next slack variable index
        for i in 1..=n {
            let am = &a_mats[i - 1];
            for s in sens.iter_mut().take(i - 1) {
                *s = mat3_mul32(am, s);
            }
            sens[i - 1] = b_mats[i - 1];
            m_aff = mat3_mul_vec(am, &m_aff);
            for c in 0..3 {
                m_aff[c] += gaps[i - 1][c];
            }

            let q = cfg.state_weights;
            let e_eff = [
                xs[i][0] + m_aff[0] - refs[i][0],
                xs[i][1] + m_aff[1] - refs[i][1],
                xs[i][2] + m_aff[2] - refs[i][2],
            ];
            for j1 in 0..i {
                let s1 = &sens[j1];
                for c1 in 0..2 {
                    let idx1 = 2 * j1 + c1;
                    g_vec[idx1] += 2.0
                        * (q[0] * s1[0][c1] * e_eff[0]
                            + q[1] * s1[1][c1] * e_eff[1]
                            + q[2] * s1[2][c1] * e_eff[2]);
                    for j2 in j1..i {
                        let s2 = &sens[j2];
                        for c2 in 0..2 {
                            let idx2 = 2 * j2 + c2;
                            if idx2 < idx1 {
                                continue;
                            }
                            let v = 2.0
                                * (q[0] * s1[0][c1] * s2[0][c2]
                                    + q[1] * s1[1][c1] * s2[1][c2]
                                    + q[2] * s1[2][c1] * s2[2][c2]);
                            h_mat[idx1 * nv + idx2] += v;
                            if idx1 != idx2 {
                                h_mat[idx2 * nv + idx1] += v;
                            }
                        }
                    }
                }
            }

            // Soft state-box rows for this shooting state.
            if state_box {
                for c in 0..3 {
                    for (wall, sign) in [(cfg.state_min[c], 1.0), (cfg.state_max[c], -1.0)] {
                        if !wall.is_finite() {
                            continue;
                        }
                        // sign * (x + m + S du) >= sign * wall
                        let mut coeffs = vec![0.0; nv];
                        for (j, s) in sens.iter().enumerate().take(i) {
                            coeffs[2 * j] = sign * s[c][0];
                            coeffs[2 * j + 1] = sign * s[c][1];
                        }
                        coeffs[row_slack] = 1.0;
                        let rhs = sign * (wall - xs[i][c] - m_aff[c]);
                        rows.push(QpRow { coeffs, rhs });
                        lb[row_slack] = 0.0;
                        h_mat[row_slack * nv + row_slack] = SLACK_CURVATURE;
                        g_vec[row_slack] = cfg.clf_slack_weight;
                        row_slack += 1;
                    }
                }
            }
        }

        // CLF row on u(0|k) with its slack.
        let mut clf_grad = [0.0, 0.0];
        if cfg.clf_enabled {
            clf_grad = clf_gradient(problem, &us[0], radius);
            let mut coeffs = vec![0.0; nv];
            coeffs[0] = clf_grad[0];
            coeffs[1] = clf_grad[1];
            coeffs[row_slack] = 1.0;
            rows.push(QpRow {
                coeffs,
                rhs: -clf_now,
            });
            lb[row_slack] = 0.0;
            h_mat[row_slack * nv + row_slack] = SLACK_CURVATURE;
            g_vec[row_slack] = cfg.clf_slack_weight;
        }

        // Levenberg damping keeps the reduced Hessian safely definite.
        let mut max_diag = 0.0f64;
        for d in 0..nv {
            max_diag = max_diag.max(h_mat[d * nv + d]);
        }
        let damping = 1e-8 * max_diag.max(1.0);
        for d in 0..nv {
            h_mat[d * nv + d] += damping;
        }

        // Feasible start: zero input move, slacks absorbing violations.
        let mut p0 = vec![0.0; nv];
        for (r, row) in rows.iter().enumerate() {
            let slack_idx = 2 * n + r;
            debug_assert!(row.coeffs[slack_idx] == 1.0);
            p0[slack_idx] = row.rhs.max(0.0);
        }

        let qp = solve_qp(
            &QpProblem {
                h: &h_mat,
                g: &g_vec,
                lb: &lb,
                ub: &ub,
                rows: &rows,
            },
            &p0,
            40 + 4 * nv,
        );
        let p = &qp.p;

        // Full-space direction.
        for i in 0..n {
            let du = [p[2 * i], p[2 * i + 1]];
            let adx = mat3_mul_vec(&a_mats[i], &dx_dir[i]);
            let bdu = [
                b_mats[i][0][0] * du[0] + b_mats[i][0][1] * du[1],
                b_mats[i][1][0] * du[0] + b_mats[i][1][1] * du[1],
                b_mats[i][2][0] * du[0] + b_mats[i][2][1] * du[1],
            ];
            dx_dir[i + 1] = [
                adx[0] + bdu[0] + gaps[i][0],
                adx[1] + bdu[1] + gaps[i][1],
                adx[2] + bdu[2] + gaps[i][2],
            ];
        }

        // KKT residual: reduced-space stationarity at the current iterate
        // with the QP's multiplier estimates, plus the shooting gaps.
        let mut stat = 0.0f64;
        for idx in 0..2 * n {
            let mut r = g_vec[idx];
            for (ri, row) in rows.iter().enumerate() {
                r -= qp.row_multipliers[ri] * row.coeffs[idx];
            }
            r -= qp.bound_multipliers[idx];
            stat = stat.max(r.abs());
        }
        kkt = stat.max(gap_inf);
        if kkt < KKT_TOL && qp.status == super::qp::QpStatus::Optimal {
            status = SolverStatus::Converged;
            break;
        }

        // Multiplier estimate for the merit penalty via the costate
        // recursion.
        {
            let q = cfg.state_weights;
            let mut lam = [
                2.0 * q[0] * (xs[n][0] - refs[n][0]),
                2.0 * q[1] * (xs[n][1] - refs[n][1]),
                2.0 * q[2] * (xs[n][2] - refs[n][2]),
            ];
            let mut mu_req = lam.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for i in (1..n).rev() {
                let grad = [
                    2.0 * q[0] * (xs[i][0] - refs[i][0]),
                    2.0 * q[1] * (xs[i][1] - refs[i][1]),
                    2.0 * q[2] * (xs[i][2] - refs[i][2]),
                ];
                let at_lam = mat3_tr_mul_vec(&a_mats[i], &lam);
                lam = [
                    grad[0] + at_lam[0],
                    grad[1] + at_lam[1],
                    grad[2] + at_lam[2],
                ];
                mu_req = mu_req.max(lam.iter().fold(0.0f64, |m, v| m.max(v.abs())));
            }
            mu_merit = mu_merit.max(1.5 * mu_req + 1.0);
        }

        // L1 merit value at the current point and model reduction.
        let gap_l1: f64 = gaps
            .iter()
            .map(|g| g[0].abs() + g[1].abs() + g[2].abs())
            .sum();
        let clf_pen_now = if cfg.clf_enabled {
            (-clf_now).max(0.0) * cfg.clf_slack_weight
        } else {
            0.0
        };
        let phi0 = j_now + mu_merit * gap_l1 + clf_pen_now;

        // Quadratic model of the cost along the direction.
        let (mut j1, mut j2) = (0.0f64, 0.0f64);
        {
            let q = cfg.state_weights;
            let r = cfg.input_weights;
            for i in 1..=n {
                for c in 0..3 {
                    let e = xs[i][c] - refs[i][c];
                    j1 += 2.0 * q[c] * e * dx_dir[i][c];
                    j2 += q[c] * dx_dir[i][c] * dx_dir[i][c];
                }
            }
            for i in 0..n {
                for c in 0..2 {
                    let e = us[i][c] - delta_hat[c] - problem.input_refs[i][c];
                    let du = p[2 * i + c];
                    j1 += 2.0 * r[c] * e * du;
                    j2 += r[c] * du * du;
                }
            }
        }
        let clf_lin_full = if cfg.clf_enabled {
            clf_now + clf_grad[0] * p[0] + clf_grad[1] * p[1]
        } else {
            0.0
        };
        let model_full = j_now
            + j1
            + j2
            + cfg.clf_slack_weight * (-clf_lin_full).max(0.0);
        let pred = (phi0 - model_full).max(1e-14);

        // Backtracking line search on the merit function.
        let eval_phi = |alpha: f64| -> f64 {
            let mut xs_t = xs.clone();
            let mut us_t = us.clone();
            for i in 1..=n {
                for c in 0..3 {
                    xs_t[i][c] += alpha * dx_dir[i][c];
                }
            }
            for i in 0..n {
                us_t[i][0] = (us_t[i][0] + alpha * p[2 * i]).clamp(lo[0], hi[0]);
                us_t[i][1] = (us_t[i][1] + alpha * p[2 * i + 1]).clamp(lo[1], hi[1]);
            }
            let j_t = cost_unwrapped(&xs_t, &us_t, &refs, &problem.input_refs, &delta_hat, cfg);
            let mut gap_t = 0.0;
            for i in 0..n {
                let next = shoot_step(&xs_t[i], &us_t[i], &delta_hat, dt, radius);
                for c in 0..3 {
                    gap_t += (next[c] - xs_t[i + 1][c]).abs();
                }
            }
            let clf_t = if cfg.clf_enabled {
                clf_value_with_delta(problem, &us_t[0], &delta_hat, cfg)
                    .map(|v| (-v).max(0.0))
                    .unwrap_or(f64::INFINITY)
            } else {
                0.0
            };
            j_t + mu_merit * gap_t + cfg.clf_slack_weight * clf_t
        };

        let mut alpha = 1.0f64;
        let mut accepted = false;
        let mut best = (phi0, 0.0f64);
        for _ in 0..30 {
            let phi_t = eval_phi(alpha);
            if phi_t < best.0 {
                best = (phi_t, alpha);
            }
            if phi_t <= phi0 - 1e-4 * alpha * pred {
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            alpha = best.1;
            if alpha == 0.0 {
                // No progress possible along this direction.
                break;
            }
        }

        for i in 1..=n {
            for c in 0..3 {
                xs[i][c] += alpha * dx_dir[i][c];
            }
        }
        for i in 0..n {
            us[i][0] = (us[i][0] + alpha * p[2 * i]).clamp(lo[0], hi[0]);
            us[i][1] = (us[i][1] + alpha * p[2 * i + 1]).clamp(lo[1], hi[1]);
        }
    }

    finalize(problem, cfg, &xs, &us, status, iterations, kkt)
}

/// Unwrapped reference window anchored at the initial yaw.
fn unwrap_refs(problem: &OcpProblem, n: usize) -> Vec<Vec3> {
    let x0 = problem.initial_state.as_array();
    let mut refs: Vec<Vec3> = Vec::with_capacity(n + 1);
    let first = &problem.state_refs[0];
    let mut yaw = x0[2] + angle_diff(first[2], x0[2]);
    refs.push([first[0], first[1], yaw]);
    for i in 1..=n {
        let cur = &problem.state_refs[i];
        yaw += angle_diff(cur[2], problem.state_refs[i - 1][2]);
        refs.push([cur[0], cur[1], yaw]);
    }
    refs
}

/// Feedforward rollout used for cold starts.
fn cold_start(
    problem: &OcpProblem,
    cfg: &OcpConfig,
    lo: &Vec2,
    hi: &Vec2,
) -> (Vec<Vec3>, Vec<Vec2>) {
    let n = cfg.horizon;
    let mut us: Vec<Vec2> = Vec::with_capacity(n);
    for i in 0..n {
        let ur = problem.input_refs[i];
        us.push([
            (ur[0] + problem.delta_hat[0]).clamp(lo[0], hi[0]),
            (ur[1] + problem.delta_hat[1]).clamp(lo[1], hi[1]),
        ]);
    }
    let mut xs: Vec<Vec3> = Vec::with_capacity(n + 1);
    xs.push(problem.initial_state.as_array());
    for i in 0..n {
        let next = shoot_step(&xs[i], &us[i], &problem.delta_hat, cfg.dt, cfg.wheel_radius);
        xs.push(next);
    }
    (xs, us)
}

fn finalize(
    problem: &OcpProblem,
    cfg: &OcpConfig,
    xs: &[Vec3],
    us: &[Vec2],
    status: SolverStatus,
    iterations: usize,
    kkt: f64,
) -> OcpSolution {
    let n = cfg.horizon;
    let mut shooting_residual = 0.0f64;
    for i in 0..n {
        let next = shoot_step(&xs[i], &us[i], &problem.delta_hat, cfg.dt, cfg.wheel_radius);
        for c in 0..3 {
            shooting_residual = shooting_residual.max((next[c] - xs[i + 1][c]).abs());
        }
    }
    // Unwrapped refs for the reported objective, consistent with the
    // optimized cost.
    let refs = unwrap_refs(problem, n);
    let objective = cost_unwrapped(xs, us, &refs, &problem.input_refs, &problem.delta_hat, cfg);
    let clf_value = if cfg.clf_enabled {
        clf_value_with_delta(problem, &us[0], &problem.delta_hat, cfg).unwrap_or(f64::NAN)
    } else {
        0.0
    };

    let mut states: Vec<RobotState> = Vec::with_capacity(n + 1);
    states.push(problem.initial_state);
    for x in xs.iter().skip(1) {
        states.push(RobotState::from_array(x));
    }
    let inputs: Vec<CommandInput> = us.iter().map(|u| CommandInput::new(u[0], u[1])).collect();

    OcpSolution {
        states,
        inputs,
        objective,
        status,
        clf_value,
        clf_slack: (-clf_value).max(0.0),
        iterations,
        kkt_residual: kkt,
        shooting_residual,
    }
}
