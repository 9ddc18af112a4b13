//! Instruction planners: plain MPC and its adaptive variants.
//!
//! All four planners solve the same horizon-N optimal control problem,
//! transcribed by direct multiple shooting (states and inputs are both
//! decision variables, coupled by RK4 shooting-gap equalities) and solved
//! by the condensed SQP in [`sqp`]. The adaptive variants additionally run
//! the RBF estimator each cycle and feed its compensation Δû into the
//! model, the input-box shift and the input-cost center; `van` drives the
//! estimator's learning step from the replay-buffered uncertainty level.

mod qp;
mod sqp;

pub use sqp::solve_ocp;

use crate::estimator::{
    basis_eval, estimate_uncertainty, uncertainty_level, update_step_size, update_weights,
    CycleMemory, ErrorTriple, EstimatorConfig, NetworkInput, NetworkWeights, RbfEstimator,
    StepSizeState,
};
use crate::math::{dot3, rk4_step, Mat32, Vec2, Vec3};
use crate::plant::{self, CommandInput, ModelError, RobotState};
use crate::trajectories::{tracking_errors, ReferenceSample};
use alloc::vec::Vec;
use core::str::FromStr;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

/// Roll-angle magnitude beyond which the shifted input box is clamped so
/// the model's tan(q_r) stays well-conditioned (pi/2 is the hard domain
/// edge at ~1.5708).
pub const ROLL_BOX_LIMIT: f64 = 1.45;

/// The four instruction planners.
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PlannerMode {
    /// Nominal-model MPC, no estimator.
    Mpc,
    /// Adaptive MPC with a fixed small learning step.
    AnSmall,
    /// Adaptive MPC with a fixed large learning step.
    AnLarge,
    /// Adaptive MPC with the variable step size.
    Van,
}

impl PlannerMode {
    pub const ALL: [PlannerMode; 4] = [
        PlannerMode::Mpc,
        PlannerMode::AnSmall,
        PlannerMode::AnLarge,
        PlannerMode::Van,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PlannerMode::Mpc => "mpc",
            PlannerMode::AnSmall => "an_small",
            PlannerMode::AnLarge => "an_large",
            PlannerMode::Van => "van",
        }
    }

    /// Whether this mode runs the disturbance estimator.
    pub fn is_adaptive(&self) -> bool {
        !matches!(self, PlannerMode::Mpc)
    }
}

impl FromStr for PlannerMode {
    type Err = &'static str;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mpc" => Ok(PlannerMode::Mpc),
            "an_small" => Ok(PlannerMode::AnSmall),
            "an_large" => Ok(PlannerMode::AnLarge),
            "van" => Ok(PlannerMode::Van),
            _ => Err("unknown planner mode (expected mpc, an_small, an_large or van)"),
        }
    }
}

/// Horizon, weights and constraint boxes of the optimal control problem.
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
#[derive(Debug, Clone, PartialEq)]
pub struct OcpConfig {
    /// Prediction horizon N (shooting intervals).
    pub horizon: usize,
    /// Shooting interval length (s); equals the planner period.
    pub dt: f64,
    /// Sphere radius of the planner's kinematic model (m).
    pub wheel_radius: f64,
    /// Diagonal of the state weight Q (x, y, yaw).
    pub state_weights: Vec3,
    /// Diagonal of the input weight R (v, q_r).
    pub input_weights: Vec2,
    /// Diagonal of the CLF gain K.
    pub clf_gain: Vec3,
    /// State box lower bound; -inf disables a component.
    pub state_min: Vec3,
    /// State box upper bound; +inf disables a component.
    pub state_max: Vec3,
    /// Input box lower bound (before the Δû shift).
    pub input_min: Vec2,
    /// Input box upper bound (before the Δû shift).
    pub input_max: Vec2,
    /// Enforce the control Lyapunov function inequality at step 0.
    pub clf_enabled: bool,
    /// Linear penalty weight of the CLF (and state-box) slack.
    pub clf_slack_weight: f64,
}

impl Default for OcpConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            dt: 0.1,
            wheel_radius: 0.2,
            state_weights: [10.0, 10.0, 1.0],
            input_weights: [0.5, 0.5],
            clf_gain: [1.0, 1.0, 1.0],
            state_min: [f64::NEG_INFINITY; 3],
            state_max: [f64::INFINITY; 3],
            input_min: [-0.8, -0.6],
            input_max: [0.8, 0.6],
            clf_enabled: true,
            clf_slack_weight: 1e4,
        }
    }
}

impl OcpConfig {
    pub fn validate(&self) -> Result<(), &'static str> {
        if self.horizon < 2 {
            return Err("horizon must be >= 2");
        }
        if !(self.dt > 0.0) {
            return Err("dt must be positive");
        }
        if !(self.wheel_radius > 0.0) {
            return Err("wheel_radius must be positive");
        }
        if self.state_weights.iter().any(|q| *q < 0.0) {
            return Err("state weights must be >= 0");
        }
        if self.input_weights.iter().any(|r| !(*r > 0.0)) {
            return Err("input weights must be > 0");
        }
        if self.clf_gain.iter().any(|k| !(*k > 0.0)) {
            return Err("clf gain must be > 0");
        }
        for c in 0..2 {
            if !(self.input_min[c] < self.input_max[c]) {
                return Err("input box must be nonempty");
            }
        }
        for c in 0..3 {
            if self.state_min[c] > self.state_max[c] {
                return Err("state box must be nonempty");
            }
        }
        if !(self.clf_slack_weight > 0.0) {
            return Err("clf_slack_weight must be positive");
        }
        Ok(())
    }

    /// Whether any state-box component is finite.
    pub fn state_box_enabled(&self) -> bool {
        self.state_min.iter().any(|v| v.is_finite())
            || self.state_max.iter().any(|v| v.is_finite())
    }
}

/// One fully-assembled OCP instance.
#[derive(Debug, Clone)]
pub struct OcpProblem {
    pub initial_state: RobotState,
    pub initial_input: CommandInput,
    /// Reference states over the horizon, N+1 entries.
    pub state_refs: Vec<Vec3>,
    /// Reference inputs over the horizon, N entries.
    pub input_refs: Vec<Vec2>,
    /// Current uncertainty estimate Δû.
    pub delta_hat: Vec2,
    /// Input Jacobian of the nominal model at (x_k, u_k).
    pub jacobian: Mat32,
    pub errors: ErrorTriple,
    /// Model derivative of the previous cycle's one-step prediction.
    pub prev_predicted_derivative: Vec3,
    /// Reference derivative at the current time.
    pub reference_derivative: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverStatus {
    /// KKT residual below tolerance.
    Converged,
    /// Iteration cap hit; the best iterate is returned.
    MaxIterations,
    /// The initial state violates the state box beyond tolerance.
    InfeasibleBoxes,
}

impl SolverStatus {
    pub fn name(&self) -> &'static str {
        match self {
            SolverStatus::Converged => "converged",
            SolverStatus::MaxIterations => "max_iterations",
            SolverStatus::InfeasibleBoxes => "infeasible_boxes",
        }
    }
}

/// Solution of one OCP solve.
#[derive(Debug, Clone)]
pub struct OcpSolution {
    /// Planned states x(0..N|k); x(0|k) equals the supplied initial state.
    pub states: Vec<RobotState>,
    /// Planned inputs u(0..N-1|k), inside the shifted input box.
    pub inputs: Vec<CommandInput>,
    pub objective: f64,
    pub status: SolverStatus,
    /// H_clf evaluated at u(0|k) of the solution.
    pub clf_value: f64,
    /// Positive part of the CLF violation at the solution.
    pub clf_slack: f64,
    pub iterations: usize,
    pub kkt_residual: f64,
    /// Largest shooting-gap component at the solution.
    pub shooting_residual: f64,
}

/// One RK4 step of the compensated model `ẋ = f̂(x,u) − f̂'_u(x,u)·Δû`
/// over `dt`; the yaw of the result is wrapped.
pub fn discretize_dynamics(
    state: &RobotState,
    cmd: &CommandInput,
    delta_hat: &Vec2,
    dt: f64,
    wheel_radius: f64,
) -> Result<RobotState, ModelError> {
    if !(cmd.roll_angle.abs() < core::f64::consts::FRAC_PI_2) {
        return Err(ModelError::RollOutOfDomain(cmd.roll_angle));
    }
    let next = shoot_step(
        &state.as_array(),
        &cmd.as_array(),
        delta_hat,
        dt,
        wheel_radius,
    );
    Ok(RobotState::from_array(&next))
}

/// Internal shooting map on raw arrays; the yaw is left unwrapped.
pub(crate) fn shoot_step(x: &Vec3, u: &Vec2, delta_hat: &Vec2, dt: f64, radius: f64) -> Vec3 {
    rk4_step(
        |s| plant::adaptive_derivative_raw(s, u, delta_hat, radius),
        x,
        dt,
    )
}

/// Evaluate the tracking objective
/// `J = Σ ‖x_i − x_ref,i‖²_Q + Σ ‖u_i − Δû − u_ref,i‖²_R`
/// on a candidate trajectory. Yaw deviations are wrapped.
pub fn build_cost(
    problem: &OcpProblem,
    cfg: &OcpConfig,
    states: &[RobotState],
    inputs: &[CommandInput],
) -> f64 {
    let q = cfg.state_weights;
    let r = cfg.input_weights;
    let mut j = 0.0;
    for (x, xr) in states.iter().zip(&problem.state_refs) {
        let e = [
            x.x_pos - xr[0],
            x.y_pos - xr[1],
            crate::math::angle_diff(x.yaw, xr[2]),
        ];
        j += q[0] * e[0] * e[0] + q[1] * e[1] * e[1] + q[2] * e[2] * e[2];
    }
    for (u, ur) in inputs.iter().zip(&problem.input_refs) {
        let e = [
            u.velocity - problem.delta_hat[0] - ur[0],
            u.roll_angle - problem.delta_hat[1] - ur[1],
        ];
        j += r[0] * e[0] * e[0] + r[1] * e[1] * e[1];
    }
    j
}

/// The control Lyapunov function constraint value
/// `H_clf = −E_cᵀ[f̂(x_k,u₀) − f̂'_u·Δû] + γ·E_eᵀ·ẋ̂₍₋₁₎
///          + (1−γ)·E_rᵀ·ẋ_ref − ½·E_cᵀKE_c`,
/// with Δû recomputed from the supplied basis rows and weights.
/// Feasibility of the OCP requires `H_clf >= 0`.
pub fn clf_constraint_value(
    problem: &OcpProblem,
    u0: &CommandInput,
    weights: &NetworkWeights,
    h1: &[f64],
    h2: &[f64],
    step: &StepSizeState,
    cfg: &OcpConfig,
) -> Result<f64, ModelError> {
    let delta = estimate_uncertainty(weights, h1, h2, step);
    clf_value_with_delta(problem, &u0.as_array(), &delta, cfg)
}

/// CLF value with an explicit Δû (the planner's hot path).
pub(crate) fn clf_value_with_delta(
    problem: &OcpProblem,
    u0: &Vec2,
    delta_hat: &Vec2,
    cfg: &OcpConfig,
) -> Result<f64, ModelError> {
    if !(u0[1].abs() < core::f64::consts::FRAC_PI_2) {
        return Err(ModelError::RollOutOfDomain(u0[1]));
    }
    let e = &problem.errors;
    let bracket = plant::adaptive_derivative_with_fixed_jacobian(
        &problem.initial_state.as_array(),
        u0,
        delta_hat,
        &problem.jacobian,
        cfg.wheel_radius,
    );
    let k = cfg.clf_gain;
    let quad = 0.5
        * (k[0] * e.e_c[0] * e.e_c[0]
            + k[1] * e.e_c[1] * e.e_c[1]
            + k[2] * e.e_c[2] * e.e_c[2]);
    Ok(-dot3(&e.e_c, &bracket)
        + e.gamma * dot3(&e.e_e, &problem.prev_predicted_derivative)
        + (1.0 - e.gamma) * dot3(&e.e_r, &problem.reference_derivative)
        - quad)
}

/// Analytic Lyapunov rate of the composite-error function, evaluated at
/// the applied command. Satisfies `V̇ = −H_clf − Q(E_c)` by construction;
/// computing it independently gives the runtime audit a second route.
pub fn lyapunov_rate(
    problem: &OcpProblem,
    applied: &CommandInput,
    delta_hat: &Vec2,
    cfg: &OcpConfig,
) -> Result<f64, ModelError> {
    if !(applied.roll_angle.abs() < core::f64::consts::FRAC_PI_2) {
        return Err(ModelError::RollOutOfDomain(applied.roll_angle));
    }
    let e = &problem.errors;
    let bracket = plant::adaptive_derivative_with_fixed_jacobian(
        &problem.initial_state.as_array(),
        &applied.as_array(),
        delta_hat,
        &problem.jacobian,
        cfg.wheel_radius,
    );
    Ok(dot3(&e.e_c, &bracket)
        - (1.0 - e.gamma) * dot3(&e.e_r, &problem.reference_derivative)
        - e.gamma * dot3(&e.e_e, &problem.prev_predicted_derivative))
}

/// Quadratic decrement bound Q(E_c) = ½ E_cᵀ K E_c.
pub fn lyapunov_decrement_bound(e_c: &Vec3, cfg: &OcpConfig) -> f64 {
    let k = cfg.clf_gain;
    0.5 * (k[0] * e_c[0] * e_c[0] + k[1] * e_c[1] * e_c[1] + k[2] * e_c[2] * e_c[2])
}

/// Per-cycle planner diagnostics, emitted as run-log columns.
#[derive(Debug, Clone)]
pub struct PlanDiagnostics {
    pub chi: [f64; 4],
    pub zeta_mean: Vec2,
    pub gamma: Vec2,
    pub delta_hat: Vec2,
    pub errors: ErrorTriple,
    pub objective: f64,
    pub iterations: usize,
    pub kkt_residual: f64,
    pub clf_value: f64,
    pub clf_slack: f64,
    pub status: SolverStatus,
    pub weight_norm: f64,
    /// Analytic V̇ at the applied command.
    pub lyapunov_rate: f64,
    /// Q(E_c) at this cycle.
    pub decrement_bound: f64,
    pub shooting_residual: f64,
}

/// One instruction planner instance owning its estimator state, cycle
/// memory and warm-start solution. Create one per (scenario, mode) run.
#[derive(Debug, Clone)]
pub struct Planner {
    mode: PlannerMode,
    ocp: OcpConfig,
    estimator: RbfEstimator,
    warm: Option<OcpSolution>,
}

impl Planner {
    pub fn new(
        mode: PlannerMode,
        ocp: OcpConfig,
        estimator_cfg: EstimatorConfig,
    ) -> Result<Self, &'static str> {
        ocp.validate()?;
        estimator_cfg.validate()?;
        let step = match mode {
            PlannerMode::Van => StepSizeState::new(estimator_cfg.step),
            PlannerMode::AnSmall => StepSizeState::fixed(estimator_cfg.fixed_small_gamma),
            PlannerMode::AnLarge => StepSizeState::fixed(estimator_cfg.fixed_large_gamma),
            // Unused in mpc mode; keep the floor value for the log.
            PlannerMode::Mpc => StepSizeState::fixed([0.0, 0.0]),
        };
        let estimator = RbfEstimator::new(estimator_cfg, step);
        Ok(Self {
            mode,
            ocp,
            estimator,
            warm: None,
        })
    }

    pub fn mode(&self) -> PlannerMode {
        self.mode
    }

    pub fn ocp_config(&self) -> &OcpConfig {
        &self.ocp
    }

    pub fn estimator(&self) -> &RbfEstimator {
        &self.estimator
    }

    /// One full planner cycle: build the estimator input, update the
    /// step size (van) and the network weights, estimate Δû, assemble and
    /// solve the OCP, remember the one-step prediction, and return the
    /// first optimal command. A `max_iterations` solve is not an error;
    /// the best iterate is used and flagged in the diagnostics.
    pub fn plan(
        &mut self,
        measured_state: &RobotState,
        measured_input: &CommandInput,
        window: &[ReferenceSample],
    ) -> Result<(CommandInput, PlanDiagnostics), ModelError> {
        let n = self.ocp.horizon;
        assert!(
            window.len() == n + 1,
            "reference window must have horizon+1 samples"
        );
        let gamma_blend = self.estimator.config.gamma;

        // Errors against the previous cycle's prediction; zero on the
        // first cycle, before any prediction exists.
        let errors = match &self.estimator.memory {
            Some(mem) => tracking_errors(
                measured_state,
                &window[0].state,
                &mem.predicted_state,
                gamma_blend,
            ),
            None => ErrorTriple::new([0.0; 3], [0.0; 3], gamma_blend),
        };

        let jac = plant::input_jacobian_raw_pub(
            measured_state.yaw,
            measured_input.velocity,
            measured_input.roll_angle,
            self.ocp.wheel_radius,
        );

        let mut chi = NetworkInput::default();
        let mut delta_hat = [0.0, 0.0];
        if self.mode.is_adaptive() {
            chi = crate::estimator::build_input(
                measured_state,
                measured_input,
                self.estimator.memory.as_ref(),
                &mut self.estimator.norm,
            );
            if self.mode == PlannerMode::Van {
                let zeta = uncertainty_level(&chi, &self.estimator.config.basis);
                update_step_size(&mut self.estimator.step, zeta);
            }
            let (h1, h2) = basis_eval(&chi, &self.estimator.config.basis);
            update_weights(
                &mut self.estimator.weights,
                &errors,
                &jac,
                &h1,
                &h2,
                &self.estimator.step,
                self.ocp.dt,
                self.estimator.config.weight_cap,
            );
            delta_hat = estimate_uncertainty(&self.estimator.weights, &h1, &h2, &self.estimator.step);
        }

        let prev_predicted_derivative = self
            .estimator
            .memory
            .as_ref()
            .map(|m| m.predicted_derivative)
            .unwrap_or([0.0; 3]);

        let problem = OcpProblem {
            initial_state: *measured_state,
            initial_input: *measured_input,
            state_refs: window.iter().map(|s| s.state.as_array()).collect(),
            input_refs: window[..n].iter().map(|s| s.input.as_array()).collect(),
            delta_hat,
            jacobian: jac,
            errors,
            prev_predicted_derivative,
            reference_derivative: window[0].derivative,
        };

        let solution = solve_ocp(&problem, &self.ocp, self.warm.as_ref());
        let command = solution.inputs[0];

        // Remember the one-step prediction for the next cycle.
        let predicted_state = solution.states[1];
        let predicted_input = solution.inputs[if n >= 2 { 1 } else { 0 }];
        let predicted_derivative = plant::adaptive_derivative_raw(
            &predicted_state.as_array(),
            &predicted_input.as_array(),
            &delta_hat,
            self.ocp.wheel_radius,
        );
        self.estimator.memory = Some(CycleMemory {
            prev_state: *measured_state,
            predicted_state,
            predicted_input,
            prev_estimate: delta_hat,
            predicted_derivative,
        });

        let vdot = lyapunov_rate(&problem, &command, &delta_hat, &self.ocp)?;
        let diagnostics = PlanDiagnostics {
            chi: chi.0,
            zeta_mean: self.estimator.step.zeta_mean(),
            gamma: self.estimator.step.gamma(),
            delta_hat,
            errors,
            objective: solution.objective,
            iterations: solution.iterations,
            kkt_residual: solution.kkt_residual,
            clf_value: solution.clf_value,
            clf_slack: solution.clf_slack,
            status: solution.status,
            weight_norm: self.estimator.weights.frobenius_norm(),
            lyapunov_rate: vdot,
            decrement_bound: lyapunov_decrement_bound(&errors.e_c, &self.ocp),
            shooting_residual: solution.shooting_residual,
        };
        self.warm = Some(solution);
        Ok((command, diagnostics))
    }
}
