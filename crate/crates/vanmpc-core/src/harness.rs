//! Closed-loop experiment runner and the tracking metric suite.
//!
//! A scenario pairs an uncertainty profile with a reference trajectory;
//! running it executes the full planner cycle against the plant for every
//! requested mode and logs one row per planner period. Runs are
//! deterministic given the scenario seed: every mode of a scenario sees
//! the same disturbance noise realization, so modes stay comparable.

use crate::estimator::EstimatorConfig;
use crate::planner::{OcpConfig, Planner, PlannerMode, SolverStatus};
use crate::plant::{
    CommandInput, ModelError, Plant, PlantConfig, RobotState, TerrainKind, UncertaintyProfile,
};
use crate::trajectories::{ReferenceSample, TrajectoryKind};
use alloc::string::String;
use alloc::vec::Vec;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

/// Distance threshold of the rise-time indicator (m).
pub const RISE_DISTANCE: f64 = 0.2;
/// A run is aborted once the robot strays this far from the reference (m).
pub const DIVERGENCE_BOUND: f64 = 100.0;
/// True uncertainties below this magnitude give no meaningful relative
/// error sample (m/s).
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// One experiment: an uncertainty profile on a reference trajectory.
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub profile: UncertaintyProfile,
    pub trajectory: TrajectoryKind,
    /// Run length (s); must be a multiple of the planner period.
    pub duration: f64,
    pub modes: Vec<PlannerMode>,
    pub seed: u64,
    /// Explicit start pose; when absent the robot starts `start_offset`
    /// meters to the right of the reference start, heading along it.
    pub initial_state: Option<RobotState>,
    /// Lateral offset of the derived start pose (m).
    pub start_offset: f64,
    /// Whether metrics may use the profile's true Δu.
    pub true_profile_known: bool,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            name: String::new(),
            profile: UncertaintyProfile::none(),
            trajectory: TrajectoryKind::Sine,
            duration: 60.0,
            modes: PlannerMode::ALL.to_vec(),
            seed: 0,
            initial_state: None,
            start_offset: 0.5,
            true_profile_known: true,
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<(), &'static str> {
        if !(self.duration > 0.0) {
            return Err("scenario duration must be positive");
        }
        if self.modes.is_empty() {
            return Err("scenario must list at least one planner mode");
        }
        Ok(())
    }

    /// The effective start pose for a robot of the given wheel radius.
    pub fn start_pose(&self, wheel_radius: f64) -> RobotState {
        if let Some(pose) = self.initial_state {
            return pose;
        }
        let r0 = self.trajectory.sample(0.0, wheel_radius).state;
        RobotState::new(
            r0.x_pos + self.start_offset * libm::sin(r0.yaw),
            r0.y_pos - self.start_offset * libm::cos(r0.yaw),
            r0.yaw,
        )
    }
}

/// One planner-period log row.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub time: f64,
    pub state: RobotState,
    pub reference: RobotState,
    pub command: CommandInput,
    pub executed: CommandInput,
    pub delta_hat: [f64; 2],
    pub delta_true: [f64; 2],
    pub gamma: [f64; 2],
    pub zeta_mean: [f64; 2],
    pub e_e: [f64; 3],
    pub e_r: [f64; 3],
    pub distance: f64,
    /// Relative error of the velocity-channel estimate, Δv̂/Δv − 1;
    /// absent when the true Δv is negligible or the mode has no estimate.
    pub rel_err_v: Option<f64>,
    /// Error part of the Lyapunov function,
    /// γ/2‖E_e‖² + (1−γ)/2‖E_r‖².
    pub lyapunov_error: f64,
    /// Decrement bound Q(E_c).
    pub decrement_bound: f64,
    /// Analytic V̇ at the applied command.
    pub lyapunov_rate: f64,
    pub clf_value: f64,
    pub clf_slack: f64,
    pub objective: f64,
    pub sqp_iterations: usize,
    pub kkt_residual: f64,
    pub solver_status: SolverStatus,
    pub weight_norm: f64,
    pub shooting_residual: f64,
}

/// Everything logged for one (scenario, mode) run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub scenario: String,
    pub mode: PlannerMode,
    pub rows: Vec<LogRow>,
    pub diverged: bool,
}

/// The Table-style indicator set of one run. Absent indicators (the
/// paper's "None" cells) are `None`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    /// First time the distance drops below [`RISE_DISTANCE`] (s).
    pub t_r: Option<f64>,
    /// Mean distance over the run (m).
    pub d_m: f64,
    /// Mean distance after the rise time (m).
    pub d_mr: Option<f64>,
    /// First peak of the smoothed distance curve (m).
    pub d_fp: f64,
    /// RMSE of the velocity-channel estimation error (m/s).
    pub e_rmsv: Option<f64>,
    /// RMSE of the roll-channel estimation error (rad).
    pub e_rmsq: Option<f64>,
    /// First zero crossing of the relative estimation error (s).
    pub t_re: Option<f64>,
    /// RMSE of the relative error after `t_re`.
    pub e_rmser: Option<f64>,
}

/// Run one (scenario, mode) pair to completion.
pub fn run_single_mode(
    scenario: &Scenario,
    mode: PlannerMode,
    ocp_cfg: &OcpConfig,
    estimator_cfg: &EstimatorConfig,
    plant_cfg: &PlantConfig,
) -> Result<RunRecord, ModelError> {
    plant_cfg.validate()?;
    // The planner's model and rate follow the plant configuration.
    let mut ocp = ocp_cfg.clone();
    ocp.wheel_radius = plant_cfg.wheel_radius;
    ocp.dt = plant_cfg.planner_period;
    let mut planner = Planner::new(mode, ocp, estimator_cfg.clone())
        .map_err(ModelError::InvalidConfig)?;

    // Every mode of a scenario draws the same noise realization.
    let mut plant = Plant::new(
        scenario.start_pose(plant_cfg.wheel_radius),
        scenario.profile.clone(),
        *plant_cfg,
        scenario.seed,
    )?;

    let period = plant_cfg.planner_period;
    let steps_f = scenario.duration / period;
    let steps = libm::round(steps_f) as usize;
    let n = planner.ocp_config().horizon;
    let radius = plant_cfg.wheel_radius;

    let mut rows = Vec::with_capacity(steps);
    let mut diverged = false;
    let mut window: Vec<ReferenceSample> = Vec::with_capacity(n + 1);
    for k in 0..steps {
        let t = k as f64 * period;
        window.clear();
        for i in 0..=n {
            window.push(scenario.trajectory.sample(t + i as f64 * period, radius));
        }
        let state = *plant.state();
        let executed = *plant.executed();
        let (command, diag) = planner.plan(&state, &executed, &window)?;
        let delta_true = scenario.profile.delta_u(&state, &executed);
        let distance = state.position_distance(&window[0].state);

        let rel_err_v = if mode.is_adaptive() && delta_true[0].abs() > REL_ERR_FLOOR {
            Some(diag.delta_hat[0] / delta_true[0] - 1.0)
        } else {
            None
        };
        let e = &diag.errors;
        let lyapunov_error = 0.5
            * (e.gamma * (e.e_e[0] * e.e_e[0] + e.e_e[1] * e.e_e[1] + e.e_e[2] * e.e_e[2])
                + (1.0 - e.gamma)
                    * (e.e_r[0] * e.e_r[0] + e.e_r[1] * e.e_r[1] + e.e_r[2] * e.e_r[2]));

        rows.push(LogRow {
            time: t,
            state,
            reference: window[0].state,
            command,
            executed,
            delta_hat: diag.delta_hat,
            delta_true,
            gamma: diag.gamma,
            zeta_mean: diag.zeta_mean,
            e_e: e.e_e,
            e_r: e.e_r,
            distance,
            rel_err_v,
            lyapunov_error,
            decrement_bound: diag.decrement_bound,
            lyapunov_rate: diag.lyapunov_rate,
            clf_value: diag.clf_value,
            clf_slack: diag.clf_slack,
            objective: diag.objective,
            sqp_iterations: diag.iterations,
            kkt_residual: diag.kkt_residual,
            solver_status: diag.status,
            weight_norm: diag.weight_norm,
            shooting_residual: diag.shooting_residual,
        });

        if distance > DIVERGENCE_BOUND {
            diverged = true;
            break;
        }
        plant.step(&command, period)?;
    }

    Ok(RunRecord {
        scenario: scenario.name.clone(),
        mode,
        rows,
        diverged,
    })
}

/// Run a scenario for every requested mode, in the listed order.
pub fn run_scenario(
    scenario: &Scenario,
    ocp_cfg: &OcpConfig,
    estimator_cfg: &EstimatorConfig,
    plant_cfg: &PlantConfig,
) -> Result<Vec<(PlannerMode, RunRecord)>, ModelError> {
    scenario.validate().map_err(ModelError::InvalidConfig)?;
    let mut out = Vec::with_capacity(scenario.modes.len());
    for &mode in &scenario.modes {
        let record = run_single_mode(scenario, mode, ocp_cfg, estimator_cfg, plant_cfg)?;
        out.push((mode, record));
    }
    Ok(out)
}

/// Centered five-sample moving average with clamped edges.
fn smooth5(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let lo = i.saturating_sub(2);
        let hi = (i + 2).min(n - 1);
        let mut s = 0.0;
        for v in &values[lo..=hi] {
            s += v;
        }
        out.push(s / (hi - lo + 1) as f64);
    }
    out
}

/// Compute the indicator set of a run.
///
/// `true_profile_known` gates the estimation-error indicators; they are
/// also absent for the plain MPC mode, which carries no estimate.
pub fn compute_metrics(record: &RunRecord, true_profile_known: bool) -> MetricReport {
    let rows = &record.rows;
    assert!(!rows.is_empty(), "record must hold at least one row");
    let distances: Vec<f64> = rows.iter().map(|r| r.distance).collect();

    let t_r = rows
        .iter()
        .find(|r| r.distance < RISE_DISTANCE)
        .map(|r| r.time);
    let d_m = distances.iter().sum::<f64>() / distances.len() as f64;
    let d_mr = t_r.map(|tr| {
        let tail: Vec<f64> = rows
            .iter()
            .filter(|r| r.time >= tr)
            .map(|r| r.distance)
            .collect();
        tail.iter().sum::<f64>() / tail.len() as f64
    });

    let smoothed = smooth5(&distances);
    let mut d_fp = None;
    for i in 1..smoothed.len().saturating_sub(1) {
        if smoothed[i] > smoothed[i - 1] && smoothed[i] > smoothed[i + 1] {
            d_fp = Some(smoothed[i]);
            break;
        }
    }
    let d_fp = d_fp.unwrap_or_else(|| smoothed.iter().cloned().fold(f64::NEG_INFINITY, f64::max));

    let estimates_present = record.mode.is_adaptive() && true_profile_known;
    let (e_rmsv, e_rmsq) = if estimates_present {
        let mut sv = 0.0;
        let mut sq = 0.0;
        for r in rows {
            let ev = r.delta_hat[0] - r.delta_true[0];
            let eq = r.delta_hat[1] - r.delta_true[1];
            sv += ev * ev;
            sq += eq * eq;
        }
        let n = rows.len() as f64;
        (Some(libm::sqrt(sv / n)), Some(libm::sqrt(sq / n)))
    } else {
        (None, None)
    };

    // Relative-error indicators on the velocity channel.
    let rel: Vec<(f64, f64)> = if estimates_present {
        rows.iter()
            .filter_map(|r| r.rel_err_v.map(|v| (r.time, v)))
            .collect()
    } else {
        Vec::new()
    };
    let mut t_re = None;
    for i in 0..rel.len() {
        if rel[i].1 == 0.0 {
            t_re = Some(rel[i].0);
            break;
        }
        if i > 0 && (rel[i - 1].1 < 0.0) != (rel[i].1 < 0.0) {
            t_re = Some(rel[i].0);
            break;
        }
    }
    let e_rmser = t_re.map(|tre| {
        let tail: Vec<f64> = rel
            .iter()
            .filter(|(t, _)| *t >= tre)
            .map(|(_, v)| *v)
            .collect();
        libm::sqrt(tail.iter().map(|v| v * v).sum::<f64>() / tail.len() as f64)
    });

    MetricReport {
        t_r,
        d_m,
        d_mr,
        d_fp,
        e_rmsv,
        e_rmsq,
        t_re,
        e_rmser,
    }
}

/// Largest distance over rows at or after the given time.
pub fn peak_distance_after(record: &RunRecord, t0: f64) -> f64 {
    record
        .rows
        .iter()
        .filter(|r| r.time >= t0)
        .map(|r| r.distance)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// The built-in experiment matrix: three flat-floor scenarios with
/// velocity-proportional artificial uncertainties, three terrain maps on
/// the sine trajectory, and the switched-terrain figure-eight.
pub fn artificial_uncertainty_suite() -> Vec<Scenario> {
    let mut suite = Vec::with_capacity(7);
    for (name, xi, seed) in [
        ("flat_xi00", 0.0, 11u64),
        ("flat_xi02", 0.2, 12),
        ("flat_xi04", 0.4, 13),
    ] {
        suite.push(Scenario {
            name: String::from(name),
            profile: if xi == 0.0 {
                UncertaintyProfile::none()
            } else {
                UncertaintyProfile::proportional(xi)
            },
            seed,
            ..Scenario::default()
        });
    }
    for (name, kind, seed) in [
        ("rubber", TerrainKind::Rubber, 14u64),
        ("hollow_tiles", TerrainKind::HollowTiles, 15),
        ("grass", TerrainKind::Grass, 16),
    ] {
        suite.push(Scenario {
            name: String::from(name),
            profile: UncertaintyProfile::terrain(kind),
            seed,
            ..Scenario::default()
        });
    }
    suite.push(Scenario {
        name: String::from("varied"),
        profile: UncertaintyProfile::spatial_switch(0.0),
        trajectory: TrajectoryKind::Gerono,
        duration: 100.5,
        seed: 17,
        ..Scenario::default()
    });
    suite
}
