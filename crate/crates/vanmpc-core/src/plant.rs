//! Ground-truth simulation of the robot as seen by the planner.
//!
//! The robot is a unicycle-class vehicle: planar pose driven by a forward
//! velocity `v` and a roll angle `q_r` that steers through `tan(q_r) / R`.
//! All unmodeled kinodynamics (terrain, bottom-controller error, actuation
//! mismatch) are folded into a command-level uncertainty `Δu` that enters
//! the true dynamics as `ẋ = f̂(x, u) − f̂'_u(x, u) · Δu`, i.e. the robot
//! behaves as if a perturbed command had been executed.
//!
//! The bottom torque controllers of the physical robot are abstracted as a
//! first-order lag between the commanded and the executed input.

use crate::math::{mat32_mul_vec2, rk4_step, wrap_angle, Mat32, Vec2, Vec3};
use alloc::boxed::Box;
use alloc::vec::Vec;
use core::f64::consts::FRAC_PI_2;
use core::fmt;
use rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

/// Planar pose (X, Y, φ) of the robot in the world frame.
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RobotState {
    /// World-frame x position (m).
    pub x_pos: f64,
    /// World-frame y position (m).
    pub y_pos: f64,
    /// Yaw angle (rad), kept wrapped to (-pi, pi].
    pub yaw: f64,
}

impl RobotState {
    /// Construct a pose; the yaw is wrapped.
    pub fn new(x_pos: f64, y_pos: f64, yaw: f64) -> Self {
        Self {
            x_pos,
            y_pos,
            yaw: wrap_angle(yaw),
        }
    }

    pub fn as_array(&self) -> Vec3 {
        [self.x_pos, self.y_pos, self.yaw]
    }

    /// Construct from an array, wrapping the yaw.
    pub fn from_array(a: &Vec3) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    /// Euclidean position distance to another pose (yaw ignored).
    pub fn position_distance(&self, other: &RobotState) -> f64 {
        libm::hypot(self.x_pos - other.x_pos, self.y_pos - other.y_pos)
    }
}

/// Forward velocity and roll angle, the planner's decision variables.
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CommandInput {
    /// Forward velocity (m/s).
    pub velocity: f64,
    /// Roll angle (rad); must stay strictly inside (-pi/2, pi/2).
    pub roll_angle: f64,
}

impl CommandInput {
    pub fn new(velocity: f64, roll_angle: f64) -> Self {
        Self {
            velocity,
            roll_angle,
        }
    }

    pub fn as_array(&self) -> Vec2 {
        [self.velocity, self.roll_angle]
    }
}

/// Fixed plant parameters and loop rates.
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantConfig {
    /// Sphere radius R (m).
    pub wheel_radius: f64,
    /// Bottom-layer integration period (s).
    pub plant_substep: f64,
    /// Planner period (s); must be an integer multiple of `plant_substep`.
    pub planner_period: f64,
    /// Time constant of the first-order command tracking lag (s).
    /// Zero means the commanded input is executed exactly.
    pub execution_lag: f64,
}

impl Default for PlantConfig {
    fn default() -> Self {
        Self {
            wheel_radius: 0.2,
            plant_substep: 0.02,
            planner_period: 0.1,
            execution_lag: 0.05,
        }
    }
}

impl PlantConfig {
    /// Check the structural invariants of the configuration.
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.wheel_radius > 0.0) || !self.wheel_radius.is_finite() {
            return Err(ModelError::InvalidConfig("wheel_radius must be positive"));
        }
        if !(self.plant_substep > 0.0) {
            return Err(ModelError::InvalidConfig("plant_substep must be positive"));
        }
        if self.execution_lag < 0.0 {
            return Err(ModelError::InvalidConfig("execution_lag must be >= 0"));
        }
        let ratio = self.planner_period / self.plant_substep;
        if (ratio - libm::round(ratio)).abs() > 1e-9 || ratio < 1.0 {
            return Err(ModelError::InvalidConfig(
                "planner_period must be an integer multiple of plant_substep",
            ));
        }
        Ok(())
    }

    /// Number of plant substeps per planner period.
    pub fn substeps_per_period(&self) -> usize {
        libm::round(self.planner_period / self.plant_substep) as usize
    }
}

/// Errors from the kinematic model and the integrator.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    /// Roll angle at or beyond +-pi/2 where tan diverges.
    RollOutOfDomain(f64),
    /// Integration duration is not a positive multiple of the substep.
    BadDuration(f64),
    /// A configuration invariant is violated.
    InvalidConfig(&'static str),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::RollOutOfDomain(q) => {
                write!(f, "roll angle {q} rad is outside (-pi/2, pi/2)")
            }
            ModelError::BadDuration(d) => {
                write!(f, "duration {d} s is not a positive multiple of the plant substep")
            }
            ModelError::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
        }
    }
}

#[cfg(test)]
impl std::error::Error for ModelError {}

/// Built-in terrain uncertainty maps.
///
/// The maps are synthetic stand-ins spanning a small, a noisy and a large
/// uncertainty regime; all coefficients can be bypassed by composing custom
/// profiles instead.
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerrainKind {
    /// Small proportional slip: Δu = (0.08 v, 0.02 sin q_r).
    Rubber,
    /// Moderate slip plus zero-mean noise (std 0.05 m/s on the v channel).
    HollowTiles,
    /// Large slip: Δu = (0.25 v, 0.05 q_r).
    Grass,
}

/// Velocity-proportional slip coefficient of the hollow-tiles terrain.
pub const HOLLOW_TILES_XI: f64 = 0.15;
/// Noise standard deviation (m/s) on the velocity channel of hollow tiles.
pub const HOLLOW_TILES_NOISE_STD: f64 = 0.05;

/// A half-open x-interval `[x_min, x_max)` of the world frame paired with
/// the profile that applies inside it.
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialRegion {
    pub x_min: f64,
    pub x_max: f64,
    pub profile: Box<UncertaintyProfile>,
}

/// What kind of command-level uncertainty acts on the robot.
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
#[derive(Debug, Clone, PartialEq, Default)]
pub enum ProfileKind {
    /// No uncertainty: the nominal model is exact.
    #[default]
    None,
    /// Δu = (ξ·v, 0), proportional to the executed forward velocity.
    ProportionalVelocity { xi: f64 },
    /// One of the built-in terrain maps.
    Terrain(TerrainKind),
    /// Position-dependent switching between profiles; the first region
    /// containing the robot's x coordinate wins, no match means Δu = 0.
    SpatialSwitch(Vec<SpatialRegion>),
}

/// Command-level uncertainty profile with optional additive noise.
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
#[derive(Debug, Clone, PartialEq, Default)]
pub struct UncertaintyProfile {
    pub kind: ProfileKind,
    /// Additive zero-mean noise std per channel (m/s, rad), sampled once
    /// per plant substep and held constant across the RK4 stages.
    pub noise_std: [f64; 2],
}

impl UncertaintyProfile {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn proportional(xi: f64) -> Self {
        Self {
            kind: ProfileKind::ProportionalVelocity { xi },
            ..Self::default()
        }
    }

    pub fn terrain(kind: TerrainKind) -> Self {
        let noise_std = match kind {
            TerrainKind::HollowTiles => [HOLLOW_TILES_NOISE_STD, 0.0],
            _ => [0.0, 0.0],
        };
        Self {
            kind: ProfileKind::Terrain(kind),
            noise_std,
        }
    }

    /// The varied-terrain profile: rubber for x >= boundary, grass below.
    pub fn spatial_switch(boundary_x: f64) -> Self {
        Self {
            kind: ProfileKind::SpatialSwitch(alloc::vec![
                SpatialRegion {
                    x_min: boundary_x,
                    x_max: f64::INFINITY,
                    profile: Box::new(Self::terrain(TerrainKind::Rubber)),
                },
                SpatialRegion {
                    x_min: f64::NEG_INFINITY,
                    x_max: boundary_x,
                    profile: Box::new(Self::terrain(TerrainKind::Grass)),
                },
            ]),
            noise_std: [0.0, 0.0],
        }
    }

    /// Deterministic part of Δu at the given state and executed command.
    pub fn delta_u(&self, state: &RobotState, cmd: &CommandInput) -> Vec2 {
        match &self.kind {
            ProfileKind::None => [0.0, 0.0],
            ProfileKind::ProportionalVelocity { xi } => [xi * cmd.velocity, 0.0],
            ProfileKind::Terrain(kind) => match kind {
                TerrainKind::Rubber => {
                    [0.08 * cmd.velocity, 0.02 * libm::sin(cmd.roll_angle)]
                }
                TerrainKind::HollowTiles => [HOLLOW_TILES_XI * cmd.velocity, 0.0],
                TerrainKind::Grass => [0.25 * cmd.velocity, 0.05 * cmd.roll_angle],
            },
            ProfileKind::SpatialSwitch(regions) => {
                for region in regions {
                    if state.x_pos >= region.x_min && state.x_pos < region.x_max {
                        return region.profile.delta_u(state, cmd);
                    }
                }
                [0.0, 0.0]
            }
        }
    }

    /// Effective noise std per channel at the given position (the active
    /// region's std for switched profiles, plus this profile's own).
    pub fn noise_std_at(&self, state: &RobotState) -> Vec2 {
        let inner = match &self.kind {
            ProfileKind::SpatialSwitch(regions) => {
                let mut std = [0.0, 0.0];
                for region in regions {
                    if state.x_pos >= region.x_min && state.x_pos < region.x_max {
                        std = region.profile.noise_std_at(state);
                        break;
                    }
                }
                std
            }
            _ => [0.0, 0.0],
        };
        [self.noise_std[0] + inner[0], self.noise_std[1] + inner[1]]
    }
}

/// One deterministic Gaussian noise stream per command channel.
///
/// Streams are ChaCha8-backed so that a (seed, channel) pair always
/// reproduces the same sequence regardless of platform.
#[derive(Debug, Clone)]
pub struct NoiseStreams {
    channels: [ChaCha8Rng; 2],
}

impl NoiseStreams {
    /// Derive the two channel streams from a single seed.
    pub fn from_seed(seed: u64) -> Self {
        let make = |chan: u64| {
            let mut bytes = [0u8; 32];
            bytes[..8].copy_from_slice(&seed.to_le_bytes());
            bytes[8..16].copy_from_slice(&chan.to_le_bytes());
            bytes[16..24].copy_from_slice(&0x9e37_79b9_7f4a_7c15u64.to_le_bytes());
            ChaCha8Rng::from_seed(bytes)
        };
        Self {
            channels: [make(0), make(1)],
        }
    }

    /// One zero-mean Gaussian sample per channel with the given stds.
    /// Channels with zero std consume no randomness.
    pub fn sample(&mut self, std: &Vec2) -> Vec2 {
        let mut out = [0.0, 0.0];
        for (i, s) in std.iter().enumerate() {
            if *s > 0.0 {
                out[i] = s * standard_normal(&mut self.channels[i]);
            }
        }
        out
    }
}

/// Box-Muller standard normal draw.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // (0, 1] uniforms from the top 53 bits.
    let u1 = ((rng.next_u64() >> 11) + 1) as f64 * (1.0 / 9007199254740992.0);
    let u2 = (rng.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0);
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
}

fn check_roll(roll: f64) -> Result<(), ModelError> {
    if !(roll.abs() < FRAC_PI_2) || !roll.is_finite() {
        return Err(ModelError::RollOutOfDomain(roll));
    }
    Ok(())
}

/// Nominal kinematics: (ẋ, ẏ, φ̇) = (v cos φ, v sin φ, v tan q_r / R).
pub fn nominal_derivative(
    state: &RobotState,
    cmd: &CommandInput,
    cfg: &PlantConfig,
) -> Result<Vec3, ModelError> {
    check_roll(cmd.roll_angle)?;
    Ok(nominal_derivative_raw(
        state.yaw,
        cmd.velocity,
        cmd.roll_angle,
        cfg.wheel_radius,
    ))
}

fn nominal_derivative_raw(yaw: f64, v: f64, q_r: f64, radius: f64) -> Vec3 {
    [
        v * libm::cos(yaw),
        v * libm::sin(yaw),
        v * libm::tan(q_r) / radius,
    ]
}

/// Analytic Jacobian of the nominal kinematics with respect to (v, q_r).
///
/// Column 1: (cos φ, sin φ, tan q_r / R). Column 2: (0, 0, v sec² q_r / R).
pub fn input_jacobian(
    state: &RobotState,
    cmd: &CommandInput,
    cfg: &PlantConfig,
) -> Result<Mat32, ModelError> {
    check_roll(cmd.roll_angle)?;
    Ok(input_jacobian_raw(
        state.yaw,
        cmd.velocity,
        cmd.roll_angle,
        cfg.wheel_radius,
    ))
}

pub(crate) fn input_jacobian_raw_pub(yaw: f64, v: f64, q_r: f64, radius: f64) -> Mat32 {
    input_jacobian_raw(yaw, v, q_r, radius)
}

fn input_jacobian_raw(yaw: f64, v: f64, q_r: f64, radius: f64) -> Mat32 {
    let cos_q = libm::cos(q_r);
    let sec2 = 1.0 / (cos_q * cos_q);
    [
        [libm::cos(yaw), 0.0],
        [libm::sin(yaw), 0.0],
        [libm::tan(q_r) / radius, v * sec2 / radius],
    ]
}

/// True dynamics under the deterministic part of the uncertainty profile:
/// `ẋ = f̂(x, u) − f̂'_u(x, u) · Δu`.
pub fn true_derivative(
    state: &RobotState,
    cmd: &CommandInput,
    profile: &UncertaintyProfile,
    cfg: &PlantConfig,
) -> Result<Vec3, ModelError> {
    let delta = profile.delta_u(state, cmd);
    derivative_with_delta(state, cmd, &delta, cfg)
}

/// True dynamics with an explicit Δu (deterministic profile part plus any
/// sampled noise).
pub fn derivative_with_delta(
    state: &RobotState,
    cmd: &CommandInput,
    delta_u: &Vec2,
    cfg: &PlantConfig,
) -> Result<Vec3, ModelError> {
    check_roll(cmd.roll_angle)?;
    Ok(derivative_with_delta_raw(
        &state.as_array(),
        &cmd.as_array(),
        delta_u,
        cfg.wheel_radius,
    ))
}

pub(crate) fn adaptive_derivative_raw(x: &Vec3, u: &Vec2, delta_u: &Vec2, radius: f64) -> Vec3 {
    derivative_with_delta_raw(x, u, delta_u, radius)
}

/// `f̂(x, u) − J · Δu` with the Jacobian frozen at an earlier
/// linearization point (the CLF formulas fix it at (x_k, u_k)).
pub(crate) fn adaptive_derivative_with_fixed_jacobian(
    x: &Vec3,
    u: &Vec2,
    delta_u: &Vec2,
    jac: &Mat32,
    radius: f64,
) -> Vec3 {
    let f = nominal_derivative_raw(x[2], u[0], u[1], radius);
    let comp = mat32_mul_vec2(jac, delta_u);
    [f[0] - comp[0], f[1] - comp[1], f[2] - comp[2]]
}

fn derivative_with_delta_raw(x: &Vec3, u: &Vec2, delta_u: &Vec2, radius: f64) -> Vec3 {
    let f = nominal_derivative_raw(x[2], u[0], u[1], radius);
    let jac = input_jacobian_raw(x[2], u[0], u[1], radius);
    let comp = mat32_mul_vec2(&jac, delta_u);
    [f[0] - comp[0], f[1] - comp[1], f[2] - comp[2]]
}

/// Integrate the true dynamics over `duration` with fixed-step RK4 at the
/// plant substep, tracking the commanded input through the first-order lag.
///
/// `executed` holds the currently executed command and is advanced in
/// place. `duration` must be a positive multiple of the substep.
pub fn step_plant(
    state: &RobotState,
    executed: &mut CommandInput,
    commanded: &CommandInput,
    profile: &UncertaintyProfile,
    cfg: &PlantConfig,
    duration: f64,
    noise: &mut NoiseStreams,
) -> Result<RobotState, ModelError> {
    check_roll(commanded.roll_angle)?;
    check_roll(executed.roll_angle)?;
    let h = cfg.plant_substep;
    if !(duration > 0.0) {
        return Err(ModelError::BadDuration(duration));
    }
    let steps_f = duration / h;
    let steps = libm::round(steps_f);
    if (steps_f - steps).abs() > 1e-9 || steps < 1.0 {
        return Err(ModelError::BadDuration(duration));
    }
    let steps = steps as usize;
    let radius = cfg.wheel_radius;
    let lag = cfg.execution_lag;
    let cmd = commanded.as_array();

    let mut pose = state.as_array();
    let mut exec = executed.as_array();
    for _ in 0..steps {
        let probe = RobotState::from_array(&pose);
        let noise_sample = noise.sample(&profile.noise_std_at(&probe));
        if lag == 0.0 {
            exec = cmd;
            let next = rk4_step(
                |x| {
                    let snapshot = RobotState::new(x[0], x[1], x[2]);
                    let command = CommandInput::new(exec[0], exec[1]);
                    let mut delta = profile.delta_u(&snapshot, &command);
                    delta[0] += noise_sample[0];
                    delta[1] += noise_sample[1];
                    derivative_with_delta_raw(x, &exec, &delta, radius)
                },
                &pose,
                h,
            );
            pose = next;
        } else {
            // Augmented state: pose plus the executed command.
            let aug = [pose[0], pose[1], pose[2], exec[0], exec[1]];
            let next = rk4_step(
                |z| {
                    let x = [z[0], z[1], z[2]];
                    let u = [z[3], z[4]];
                    let snapshot = RobotState::new(x[0], x[1], x[2]);
                    let command = CommandInput::new(u[0], u[1]);
                    let mut delta = profile.delta_u(&snapshot, &command);
                    delta[0] += noise_sample[0];
                    delta[1] += noise_sample[1];
                    let dx = derivative_with_delta_raw(&x, &u, &delta, radius);
                    [
                        dx[0],
                        dx[1],
                        dx[2],
                        (cmd[0] - u[0]) / lag,
                        (cmd[1] - u[1]) / lag,
                    ]
                },
                &aug,
                h,
            );
            pose = [next[0], next[1], next[2]];
            exec = [next[3], next[4]];
        }
        pose[2] = wrap_angle(pose[2]);
    }
    *executed = CommandInput::new(exec[0], exec[1]);
    Ok(RobotState::from_array(&pose))
}

/// Single-writer plant instance owning its state, executed command and
/// noise streams. One simulation loop mutates one plant.
#[derive(Debug, Clone)]
pub struct Plant {
    state: RobotState,
    executed: CommandInput,
    profile: UncertaintyProfile,
    cfg: PlantConfig,
    noise: NoiseStreams,
}

impl Plant {
    pub fn new(
        initial: RobotState,
        profile: UncertaintyProfile,
        cfg: PlantConfig,
        noise_seed: u64,
    ) -> Result<Self, ModelError> {
        cfg.validate()?;
        Ok(Self {
            state: initial,
            executed: CommandInput::default(),
            profile,
            cfg,
            noise: NoiseStreams::from_seed(noise_seed),
        })
    }

    pub fn state(&self) -> &RobotState {
        &self.state
    }

    /// The currently executed command (what an input sensor would report).
    pub fn executed(&self) -> &CommandInput {
        &self.executed
    }

    pub fn config(&self) -> &PlantConfig {
        &self.cfg
    }

    pub fn profile(&self) -> &UncertaintyProfile {
        &self.profile
    }

    /// Apply a command for one interval of the given duration.
    pub fn step(&mut self, commanded: &CommandInput, duration: f64) -> Result<(), ModelError> {
        self.state = step_plant(
            &self.state,
            &mut self.executed,
            commanded,
            &self.profile,
            &self.cfg,
            duration,
            &mut self.noise,
        )?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn cfg() -> PlantConfig {
        PlantConfig::default()
    }

    fn lagless() -> PlantConfig {
        PlantConfig {
            execution_lag: 0.0,
            ..PlantConfig::default()
        }
    }

    #[test]
    fn nominal_derivative_axis_cases() {
        let c = cfg();
        let d = nominal_derivative(
            &RobotState::new(0.0, 0.0, 0.0),
            &CommandInput::new(1.0, 0.0),
            &c,
        )
        .unwrap();
        assert_eq!(d, [1.0, 0.0, 0.0]);

        let d = nominal_derivative(
            &RobotState::new(0.0, 0.0, FRAC_PI_2),
            &CommandInput::new(2.0, 0.0),
            &c,
        )
        .unwrap();
        assert!(d[0].abs() < 1e-15);
        assert!((d[1] - 2.0).abs() < 1e-12);
        assert_eq!(d[2], 0.0);

        let d = nominal_derivative(
            &RobotState::new(0.0, 0.0, 0.0),
            &CommandInput::new(1.0, FRAC_PI_4),
            &c,
        )
        .unwrap();
        assert!((d[0] - 1.0).abs() < 1e-12);
        assert_eq!(d[1], 0.0);
        assert!((d[2] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn roll_domain_is_enforced() {
        let c = cfg();
        let s = RobotState::default();
        for q in [FRAC_PI_2, -FRAC_PI_2, 2.0, f64::NAN] {
            assert!(nominal_derivative(&s, &CommandInput::new(1.0, q), &c).is_err());
            assert!(input_jacobian(&s, &CommandInput::new(1.0, q), &c).is_err());
        }
    }

    #[test]
    fn input_jacobian_axis_cases() {
        let c = cfg();
        let j = input_jacobian(
            &RobotState::new(0.0, 0.0, 0.0),
            &CommandInput::new(1.0, 0.0),
            &c,
        )
        .unwrap();
        assert_eq!(j, [[1.0, 0.0], [0.0, 0.0], [0.0, 5.0]]);

        let j = input_jacobian(
            &RobotState::new(0.0, 0.0, FRAC_PI_2),
            &CommandInput::new(0.0, 0.0),
            &c,
        )
        .unwrap();
        assert!(j[0][0].abs() < 1e-15);
        assert!((j[1][0] - 1.0).abs() < 1e-12);
        assert_eq!(j[2][1], 0.0);
    }

    /// Central finite-difference oracle for the input Jacobian.
    fn fd_jacobian(state: &RobotState, cmd: &CommandInput, c: &PlantConfig) -> Mat32 {
        let h = 1e-6;
        let mut out = [[0.0; 2]; 3];
        for col in 0..2 {
            let mut up = *cmd;
            let mut dn = *cmd;
            match col {
                0 => {
                    up.velocity += h;
                    dn.velocity -= h;
                }
                _ => {
                    up.roll_angle += h;
                    dn.roll_angle -= h;
                }
            }
            let fu = nominal_derivative(state, &up, c).unwrap();
            let fd = nominal_derivative(state, &dn, c).unwrap();
            for row in 0..3 {
                out[row][col] = (fu[row] - fd[row]) / (2.0 * h);
            }
        }
        out
    }

    fn u01(rng: &mut ChaCha8Rng) -> f64 {
        (rng.next_u64() >> 11) as f64 / 9007199254740992.0
    }

    #[test]
    fn input_jacobian_matches_finite_differences() {
        let c = cfg();
        let mut rng = ChaCha8Rng::from_seed([7u8; 32]);
        for _ in 0..200 {
            let yaw = (u01(&mut rng) * 2.0 - 1.0) * PI;
            let v = u01(&mut rng) * 3.0 - 1.5;
            let q = (u01(&mut rng) * 2.0 - 1.0) * 0.6;
            let state = RobotState::new(0.0, 0.0, yaw);
            let cmd = CommandInput::new(v, q);
            let analytic = input_jacobian(&state, &cmd, &c).unwrap();
            let numeric = fd_jacobian(&state, &cmd, &c);
            for r in 0..3 {
                for col in 0..2 {
                    let scale = analytic[r][col].abs().max(1.0);
                    assert!(
                        (analytic[r][col] - numeric[r][col]).abs() / scale < 1e-6,
                        "mismatch at ({r},{col}): {} vs {}",
                        analytic[r][col],
                        numeric[r][col]
                    );
                }
            }
        }
    }

    #[test]
    fn true_derivative_reduces_to_nominal_without_profile() {
        let c = cfg();
        let state = RobotState::new(0.3, -0.4, 0.7);
        let cmd = CommandInput::new(0.9, 0.2);
        let nd = nominal_derivative(&state, &cmd, &c).unwrap();
        let td = true_derivative(&state, &cmd, &UncertaintyProfile::none(), &c).unwrap();
        assert_eq!(nd, td);
    }

    #[test]
    fn proportional_uncertainty_scales_velocity() {
        // Hand evaluation: yaw 0, v 1, q_r 0, Delta u = (xi, 0) removes
        // xi * cos(0) from the x rate.
        let c = cfg();
        let state = RobotState::new(0.0, 0.0, 0.0);
        let cmd = CommandInput::new(1.0, 0.0);
        let td =
            true_derivative(&state, &cmd, &UncertaintyProfile::proportional(0.2), &c).unwrap();
        assert!((td[0] - 0.8).abs() < 1e-15);
        assert_eq!(td[1], 0.0);
        assert_eq!(td[2], 0.0);

        let td =
            true_derivative(&state, &cmd, &UncertaintyProfile::proportional(0.4), &c).unwrap();
        assert!((td[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn straight_line_motion() {
        let c = lagless();
        let mut exec = CommandInput::new(1.0, 0.0);
        let out = step_plant(
            &RobotState::default(),
            &mut exec,
            &CommandInput::new(1.0, 0.0),
            &UncertaintyProfile::none(),
            &c,
            0.1,
            &mut NoiseStreams::from_seed(0),
        )
        .unwrap();
        assert!((out.x_pos - 0.1).abs() < 1e-9);
        assert!(out.y_pos.abs() < 1e-12);
        assert_eq!(out.yaw, 0.0);
    }

    #[test]
    fn zero_velocity_is_a_fixed_point_of_proportional_profiles() {
        let c = lagless();
        let start = RobotState::new(1.0, 2.0, 0.5);
        let mut exec = CommandInput::new(0.0, 0.3);
        let out = step_plant(
            &start,
            &mut exec,
            &CommandInput::new(0.0, 0.3),
            &UncertaintyProfile::proportional(0.4),
            &c,
            0.5,
            &mut NoiseStreams::from_seed(0),
        )
        .unwrap();
        assert!(start.position_distance(&out) < 1e-12);
        assert!((out.yaw - start.yaw).abs() < 1e-12);
    }

    /// Closed-form constant-curvature arc for constant (v, q_r).
    fn arc_endpoint(start: &RobotState, v: f64, q_r: f64, radius: f64, t: f64) -> RobotState {
        let omega = v * libm::tan(q_r) / radius;
        if omega.abs() < 1e-12 {
            return RobotState::new(
                start.x_pos + v * t * libm::cos(start.yaw),
                start.y_pos + v * t * libm::sin(start.yaw),
                start.yaw,
            );
        }
        let r = v / omega;
        let phi1 = start.yaw + omega * t;
        RobotState::new(
            start.x_pos + r * (libm::sin(phi1) - libm::sin(start.yaw)),
            start.y_pos - r * (libm::cos(phi1) - libm::cos(start.yaw)),
            phi1,
        )
    }

    #[test]
    fn constant_curvature_arc() {
        let c = lagless();
        let start = RobotState::default();
        let mut exec = CommandInput::new(1.0, FRAC_PI_4);
        let out = step_plant(
            &start,
            &mut exec,
            &CommandInput::new(1.0, FRAC_PI_4),
            &UncertaintyProfile::none(),
            &c,
            0.1,
            &mut NoiseStreams::from_seed(0),
        )
        .unwrap();
        // Radius v/omega = 0.2 m, yaw advanced by 0.5 rad.
        assert!((out.yaw - 0.5).abs() < 1e-9);
        let oracle = arc_endpoint(&start, 1.0, FRAC_PI_4, c.wheel_radius, 0.1);
        assert!(out.position_distance(&oracle) < 1e-6);
    }

    #[test]
    fn long_arc_matches_closed_form() {
        let c = lagless();
        let start = RobotState::new(0.5, -0.25, 0.3);
        let (v, q) = (0.8, 0.35);
        let mut exec = CommandInput::new(v, q);
        let out = step_plant(
            &start,
            &mut exec,
            &CommandInput::new(v, q),
            &UncertaintyProfile::none(),
            &c,
            10.0,
            &mut NoiseStreams::from_seed(0),
        )
        .unwrap();
        let oracle = arc_endpoint(&start, v, q, c.wheel_radius, 10.0);
        assert!(out.position_distance(&oracle) < 1e-6);
        assert!(crate::math::angle_diff(out.yaw, oracle.yaw).abs() < 1e-6);
    }

    #[test]
    fn halving_substep_barely_moves_endpoint() {
        let coarse = PlantConfig {
            execution_lag: 0.0,
            ..PlantConfig::default()
        };
        let fine = PlantConfig {
            plant_substep: coarse.plant_substep / 2.0,
            ..coarse
        };
        let profile = UncertaintyProfile::terrain(TerrainKind::Grass);
        let start = RobotState::default();
        let cmd = CommandInput::new(1.0, 0.4);
        let mut e1 = cmd;
        let mut e2 = cmd;
        let a = step_plant(&start, &mut e1, &cmd, &profile, &coarse, 10.0, &mut NoiseStreams::from_seed(0)).unwrap();
        let b = step_plant(&start, &mut e2, &cmd, &profile, &fine, 10.0, &mut NoiseStreams::from_seed(0)).unwrap();
        assert!(a.position_distance(&b) < 1e-5);
    }

    #[test]
    fn duration_must_be_multiple_of_substep() {
        let c = lagless();
        let mut exec = CommandInput::default();
        let err = step_plant(
            &RobotState::default(),
            &mut exec,
            &CommandInput::new(1.0, 0.0),
            &UncertaintyProfile::none(),
            &c,
            0.05,
            &mut NoiseStreams::from_seed(0),
        );
        assert!(matches!(err, Err(ModelError::BadDuration(_))));
    }

    #[test]
    fn execution_lag_tracks_command() {
        let c = PlantConfig {
            execution_lag: 0.05,
            ..PlantConfig::default()
        };
        let mut exec = CommandInput::new(0.0, 0.0);
        let _ = step_plant(
            &RobotState::default(),
            &mut exec,
            &CommandInput::new(1.0, 0.0),
            &UncertaintyProfile::none(),
            &c,
            0.5,
            &mut NoiseStreams::from_seed(0),
        )
        .unwrap();
        // After 10 time constants the executed command has settled.
        assert!((exec.velocity - 1.0).abs() < 1e-4);
    }

    #[test]
    fn spatial_switch_selects_region_profile() {
        let profile = UncertaintyProfile::spatial_switch(0.0);
        let cmd = CommandInput::new(1.0, 0.1);
        let right = profile.delta_u(&RobotState::new(0.5, 0.0, 0.0), &cmd);
        let left = profile.delta_u(&RobotState::new(-0.5, 0.0, 0.0), &cmd);
        assert!((right[0] - 0.08).abs() < 1e-15);
        assert!((left[0] - 0.25).abs() < 1e-15);
        assert!((left[1] - 0.005).abs() < 1e-15);
    }

    #[test]
    fn noise_streams_are_deterministic() {
        let mut a = NoiseStreams::from_seed(42);
        let mut b = NoiseStreams::from_seed(42);
        for _ in 0..16 {
            assert_eq!(a.sample(&[0.05, 0.01]), b.sample(&[0.05, 0.01]));
        }
        let mut c = NoiseStreams::from_seed(43);
        assert_ne!(a.sample(&[0.05, 0.01]), c.sample(&[0.05, 0.01]));
    }
}
