//! Reference trajectory generators and tracking-error computation.
//!
//! Both built-in references are given as explicit time laws for (X, Y);
//! the yaw reference is the heading of the velocity vector and the input
//! reference is recovered by flat-output inversion of the kinematics:
//! `v_ref = |(Ẋ, Ẏ)|`, `q_ref = arctan(R · φ̇ / v_ref)`.

use crate::estimator::ErrorTriple;
use crate::math::{angle_diff, Vec3};
use crate::plant::{CommandInput, RobotState};
use core::str::FromStr;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

/// One sample of the reference: pose, feedforward input, pose derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceSample {
    pub state: RobotState,
    pub input: CommandInput,
    /// (Ẋ_ref, Ẏ_ref, φ̇_ref) at the sample time.
    pub derivative: Vec3,
    pub time: f64,
}

/// Built-in reference trajectories, addressable by name from config.
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrajectoryKind {
    /// Forward drift with a sinusoidal sway ("sine").
    Sine,
    /// Figure-eight Lemniscate of Gerono ("gerono").
    Gerono,
    /// Fixed pose, used by tests ("constant").
    Constant { x: f64, y: f64, yaw: f64 },
}

impl TrajectoryKind {
    /// Stable name used in config files and output file names.
    pub fn name(&self) -> &'static str {
        match self {
            TrajectoryKind::Sine => "sine",
            TrajectoryKind::Gerono => "gerono",
            TrajectoryKind::Constant { .. } => "constant",
        }
    }

    /// Evaluate the reference at time `t` for a robot of the given wheel
    /// radius (the radius enters the roll-angle feedforward only).
    pub fn sample(&self, t: f64, wheel_radius: f64) -> ReferenceSample {
        match self {
            TrajectoryKind::Sine => sine_wave(t, wheel_radius),
            TrajectoryKind::Gerono => lemniscate(t, wheel_radius),
            TrajectoryKind::Constant { x, y, yaw } => ReferenceSample {
                state: RobotState::new(*x, *y, *yaw),
                input: CommandInput::default(),
                derivative: [0.0, 0.0, 0.0],
                time: t,
            },
        }
    }
}

impl FromStr for TrajectoryKind {
    type Err = &'static str;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sine" => Ok(TrajectoryKind::Sine),
            "gerono" => Ok(TrajectoryKind::Gerono),
            "constant" => Ok(TrajectoryKind::Constant {
                x: 0.0,
                y: 0.0,
                yaw: 0.0,
            }),
            _ => Err("unknown trajectory (expected sine, gerono or constant)"),
        }
    }
}

/// Assemble a sample from position derivatives up to second order.
fn from_flat_outputs(
    t: f64,
    x: f64,
    y: f64,
    xd: f64,
    yd: f64,
    xdd: f64,
    ydd: f64,
    wheel_radius: f64,
) -> ReferenceSample {
    let v = libm::hypot(xd, yd);
    let yaw = libm::atan2(yd, xd);
    // Curvature form of the heading rate; the paths below never stall.
    let yaw_rate = (xd * ydd - yd * xdd) / (v * v);
    let roll = libm::atan(wheel_radius * yaw_rate / v);
    ReferenceSample {
        state: RobotState::new(x, y, yaw),
        input: CommandInput::new(v, roll),
        derivative: [xd, yd, yaw_rate],
        time: t,
    }
}

/// Sine-wave reference: X = 0.5 t, Y = 2 sin(0.25 t).
pub fn sine_wave(t: f64, wheel_radius: f64) -> ReferenceSample {
    let (s, c) = (libm::sin(0.25 * t), libm::cos(0.25 * t));
    from_flat_outputs(
        t,
        0.5 * t,
        2.0 * s,
        0.5,
        0.5 * c,
        0.0,
        -0.125 * s,
        wheel_radius,
    )
}

/// Lemniscate of Gerono: X = 8 sin(t/16), Y = 8 sin(t/16) cos(t/16).
///
/// The yaw expression X-velocity crosses zero twice per lap; taking the
/// heading as atan2(Ẏ, Ẋ) realizes the one-sided limits there, so the
/// sample is total in `t`.
pub fn lemniscate(t: f64, wheel_radius: f64) -> ReferenceSample {
    let (s16, c16) = (libm::sin(t / 16.0), libm::cos(t / 16.0));
    let (s8, c8) = (libm::sin(t / 8.0), libm::cos(t / 8.0));
    from_flat_outputs(
        t,
        8.0 * s16,
        8.0 * s16 * c16,
        0.5 * c16,
        0.5 * c8,
        -s16 / 32.0,
        -s8 / 16.0,
        wheel_radius,
    )
}

/// Tracking errors of the measured pose against the previous one-step
/// prediction (`e_e`), the reference (`e_r`), and their composite.
pub fn tracking_errors(
    actual: &RobotState,
    reference: &RobotState,
    predicted_prev: &RobotState,
    gamma: f64,
) -> ErrorTriple {
    let e_e = [
        actual.x_pos - predicted_prev.x_pos,
        actual.y_pos - predicted_prev.y_pos,
        angle_diff(actual.yaw, predicted_prev.yaw),
    ];
    let e_r = [
        actual.x_pos - reference.x_pos,
        actual.y_pos - reference.y_pos,
        angle_diff(actual.yaw, reference.yaw),
    ];
    ErrorTriple::new(e_e, e_r, gamma)
}
