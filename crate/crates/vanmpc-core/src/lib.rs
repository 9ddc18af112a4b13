//! Adaptive trajectory tracking for unicycle-class mobile robots.
//!
//! The crate simulates a spherical robot whose planar kinematics are driven
//! by a forward velocity and a roll angle, injects command-level
//! uncertainties standing in for unmodeled kinodynamics, and closes the loop
//! with four instruction planners:
//!
//! * `mpc` — plain model predictive control on the nominal model,
//! * `an_small` / `an_large` — adaptive MPC with a radial-basis-function
//!   disturbance estimator running at a fixed small/large learning step,
//! * `van` — the same estimator with a variable step size driven by the
//!   discretized level of uncompensated uncertainty.
//!
//! The optimal control problem is transcribed by direct multiple shooting
//! and solved by a small dense SQP tailored to this problem family. The
//! crate is `no_std` (with `alloc`); all IO lives in the companion CLI
//! crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod estimator;
pub mod harness;
pub mod math;
pub mod planner;
pub mod plant;
pub mod trajectories;
