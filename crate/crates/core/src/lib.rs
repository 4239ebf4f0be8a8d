//! Real-time geofence shield for a high-speed quadrotor.
//!
//! The shield blends a pilot's throttle/rate commands with a backup
//! controller. The blend weight comes from an implicitly defined barrier
//! function: the vehicle is forward-simulated under the backup controller, and
//! the worst geofence clearance along that rollout (together with a stopping
//! condition at the horizon) decides how much authority the pilot keeps.
//!
//! Modules:
//! - [`vehicle`]: quadrotor and pendulum dynamics.
//! - [`flow`]: fixed-step rollouts and the implicit barrier.
//! - [`geofence`], [`shield`]: the safe set, backup controller and filter.
//! - [`pendulum`], [`qp`]: the pendulum filter and the QP baseline.
//! - [`scenario`], [`harness`], [`pilot`]: closed-loop simulation and metrics.

pub mod alloc_count;
pub mod bench;
pub mod error;
pub mod flow;
pub mod geofence;
pub mod harness;
pub mod pendulum;
pub mod pilot;
pub mod qp;
pub mod scenario;
pub mod shield;
pub mod telemetry;
pub mod vehicle;

pub use error::ConfigError;
pub use flow::{FlowConfig, TrajectoryBuffer};
pub use geofence::GeofenceBox;
pub use shield::{FilterOutput, FilterParams, GeofenceShield};
pub use vehicle::{PendulumState, QuadCommand, QuadParams, QuadState};
