//! The geofence safety filter: backup controller, regulation function and the
//! blend between pilot and backup commands.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::flow::{h_implicit, FlowConfig, TrajectoryBuffer};
use crate::geofence::{backup_desired_velocity, backup_set_h, v_perp, GeofenceBox};
use crate::vehicle::{quad_deriv, throttle_for_thrust, QuadCommand, QuadParams, QuadState};

/// Tuning of the quadrotor filter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterParams {
    /// Decay gain of the regulation function, 1/(m²·s/m) in the scaled form.
    pub beta: f64,
    /// Push-back depth in m² (units of `h`).
    pub delta: f64,
    /// Backup-set speed bound, m/s.
    pub epsilon: f64,
    /// Lower bound on the approach speed used as divisor, m/s.
    pub v_floor: f64,
    /// Velocity-tracking gain of the backup cascade, 1/s.
    pub k_v: f64,
    /// Attitude-to-rate gain of the backup cascade, 1/s.
    pub k_q: f64,
    /// Meters each face is pulled in for the barrier evaluated along the rollout.
    pub inflation: f64,
    /// Saturation of each push-back velocity component, m/s.
    pub backup_speed_max: f64,
    /// Positive weight on `ε - |v|` at the rollout horizon (m² per m/s). It
    /// leaves the backup set unchanged and puts the velocity term on the
    /// scale of the squared-distance geofence term.
    pub backup_set_weight: f64,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            beta: 0.1,
            delta: 1.0,
            epsilon: 0.1,
            v_floor: 1.0,
            k_v: 4.0,
            k_q: 12.0,
            inflation: 1.0,
            backup_speed_max: 2.0,
            backup_set_weight: 10000.0,
        }
    }
}

impl FilterParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("beta", self.beta),
            ("delta", self.delta),
            ("epsilon", self.epsilon),
            ("v_floor", self.v_floor),
            ("k_v", self.k_v),
            ("k_q", self.k_q),
            ("backup_speed_max", self.backup_speed_max),
            ("backup_set_weight", self.backup_set_weight),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(ConfigError::invalid(
                    "filter",
                    format!("{name} must be positive"),
                ));
            }
        }
        if !(self.inflation >= 0.0) {
            return Err(ConfigError::invalid(
                "filter",
                "inflation must be non-negative",
            ));
        }
        Ok(())
    }
}

/// Which regulation function to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LambdaForm {
    /// `1 - exp(-β h⁺)`
    Plain,
    /// `1 - exp(-β h⁺ / max(v⊥, v_floor))`
    Scaled,
}

/// Blend weight in `[0, 1]`; zero whenever `h_i <= 0` (including `-inf`).
#[inline]
pub fn regulation_lambda(h_i: f64, v_perp: f64, beta: f64, v_floor: f64, form: LambdaForm) -> f64 {
    let h_plus = if h_i > 0.0 { h_i } else { 0.0 };
    let exponent = match form {
        LambdaForm::Plain => beta * h_plus,
        LambdaForm::Scaled => beta * h_plus / v_perp.max(v_floor),
    };
    // -expm1(-x) = 1 - exp(-x) without cancellation near zero.
    (-(-exponent).exp_m1()).clamp(0.0, 1.0)
}

/// `backup + λ (u_des - backup)`, componentwise, before any clamping.
#[inline]
pub fn mix_commands(u_des: &QuadCommand, backup: &QuadCommand, lambda: f64) -> QuadCommand {
    backup.lerp(u_des, lambda)
}

/// Commanded vertical acceleration (including gravity compensation) never
/// drops below this fraction of g, so the cascade does not flip the vehicle
/// over to brake a climb.
const MIN_LIFT_FRACTION: f64 = 0.2;

/// Thrust-vector velocity controller wrapped around the rate loop.
///
/// Used both as the backup controller and as the scripted pilot model.
#[inline]
pub fn velocity_tracking_command(
    x: &QuadState,
    v_des: &Vector3<f64>,
    k_v: f64,
    k_q: f64,
    quad: &QuadParams,
) -> QuadCommand {
    let g = quad.gravity;
    let mut accel = (v_des - x.velocity) * k_v + x.velocity * quad.drag_coeff;
    accel.z += g;
    let accel = saturate_acceleration(accel, quad.max_thrust() / quad.mass, MIN_LIFT_FRACTION * g);

    let norm = accel.norm();
    if norm < 1e-6 {
        return QuadCommand::new(quad.hover_throttle(), Vector3::zeros());
    }
    // Only the part of the desired acceleration along the current thrust axis
    // is requested, so a vehicle far from the desired attitude rotates first
    // instead of accelerating in the wrong direction.
    let along = accel.dot(&x.thrust_axis()).max(0.0);
    let throttle = throttle_for_thrust(quad.mass * along, quad);
    let desired_axis = accel / norm;
    let rates = attitude_error_body(x, &desired_axis) * k_q;
    QuadCommand::new(throttle, Vector3::new(rates.x, rates.y, 0.0)).clamped(quad.rate_limit)
}

/// Limit the commanded specific thrust to what the motors deliver, keeping the
/// vertical component first.
#[inline]
fn saturate_acceleration(mut accel: Vector3<f64>, max: f64, min_vertical: f64) -> Vector3<f64> {
    accel.z = accel.z.clamp(min_vertical.min(max), max);
    let horizontal = (accel.x * accel.x + accel.y * accel.y).sqrt();
    let room = (max * max - accel.z * accel.z).max(0.0).sqrt();
    if horizontal > room {
        let s = room / horizontal;
        accel.x *= s;
        accel.y *= s;
    }
    accel
}

/// Rotation vector, in body coordinates, that takes the current thrust axis
/// onto `desired` (both unit vectors in the world frame).
#[inline]
fn attitude_error_body(x: &QuadState, desired: &Vector3<f64>) -> Vector3<f64> {
    let current = x.thrust_axis();
    let axis = current.cross(desired);
    let s = axis.norm();
    let c = current.dot(desired);
    let angle = s.atan2(c);
    let world = if s > 1e-12 {
        axis * (angle / s)
    } else if c < 0.0 {
        // Antiparallel: any axis orthogonal to the thrust axis works.
        x.body_to_world(&Vector3::x()) * std::f64::consts::PI
    } else {
        Vector3::zeros()
    };
    x.world_to_body(&world)
}

/// Stop-and-push-back backup controller.
#[inline]
pub fn backup_controller(
    x: &QuadState,
    fence: &GeofenceBox,
    fp: &FilterParams,
    quad: &QuadParams,
) -> QuadCommand {
    let v_des = backup_desired_velocity(&x.position, fence, fp.delta, fp.backup_speed_max);
    velocity_tracking_command(x, &v_des, fp.k_v, fp.k_q, quad)
}

/// Result of one filter evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterOutput {
    pub u_cmd: QuadCommand,
    pub lambda: f64,
    pub h_i: f64,
    pub v_perp: f64,
    pub backup_cmd: QuadCommand,
}

/// Evaluate the implicit barrier at `x` for the quadrotor.
///
/// `shrunk` is the geofence already pulled in by the inflation margin; both
/// the path barrier and the backup controller's push-back use it.
pub fn quad_h_implicit(
    x: &QuadState,
    shrunk: &GeofenceBox,
    fp: &FilterParams,
    quad: &QuadParams,
    cfg: &FlowConfig,
    scratch: &mut TrajectoryBuffer<QuadState>,
) -> f64 {
    h_implicit(
        x,
        |s| backup_controller(s, shrunk, fp, quad),
        |s, u| quad_deriv(s, u, quad),
        cfg,
        |s| shrunk.h(&s.position),
        |s| fp.backup_set_weight * backup_set_h(&s.velocity, fp.epsilon),
        scratch,
    )
}

/// Filter a pilot command.
///
/// `fence` is the true geofence; the inflation margin from `fp` is applied
/// here. Hot loops should prefer [`GeofenceShield`], which caches the shrunk
/// box and owns its scratch buffer.
pub fn filter_command(
    x: &QuadState,
    u_des: &QuadCommand,
    fence: &GeofenceBox,
    fp: &FilterParams,
    quad: &QuadParams,
    cfg: &FlowConfig,
    scratch: &mut TrajectoryBuffer<QuadState>,
) -> Result<FilterOutput, ConfigError> {
    let shrunk = fence.inflated(fp.inflation)?;
    Ok(filter_with_shrunk(
        x, u_des, fence, &shrunk, fp, quad, cfg, scratch,
    ))
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn filter_with_shrunk(
    x: &QuadState,
    u_des: &QuadCommand,
    fence: &GeofenceBox,
    shrunk: &GeofenceBox,
    fp: &FilterParams,
    quad: &QuadParams,
    cfg: &FlowConfig,
    scratch: &mut TrajectoryBuffer<QuadState>,
) -> FilterOutput {
    let h_i = quad_h_implicit(x, shrunk, fp, quad, cfg, scratch);
    let v_perp = v_perp(&x.position, &x.velocity, fence);
    let lambda = regulation_lambda(h_i, v_perp, fp.beta, fp.v_floor, LambdaForm::Scaled);
    let backup_cmd = backup_controller(x, shrunk, fp, quad);
    let u_cmd = mix_commands(u_des, &backup_cmd, lambda).clamped(quad.rate_limit);
    FilterOutput {
        u_cmd,
        lambda,
        h_i,
        v_perp,
        backup_cmd,
    }
}

/// A configured filter instance with its own rollout buffer.
#[derive(Debug, Clone)]
pub struct GeofenceShield {
    fence: GeofenceBox,
    shrunk: GeofenceBox,
    params: FilterParams,
    quad: QuadParams,
    flow: FlowConfig,
    scratch: TrajectoryBuffer<QuadState>,
}

impl GeofenceShield {
    pub fn new(
        fence: GeofenceBox,
        params: FilterParams,
        quad: QuadParams,
        flow: FlowConfig,
    ) -> Result<Self, ConfigError> {
        fence.validate()?;
        params.validate()?;
        quad.validate()?;
        let shrunk = fence.inflated(params.inflation)?;
        Ok(Self {
            fence,
            shrunk,
            params,
            quad,
            flow,
            scratch: TrajectoryBuffer::new(&flow),
        })
    }

    pub fn filter(&mut self, x: &QuadState, u_des: &QuadCommand) -> FilterOutput {
        filter_with_shrunk(
            x,
            u_des,
            &self.fence,
            &self.shrunk,
            &self.params,
            &self.quad,
            &self.flow,
            &mut self.scratch,
        )
    }

    pub fn h_implicit(&mut self, x: &QuadState) -> f64 {
        quad_h_implicit(
            x,
            &self.shrunk,
            &self.params,
            &self.quad,
            &self.flow,
            &mut self.scratch,
        )
    }

    pub fn backup(&self, x: &QuadState) -> QuadCommand {
        backup_controller(x, &self.shrunk, &self.params, &self.quad)
    }

    /// Trajectory of the most recent rollout.
    pub fn last_rollout(&self) -> &TrajectoryBuffer<QuadState> {
        &self.scratch
    }

    pub fn fence(&self) -> &GeofenceBox {
        &self.fence
    }

    pub fn shrunk_fence(&self) -> &GeofenceBox {
        &self.shrunk
    }

    pub fn params(&self) -> &FilterParams {
        &self.params
    }

    pub fn quad(&self) -> &QuadParams {
        &self.quad
    }

    pub fn flow(&self) -> &FlowConfig {
        &self.flow
    }
}
