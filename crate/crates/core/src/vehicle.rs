//! Plant models: the quadrotor wrapped around its onboard rate controller, and
//! the inverted pendulum used for the filter comparison.
//!
//! Quaternion convention (used everywhere in this crate): scalar-first
//! `(w, x, y, z)`, describing the orientation of the body frame relative to the
//! world frame. `R(q)` maps body-frame vectors into the world frame, so the
//! thrust direction in world coordinates is `R(q) * e_z`. Kinematics use body
//! rates: `q_dot = 0.5 * q ⊗ (0, ω_b)`.

use nalgebra::{Quaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;

/// State that can be advanced by the fixed-step integrator.
///
/// The derivative of a state is represented by the same type.
pub trait FlowState: Copy {
    /// `self + h * rate`.
    fn add_scaled(&self, rate: &Self, h: f64) -> Self;

    /// Project back onto the state manifold after a step.
    fn renormalize(&mut self) {}

    fn is_finite(&self) -> bool;
}

impl FlowState for f64 {
    fn add_scaled(&self, rate: &Self, h: f64) -> Self {
        self + h * rate
    }

    fn is_finite(&self) -> bool {
        f64::is_finite(*self)
    }
}

/// 13-dimensional rigid-body state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadState {
    pub position: Vector3<f64>,
    /// Scalar-first unit quaternion; see the module docs for the convention.
    pub attitude: Quaternion<f64>,
    pub velocity: Vector3<f64>,
    pub body_rates: Vector3<f64>,
}

impl QuadState {
    /// Level, at rest, at `position`.
    pub fn at_rest(position: Vector3<f64>) -> Self {
        Self {
            position,
            attitude: Quaternion::identity(),
            velocity: Vector3::zeros(),
            body_rates: Vector3::zeros(),
        }
    }

    /// Body z-axis expressed in the world frame, `R(q) e_z`.
    pub fn thrust_axis(&self) -> Vector3<f64> {
        thrust_axis(&self.attitude)
    }

    /// Rotate a body-frame vector into the world frame.
    pub fn body_to_world(&self, v: &Vector3<f64>) -> Vector3<f64> {
        rotate(&self.attitude, v)
    }

    /// Rotate a world-frame vector into the body frame.
    pub fn world_to_body(&self, v: &Vector3<f64>) -> Vector3<f64> {
        rotate(&self.attitude.conjugate(), v)
    }
}

impl Default for QuadState {
    fn default() -> Self {
        Self::at_rest(Vector3::zeros())
    }
}

impl FlowState for QuadState {
    fn add_scaled(&self, rate: &Self, h: f64) -> Self {
        Self {
            position: self.position + rate.position * h,
            attitude: self.attitude + rate.attitude * h,
            velocity: self.velocity + rate.velocity * h,
            body_rates: self.body_rates + rate.body_rates * h,
        }
    }

    fn renormalize(&mut self) {
        let n = self.attitude.norm();
        if n > 0.0 {
            self.attitude /= n;
        }
    }

    fn is_finite(&self) -> bool {
        self.position.iter().all(|c| c.is_finite())
            && self.attitude.coords.iter().all(|c| c.is_finite())
            && self.velocity.iter().all(|c| c.is_finite())
            && self.body_rates.iter().all(|c| c.is_finite())
    }
}

fn rotate(q: &Quaternion<f64>, v: &Vector3<f64>) -> Vector3<f64> {
    let p = Quaternion::from_imag(*v);
    (q * p * q.conjugate()).imag()
}

/// Third column of `R(q)` without forming the whole matrix.
pub fn thrust_axis(q: &Quaternion<f64>) -> Vector3<f64> {
    let (w, x, y, z) = (q.w, q.i, q.j, q.k);
    Vector3::new(
        2.0 * (x * z + w * y),
        2.0 * (y * z - w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Throttle and desired body rates: the input and output of the safety filter.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QuadCommand {
    pub throttle: f64,
    pub rates: Vector3<f64>,
}

impl QuadCommand {
    pub const ZERO: QuadCommand = QuadCommand {
        throttle: 0.0,
        rates: Vector3::new(0.0, 0.0, 0.0),
    };

    pub fn new(throttle: f64, rates: Vector3<f64>) -> Self {
        Self { throttle, rates }
    }

    /// Throttle into `[0, 1]`, each rate into `[-rate_limit, rate_limit]`.
    pub fn clamped(&self, rate_limit: f64) -> Self {
        Self {
            throttle: self.throttle.clamp(0.0, 1.0),
            rates: self.rates.map(|r| r.clamp(-rate_limit, rate_limit)),
        }
    }

    /// `self + lambda * (other - self)`, componentwise.
    pub fn lerp(&self, other: &Self, lambda: f64) -> Self {
        Self {
            throttle: self.throttle + lambda * (other.throttle - self.throttle),
            rates: self.rates + (other.rates - self.rates) * lambda,
        }
    }

    /// Max-norm distance, with rates normalized by `rate_limit` so both parts
    /// share a `[0, 1]`-ish scale.
    pub fn distance(&self, other: &Self, rate_limit: f64) -> f64 {
        let dt = (self.throttle - other.throttle).abs();
        let dr = (self.rates - other.rates).amax() / rate_limit;
        dt.max(dr)
    }

    pub fn within_bounds(&self, rate_limit: f64) -> bool {
        (0.0..=1.0).contains(&self.throttle) && self.rates.iter().all(|r| r.abs() <= rate_limit)
    }
}

/// How quickly the onboard rate controller tracks desired rates.
///
/// Only the constant model is provided; the enum leaves room for a
/// state-dependent gain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RateGain {
    Constant { value: f64 },
}

impl RateGain {
    #[inline]
    pub fn at(&self, _x: &QuadState) -> f64 {
        match self {
            RateGain::Constant { value } => *value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadParams {
    /// kg
    pub mass: f64,
    /// m/s²
    pub gravity: f64,
    pub rate_gain: RateGain,
    /// `(a0, a1, a2)`: total thrust in N as a quadratic in throttle.
    pub thrust_poly: [f64; 3],
    /// rad/s, per axis.
    pub rate_limit: f64,
    /// Linear velocity drag, 1/s.
    pub drag_coeff: f64,
}

impl Default for QuadParams {
    /// A representative 7" racer: 1 kg, hover near 30 % throttle and a
    /// thrust-to-weight ratio of 4.
    fn default() -> Self {
        Self {
            mass: 1.0,
            gravity: 9.81,
            rate_gain: RateGain::Constant { value: 50.0 },
            thrust_poly: [0.0, 29.9, 9.34],
            rate_limit: 10.0,
            drag_coeff: 0.0,
        }
    }
}

impl QuadParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let [a0, a1, a2] = self.thrust_poly;
        let check = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(ConfigError::invalid("quad", what))
            }
        };
        check(self.mass > 0.0, "mass must be positive")?;
        check(self.gravity > 0.0, "gravity must be positive")?;
        let RateGain::Constant { value } = self.rate_gain;
        check(value > 0.0, "rate gain must be positive")?;
        check(self.rate_limit > 0.0, "rate_limit must be positive")?;
        check(self.drag_coeff >= 0.0, "drag_coeff must be non-negative")?;
        check(a0 >= 0.0, "thrust at zero throttle must be non-negative")?;
        // Derivative a1 + 2 a2 t is affine, so checking both ends suffices.
        check(
            a1 >= 0.0 && a1 + 2.0 * a2 >= 0.0,
            "thrust_poly must be nondecreasing on [0,1]",
        )?;
        check(
            a0 + a1 + a2 > self.mass * self.gravity,
            "full throttle must overcome weight",
        )
    }

    pub fn max_thrust(&self) -> f64 {
        thrust_from_throttle(1.0, self)
    }

    pub fn weight(&self) -> f64 {
        self.mass * self.gravity
    }

    pub fn hover_throttle(&self) -> f64 {
        throttle_for_thrust(self.weight(), self)
    }
}

/// Total thrust in N for a throttle in `[0, 1]`.
#[inline]
pub fn thrust_from_throttle(throttle: f64, p: &QuadParams) -> f64 {
    debug_assert!(
        (0.0..=1.0).contains(&throttle),
        "throttle {throttle} outside [0, 1]"
    );
    let t = throttle.clamp(0.0, 1.0);
    let [a0, a1, a2] = p.thrust_poly;
    a0 + t * (a1 + t * a2)
}

/// Inverse of [`thrust_from_throttle`], clamped to `[0, 1]`.
pub fn throttle_for_thrust(thrust: f64, p: &QuadParams) -> f64 {
    let [a0, a1, a2] = p.thrust_poly;
    let c = a0 - thrust;
    if c >= 0.0 {
        return 0.0;
    }
    let t = if a2.abs() < 1e-12 {
        if a1 <= 0.0 {
            return 1.0;
        }
        -c / a1
    } else {
        let disc = (a1 * a1 - 4.0 * a2 * c).max(0.0);
        // Root form without cancellation for a1 >= 0.
        -2.0 * c / (a1 + disc.sqrt())
    };
    t.clamp(0.0, 1.0)
}

/// Closed-loop quadrotor dynamics under a throttle/rate command.
#[inline]
pub fn quad_deriv(x: &QuadState, u: &QuadCommand, p: &QuadParams) -> QuadState {
    debug_assert!(x.is_finite(), "non-finite quadrotor state");
    let omega = Quaternion::from_imag(x.body_rates);
    let q_dot = x.attitude * omega * 0.5;
    let thrust = thrust_from_throttle(u.throttle.clamp(0.0, 1.0), p) / p.mass;
    let accel =
        x.thrust_axis() * thrust - Vector3::new(0.0, 0.0, p.gravity) - x.velocity * p.drag_coeff;
    let rates_dot = (u.rates - x.body_rates) * p.rate_gain.at(x);
    QuadState {
        position: x.velocity,
        attitude: q_dot,
        velocity: accel,
        body_rates: rates_dot,
    }
}

/// Inverted pendulum `(θ, θ̇)` with unit-gain torque input.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PendulumState {
    pub theta: f64,
    pub theta_dot: f64,
}

impl PendulumState {
    pub fn new(theta: f64, theta_dot: f64) -> Self {
        Self { theta, theta_dot }
    }
}

impl FlowState for PendulumState {
    fn add_scaled(&self, rate: &Self, h: f64) -> Self {
        Self {
            theta: self.theta + h * rate.theta,
            theta_dot: self.theta_dot + h * rate.theta_dot,
        }
    }

    fn is_finite(&self) -> bool {
        self.theta.is_finite() && self.theta_dot.is_finite()
    }
}

#[inline]
pub fn pendulum_deriv(x: &PendulumState, u: f64) -> PendulumState {
    PendulumState {
        theta: x.theta_dot,
        theta_dot: x.theta.sin() + u,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::UnitQuaternion;
    use proptest::prelude::*;

    fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn rate_loop_tracks_with_gain() {
        let p = QuadParams::default();
        let x = QuadState::default();
        let u = QuadCommand::new(0.0, Vector3::new(1.0, 0.0, 0.0));
        let d = quad_deriv(&x, &u, &p);
        assert_eq!(d.body_rates, Vector3::new(50.0, 0.0, 0.0));
    }

    #[test]
    fn hover_is_an_equilibrium() {
        let p = QuadParams::default();
        let oracle = bisect(|t| thrust_from_throttle(t, &p) - p.weight(), 0.0, 1.0);
        let t_h = p.hover_throttle();
        assert_relative_eq!(t_h, oracle, epsilon = 1e-12);
        assert!((t_h - 0.3).abs() < 0.01);
        let x = QuadState::at_rest(Vector3::new(1.0, 2.0, 3.0));
        let d = quad_deriv(&x, &QuadCommand::new(t_h, Vector3::zeros()), &p);
        assert_eq!(d.position, Vector3::zeros());
        assert_eq!(d.attitude, Quaternion::new(0.0, 0.0, 0.0, 0.0));
        assert!(d.velocity.norm() < 1e-12);
        assert_eq!(d.body_rates, Vector3::zeros());
    }

    #[test]
    fn free_fall_from_rest() {
        let p = QuadParams::default();
        let d = quad_deriv(&QuadState::default(), &QuadCommand::ZERO, &p);
        assert_eq!(d.velocity, Vector3::new(0.0, 0.0, -p.gravity));
    }

    #[test]
    fn thrust_polynomial_values() {
        let mut p = QuadParams {
            thrust_poly: [0.0, 0.0, 20.0],
            ..QuadParams::default()
        };
        assert_eq!(thrust_from_throttle(0.0, &p), 0.0);
        assert_eq!(thrust_from_throttle(1.0, &p), 20.0);
        p.thrust_poly = [0.0, 5.0, 20.0];
        assert_relative_eq!(thrust_from_throttle(0.5, &p), 7.5);
    }

    #[test]
    fn default_params_are_valid_and_reach_four_g() {
        let p = QuadParams::default();
        p.validate().unwrap();
        let twr = p.max_thrust() / p.weight();
        assert!((twr - 4.0).abs() < 0.01, "thrust-to-weight {twr}");
    }

    #[test]
    fn rejects_params_that_cannot_lift() {
        let p = QuadParams {
            thrust_poly: [0.0, 5.0, 0.0],
            ..QuadParams::default()
        };
        assert!(p.validate().is_err());
        let p = QuadParams {
            thrust_poly: [0.0, 50.0, -30.0],
            ..QuadParams::default()
        };
        assert!(p.validate().is_err(), "decreasing near full throttle");
    }

    #[test]
    fn pendulum_examples() {
        assert_eq!(
            pendulum_deriv(&PendulumState::new(0.0, 0.0), 0.0),
            PendulumState::new(0.0, 0.0)
        );
        assert_eq!(
            pendulum_deriv(&PendulumState::new(0.0, 1.0), 0.0),
            PendulumState::new(1.0, 0.0)
        );
        let d = pendulum_deriv(&PendulumState::new(std::f64::consts::FRAC_PI_2, 0.0), -1.0);
        assert_eq!(d, PendulumState::new(0.0, 0.0));
    }

    #[test]
    fn rotation_round_trip_matches_nalgebra() {
        let uq = UnitQuaternion::from_euler_angles(0.3, -0.7, 1.1);
        let x = QuadState {
            attitude: *uq.quaternion(),
            ..QuadState::default()
        };
        let v = Vector3::new(0.2, -1.5, 3.0);
        assert_relative_eq!(x.body_to_world(&v), uq * v, epsilon = 1e-12);
        assert_relative_eq!(x.world_to_body(&x.body_to_world(&v)), v, epsilon = 1e-12);
        assert_relative_eq!(x.thrust_axis(), uq * Vector3::z(), epsilon = 1e-12);
    }

    #[test]
    fn positive_roll_rate_tilts_thrust_toward_negative_y() {
        // Right-handed body rotation about x moves body z toward world -y.
        let p = QuadParams::default();
        let x = QuadState {
            body_rates: Vector3::new(1.0, 0.0, 0.0),
            ..QuadState::default()
        };
        let d = quad_deriv(&x, &QuadCommand::ZERO, &p);
        let stepped = x.add_scaled(&d, 1e-3);
        assert!(stepped.thrust_axis().y < 0.0);
    }

    fn arb_state() -> impl Strategy<Value = QuadState> {
        (
            prop::array::uniform3(-50.0..50.0f64),
            prop::array::uniform3(-3.0..3.0f64),
            prop::array::uniform3(-30.0..30.0f64),
            prop::array::uniform3(-8.0..8.0f64),
        )
            .prop_map(|(p, e, v, w)| QuadState {
                position: Vector3::from(p),
                attitude: *UnitQuaternion::from_euler_angles(e[0], e[1], e[2]).quaternion(),
                velocity: Vector3::from(v),
                body_rates: Vector3::from(w),
            })
    }

    fn arb_command() -> impl Strategy<Value = QuadCommand> {
        (0.0..=1.0f64, prop::array::uniform3(-10.0..10.0f64))
            .prop_map(|(t, r)| QuadCommand::new(t, Vector3::from(r)))
    }

    proptest! {
        #[test]
        fn zero_throttle_vertical_accel_is_gravity(x in arb_state()) {
            let p = QuadParams::default();
            let u = QuadCommand { throttle: 0.0, ..QuadCommand::ZERO };
            let d = quad_deriv(&x, &u, &p);
            prop_assert_eq!(d.velocity.z, -p.gravity);
        }

        #[test]
        fn rate_loop_is_affine_in_desired_rates(x in arb_state(), u in arb_command(), k in -1.0..1.0f64) {
            let p = QuadParams::default();
            let mut u2 = u;
            u2.rates.x += k;
            let d1 = quad_deriv(&x, &u, &p);
            let d2 = quad_deriv(&x, &u2, &p);
            prop_assert!((d2.body_rates.x - d1.body_rates.x - 50.0 * k).abs() < 1e-9);
            prop_assert!((d2.body_rates.y - d1.body_rates.y).abs() < 1e-12);
        }

        #[test]
        fn control_affine_in_input(x in arb_state(), u in arb_command(), v in arb_command()) {
            // Affine in the thrust force and rates: the midpoint command maps to
            // the midpoint derivative once throttle enters through a linear thrust map.
            let p = QuadParams { thrust_poly: [0.0, 39.24, 0.0], ..QuadParams::default() };
            let mid = u.lerp(&v, 0.5);
            let (du, dv, dm) = (quad_deriv(&x, &u, &p), quad_deriv(&x, &v, &p), quad_deriv(&x, &mid, &p));
            prop_assert!(((du.velocity + dv.velocity) * 0.5 - dm.velocity).amax() < 1e-9);
            prop_assert!(((du.body_rates + dv.body_rates) * 0.5 - dm.body_rates).amax() < 1e-9);
        }

        #[test]
        fn pendulum_affine_in_input(th in -3.0..3.0f64, om in -3.0..3.0f64, u in -5.0..5.0f64, h in 0.01..1.0f64) {
            let x = PendulumState::new(th, om);
            let d0 = pendulum_deriv(&x, u);
            let d1 = pendulum_deriv(&x, u + h);
            prop_assert!(((d1.theta_dot - d0.theta_dot) / h - 1.0).abs() < 1e-9);
            prop_assert_eq!(d1.theta, d0.theta);
        }

        #[test]
        fn throttle_inversion_round_trips(t in 0.0..=1.0f64) {
            let p = QuadParams::default();
            let thrust = thrust_from_throttle(t, &p);
            prop_assert!((throttle_for_thrust(thrust, &p) - t).abs() < 1e-12);
        }
    }
}
