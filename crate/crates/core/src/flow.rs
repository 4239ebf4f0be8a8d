//! Fixed-step forward integration of the backup closed loop and evaluation of
//! the implicit barrier over the resulting trajectory.
//!
//! Everything here works on caller-owned buffers. After a
//! [`TrajectoryBuffer`] is constructed, rollouts and barrier evaluations never
//! touch the heap.

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::vehicle::FlowState;

/// Rollout horizon and integration step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FlowConfigRaw", into = "FlowConfigRaw")]
pub struct FlowConfig {
    horizon: f64,
    dt: f64,
    n_steps: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlowConfigRaw {
    horizon: f64,
    dt: f64,
}

impl TryFrom<FlowConfigRaw> for FlowConfig {
    type Error = ConfigError;

    fn try_from(raw: FlowConfigRaw) -> Result<Self, Self::Error> {
        FlowConfig::new(raw.horizon, raw.dt)
    }
}

impl From<FlowConfig> for FlowConfigRaw {
    fn from(cfg: FlowConfig) -> Self {
        FlowConfigRaw {
            horizon: cfg.horizon,
            dt: cfg.dt,
        }
    }
}

impl FlowConfig {
    pub fn new(horizon: f64, dt: f64) -> Result<Self, ConfigError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(ConfigError::invalid("flow", "dt must be positive"));
        }
        if !(horizon >= dt && horizon.is_finite()) {
            return Err(ConfigError::invalid(
                "flow",
                "horizon must be at least one step",
            ));
        }
        let n_steps = (horizon / dt).round() as usize;
        if (n_steps as f64 * dt - horizon).abs() > 1e-12 * horizon.max(1.0) {
            return Err(ConfigError::invalid(
                "flow",
                format!("horizon {horizon} is not an integer multiple of dt {dt}"),
            ));
        }
        Ok(Self {
            horizon,
            dt,
            n_steps,
        })
    }

    /// 3 s at 10 ms: long enough for a 30 m/s drone to brake to a hover.
    pub fn quad_default() -> Self {
        Self::new(3.0, 0.01).expect("valid default")
    }

    pub fn pendulum_default() -> Self {
        Self::new(2.0, 0.01).expect("valid default")
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Number of samples in a full rollout, including the initial state.
    pub fn n_samples(&self) -> usize {
        self.n_steps + 1
    }
}

/// Fixed-capacity storage for one backup rollout.
#[derive(Debug, Clone)]
pub struct TrajectoryBuffer<S> {
    times: Vec<f64>,
    states: Vec<S>,
    capacity: usize,
    diverged: bool,
}

impl<S: FlowState> TrajectoryBuffer<S> {
    pub fn new(cfg: &FlowConfig) -> Self {
        Self::with_capacity(cfg.n_samples())
    }

    pub fn with_capacity(capacity: usize) -> Self {
        Self {
            times: Vec::with_capacity(capacity),
            states: Vec::with_capacity(capacity),
            capacity,
            diverged: false,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn states(&self) -> &[S] {
        &self.states
    }

    /// True when the last rollout hit a non-finite state and was cut short.
    pub fn diverged(&self) -> bool {
        self.diverged
    }

    pub fn terminal(&self) -> Option<&S> {
        self.states.last()
    }

    fn reset(&mut self) {
        self.times.clear();
        self.states.clear();
        self.diverged = false;
    }

    fn push(&mut self, t: f64, x: S) {
        debug_assert!(
            self.states.len() < self.capacity,
            "trajectory buffer overflow"
        );
        self.times.push(t);
        self.states.push(x);
    }
}

/// One classic fourth-order Runge–Kutta step of `x' = field(x)`.
#[inline]
pub fn rk4_step<S: FlowState>(x: &S, h: f64, mut field: impl FnMut(&S) -> S) -> S {
    let k1 = field(x);
    let k2 = field(&x.add_scaled(&k1, 0.5 * h));
    let k3 = field(&x.add_scaled(&k2, 0.5 * h));
    let k4 = field(&x.add_scaled(&k3, h));
    let mut next = x
        .add_scaled(&k1, h / 6.0)
        .add_scaled(&k2, h / 3.0)
        .add_scaled(&k3, h / 3.0)
        .add_scaled(&k4, h / 6.0);
    next.renormalize();
    next
}

/// Integrate `x' = deriv(x, backup(x))` from `x0` over the configured horizon,
/// writing every grid sample into `out`.
///
/// On a non-finite state the rollout stops and `out.diverged()` is set.
pub fn rollout_backup<S, U>(
    x0: &S,
    backup: impl Fn(&S) -> U,
    deriv: impl Fn(&S, &U) -> S,
    cfg: &FlowConfig,
    out: &mut TrajectoryBuffer<S>,
) where
    S: FlowState,
{
    assert!(
        out.capacity() >= cfg.n_samples(),
        "trajectory buffer holds {} samples, rollout needs {}",
        out.capacity(),
        cfg.n_samples()
    );
    out.reset();
    let mut x = *x0;
    x.renormalize();
    if !x.is_finite() {
        out.diverged = true;
        return;
    }
    out.push(0.0, x);
    let h = cfg.dt();
    for k in 1..=cfg.n_steps() {
        x = rk4_step(&x, h, |s| deriv(s, &backup(s)));
        if !x.is_finite() {
            out.diverged = true;
            return;
        }
        out.push(k as f64 * h, x);
    }
}

/// `min( min_k h(traj[k]), h_B(traj[N]) )`, or `-inf` for a diverged rollout.
pub fn implicit_barrier<S: FlowState>(
    traj: &TrajectoryBuffer<S>,
    h: impl Fn(&S) -> f64,
    h_backup: impl Fn(&S) -> f64,
) -> f64 {
    if traj.diverged() {
        return f64::NEG_INFINITY;
    }
    let Some(terminal) = traj.terminal() else {
        return f64::NEG_INFINITY;
    };
    let path_min = traj.states().iter().map(&h).fold(f64::INFINITY, f64::min);
    let value = path_min.min(h_backup(terminal));
    if value.is_nan() {
        f64::NEG_INFINITY
    } else {
        value
    }
}

/// Rollout followed by [`implicit_barrier`].
pub fn h_implicit<S, U>(
    x0: &S,
    backup: impl Fn(&S) -> U,
    deriv: impl Fn(&S, &U) -> S,
    cfg: &FlowConfig,
    h: impl Fn(&S) -> f64,
    h_backup: impl Fn(&S) -> f64,
    scratch: &mut TrajectoryBuffer<S>,
) -> f64
where
    S: FlowState,
{
    rollout_backup(x0, backup, deriv, cfg, scratch);
    implicit_barrier(scratch, h, h_backup)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vehicle::{pendulum_deriv, PendulumState};

    #[test]
    fn rejects_bad_configs() {
        assert!(FlowConfig::new(1.0, 0.0).is_err());
        assert!(FlowConfig::new(0.001, 0.01).is_err());
        assert!(FlowConfig::new(1.005, 0.01).is_err());
        let cfg = FlowConfig::new(3.0, 0.01).unwrap();
        assert_eq!(cfg.n_steps(), 300);
        assert_eq!(cfg.n_samples(), 301);
    }

    #[test]
    fn constant_flow_keeps_initial_state() {
        let cfg = FlowConfig::new(1.0, 0.1).unwrap();
        let mut buf = TrajectoryBuffer::new(&cfg);
        rollout_backup(&4.2, |_| 0.0, |_, _: &f64| 0.0, &cfg, &mut buf);
        assert_eq!(buf.len(), 11);
        assert!(buf.states().iter().all(|&x| x == 4.2));
    }

    #[test]
    fn exponential_decay_matches_analytic_solution() {
        let cfg = FlowConfig::new(1.0, 0.01).unwrap();
        let mut buf = TrajectoryBuffer::new(&cfg);
        rollout_backup(&1.0, |_| (), |x: &f64, _| -x, &cfg, &mut buf);
        let terminal = *buf.terminal().unwrap();
        assert!((terminal - (-1.0f64).exp()).abs() < 1e-9, "{terminal}");
        let times = buf.times();
        assert_eq!(times[0], 0.0);
        assert!(times.windows(2).all(|w| w[1] > w[0]));
        assert!((times[100] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn divergence_yields_negative_infinity() {
        let cfg = FlowConfig::new(1.0, 0.1).unwrap();
        let mut buf = TrajectoryBuffer::new(&cfg);
        rollout_backup(&1.0, |_| (), |x: &f64, _| x * x * 1e200, &cfg, &mut buf);
        assert!(buf.diverged());
        assert_eq!(implicit_barrier(&buf, |x| *x, |x| *x), f64::NEG_INFINITY);
    }

    #[test]
    fn negative_first_sample_dominates() {
        let cfg = FlowConfig::new(1.0, 0.1).unwrap();
        let mut buf = TrajectoryBuffer::new(&cfg);
        rollout_backup(&-0.5, |_| (), |_: &f64, _| 10.0, &cfg, &mut buf);
        let v = implicit_barrier(&buf, |x| *x, |_| 100.0);
        assert_eq!(v, -0.5);
    }

    #[test]
    fn pendulum_backup_reaches_backup_set_and_matches_dense_reference() {
        let gain = [6.0, 5.0];
        let backup = |x: &PendulumState| -gain[0] * x.theta - gain[1] * x.theta_dot;
        let x0 = PendulumState::new(0.3, -0.2);
        let cfg = FlowConfig::new(2.0, 0.01).unwrap();
        let fine = FlowConfig::new(2.0, 0.001).unwrap();
        let mut coarse_buf = TrajectoryBuffer::new(&cfg);
        let mut fine_buf = TrajectoryBuffer::new(&fine);
        rollout_backup(
            &x0,
            backup,
            |s, u| pendulum_deriv(s, *u),
            &cfg,
            &mut coarse_buf,
        );
        rollout_backup(
            &x0,
            backup,
            |s, u| pendulum_deriv(s, *u),
            &fine,
            &mut fine_buf,
        );
        let a = coarse_buf.terminal().unwrap();
        let b = fine_buf.terminal().unwrap();
        assert!((a.theta - b.theta).abs() < 1e-6);
        assert!((a.theta_dot - b.theta_dot).abs() < 1e-6);
        let theta_max = std::f64::consts::PI / 12.0;
        assert!(a.theta.abs() < theta_max && a.theta_dot.abs() < 0.1);
    }

    #[test]
    #[should_panic(expected = "trajectory buffer holds")]
    fn undersized_buffer_is_rejected() {
        let cfg = FlowConfig::new(1.0, 0.1).unwrap();
        let mut buf = TrajectoryBuffer::<f64>::with_capacity(3);
        rollout_backup(&1.0, |_| (), |_: &f64, _| 0.0, &cfg, &mut buf);
    }
}
