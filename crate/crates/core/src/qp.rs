//! Backup-CBF quadratic-program filter for the pendulum, used as the baseline
//! the regulation filter is compared against.
//!
//! With a scalar input and a single affine constraint the QP
//!
//! ```text
//! min |u - u_des|²   s.t.   ∇h_I·f(x) + ∇h_I·g(x) u >= -alpha h_I(x)
//! ```
//!
//! is a projection onto a half-line and is solved in closed form. The gradient
//! of the implicit barrier is taken by central finite differences, which costs
//! four extra rollouts per call.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::flow::TrajectoryBuffer;
use crate::harness::{run_pendulum, PendulumController, PendulumLog};
use crate::pendulum::{pendulum_filter, pendulum_h, pendulum_h_implicit, PendulumFilterParams};
use crate::scenario::PendulumScenario;
use crate::vehicle::{pendulum_deriv, PendulumState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QpBaselineParams {
    /// Linear class-K gain, `alpha(h) = alpha * h`.
    pub alpha: f64,
    pub fd_step: f64,
    /// Symmetric input bound applied after solving, if any.
    pub input_limit: Option<f64>,
}

impl Default for QpBaselineParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            fd_step: 1e-4,
            input_limit: None,
        }
    }
}

impl QpBaselineParams {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.alpha > 0.0 && self.fd_step > 0.0) {
            return Err(ConfigError::invalid(
                "qp",
                "alpha and fd_step must be positive",
            ));
        }
        if matches!(self.input_limit, Some(l) if !(l > 0.0)) {
            return Err(ConfigError::invalid("qp", "input_limit must be positive"));
        }
        Ok(())
    }
}

/// Central-difference gradient of `h` at `x`.
pub fn fd_gradient(
    x: &PendulumState,
    step: f64,
    mut h: impl FnMut(&PendulumState) -> f64,
) -> [f64; 2] {
    let dtheta = h(&PendulumState::new(x.theta + step, x.theta_dot))
        - h(&PendulumState::new(x.theta - step, x.theta_dot));
    let domega = h(&PendulumState::new(x.theta, x.theta_dot + step))
        - h(&PendulumState::new(x.theta, x.theta_dot - step));
    [dtheta / (2.0 * step), domega / (2.0 * step)]
}

/// Finite-difference gradient of the pendulum's implicit barrier.
pub fn h_implicit_gradient_fd(
    x: &PendulumState,
    params: &PendulumFilterParams,
    step: f64,
    scratch: &mut TrajectoryBuffer<PendulumState>,
) -> [f64; 2] {
    fd_gradient(x, step, |s| pendulum_h_implicit(s, params, scratch))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QpOutput {
    pub u: f64,
    pub h_i: f64,
    pub gradient: [f64; 2],
    /// Constraint binds at the returned input.
    pub active: bool,
    /// No input satisfies the constraint; the backup input was returned.
    pub infeasible: bool,
}

/// Solve the single-constraint QP given the barrier value and gradient.
pub fn solve_half_space(
    x: &PendulumState,
    u_des: f64,
    h_i: f64,
    gradient: [f64; 2],
    qp: &QpBaselineParams,
) -> (f64, bool, bool) {
    let f = pendulum_deriv(x, 0.0);
    // g(x) = [0, 1]
    let a = gradient[1];
    let b = -qp.alpha * h_i - (gradient[0] * f.theta + gradient[1] * f.theta_dot);
    if a * u_des >= b {
        return (u_des, false, false);
    }
    if a.abs() < 1e-10 {
        return (f64::NAN, true, true);
    }
    (b / a, true, false)
}

pub fn qp_filter(
    x: &PendulumState,
    u_des: f64,
    params: &PendulumFilterParams,
    qp: &QpBaselineParams,
    scratch: &mut TrajectoryBuffer<PendulumState>,
) -> QpOutput {
    let h_i = pendulum_h_implicit(x, params, scratch);
    let gradient = h_implicit_gradient_fd(x, params, qp.fd_step, scratch);
    let (mut u, active, infeasible) = if h_i.is_finite() {
        solve_half_space(x, u_des, h_i, gradient, qp)
    } else {
        (f64::NAN, true, true)
    };
    if infeasible {
        u = params.backup(x);
    }
    if let Some(limit) = qp.input_limit {
        u = u.clamp(-limit, limit);
    }
    QpOutput {
        u,
        h_i,
        gradient,
        active,
        infeasible,
    }
}

/// Per-call wall-time summary in nanoseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub calls: usize,
    pub median_ns: f64,
    pub p99_ns: f64,
    pub mean_ns: f64,
}

impl TimingStats {
    pub fn from_samples(samples: &mut [f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        samples.sort_by(f64::total_cmp);
        let pick = |q: f64| samples[((samples.len() - 1) as f64 * q).round() as usize];
        Self {
            calls: samples.len(),
            median_ns: pick(0.5),
            p99_ns: pick(0.99),
            mean_ns: samples.iter().sum::<f64>() / samples.len() as f64,
        }
    }
}

/// Outcome of one filter over one pendulum run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterRun {
    pub filter: String,
    pub setting: String,
    pub timing: TimingStats,
    pub max_abs_theta: f64,
    pub max_abs_theta_dot: f64,
    pub min_h: f64,
    /// Sign changes of the applied input while the state is near the boundary.
    pub boundary_sign_flips: usize,
    #[serde(skip)]
    pub log: PendulumLog,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub runs: Vec<FilterRun>,
    /// `h_I(x)` below this counts as near the boundary for the flip metric.
    pub near_boundary: f64,
}

impl ComparisonReport {
    pub fn run(&self, filter: &str, setting: &str) -> Option<&FilterRun> {
        self.runs
            .iter()
            .find(|r| r.filter == filter && r.setting == setting)
    }
}

/// Count sign changes of `u` across consecutive ticks where `h_I(x) < band`,
/// i.e. while the state rides the edge of the implicit safe set.
/// Exact zeros carry the previous sign.
pub fn boundary_sign_flips(log: &PendulumLog, band: f64) -> usize {
    let mut flips = 0;
    let mut last_sign = 0.0f64;
    for row in &log.rows {
        if !(row.h_i < band) {
            last_sign = 0.0;
            continue;
        }
        let s = if row.u > 0.0 {
            1.0
        } else if row.u < 0.0 {
            -1.0
        } else {
            last_sign
        };
        if last_sign != 0.0 && s != 0.0 && s != last_sign {
            flips += 1;
        }
        if s != 0.0 {
            last_sign = s;
        }
    }
    flips
}

/// Run every gain setting of the scenario under both filters.
pub fn compare_filters(scenario: &PendulumScenario) -> Result<ComparisonReport, ConfigError> {
    scenario.validate()?;
    let mut runs = Vec::new();
    for setting in &scenario.settings {
        let params = PendulumFilterParams {
            beta: setting.beta,
            ..scenario.filter
        };
        let qp = QpBaselineParams {
            alpha: setting.alpha,
            ..scenario.qp
        };
        let mut scratch = TrajectoryBuffer::new(&params.flow);
        let mut times = Vec::with_capacity(scenario.n_ticks() + 1);

        let regulation = {
            let mut controller = |x: &PendulumState, u_des: f64| {
                let start = Instant::now();
                let out = pendulum_filter(x, u_des, &params, &mut scratch);
                times.push(start.elapsed().as_nanos() as f64);
                (out.u, out.lambda, out.h_i)
            };
            run_pendulum(scenario, &mut controller as &mut PendulumController)
        };
        runs.push(summarize(
            "regulation",
            &setting.name,
            regulation,
            &mut times,
            scenario.near_boundary,
        ));

        times.clear();
        let baseline = {
            let mut controller = |x: &PendulumState, u_des: f64| {
                let start = Instant::now();
                let out = qp_filter(x, u_des, &params, &qp, &mut scratch);
                times.push(start.elapsed().as_nanos() as f64);
                (out.u, f64::NAN, out.h_i)
            };
            run_pendulum(scenario, &mut controller as &mut PendulumController)
        };
        runs.push(summarize(
            "qp",
            &setting.name,
            baseline,
            &mut times,
            scenario.near_boundary,
        ));
    }
    Ok(ComparisonReport {
        runs,
        near_boundary: scenario.near_boundary,
    })
}

fn summarize(
    filter: &str,
    setting: &str,
    log: PendulumLog,
    times: &mut [f64],
    band: f64,
) -> FilterRun {
    let max_abs_theta = log
        .rows
        .iter()
        .map(|r| r.state.theta.abs())
        .fold(0.0, f64::max);
    let max_abs_theta_dot = log
        .rows
        .iter()
        .map(|r| r.state.theta_dot.abs())
        .fold(0.0, f64::max);
    let min_h = log
        .rows
        .iter()
        .map(|r| pendulum_h(&r.state))
        .fold(f64::INFINITY, f64::min);
    FilterRun {
        filter: filter.to_string(),
        setting: setting.to_string(),
        timing: TimingStats::from_samples(times),
        max_abs_theta,
        max_abs_theta_dot,
        min_h,
        boundary_sign_flips: boundary_sign_flips(&log, band),
        log,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gradient_of_quadratic_surrogate() {
        let g = fd_gradient(&PendulumState::new(0.5, 0.0), 1e-4, |s| {
            1.0 - s.theta * s.theta - s.theta_dot * s.theta_dot
        });
        assert!((g[0] + 1.0).abs() < 1e-6 && g[1].abs() < 1e-6, "{g:?}");
    }

    #[test]
    fn gradient_respects_odd_symmetry() {
        // The pendulum with a linear backup law is odd: h_I(-x) = h_I(x).
        let p = PendulumFilterParams::default();
        let mut buf = TrajectoryBuffer::new(&p.flow);
        let x = PendulumState::new(0.4, 0.3);
        let neg = PendulumState::new(-0.4, -0.3);
        let g = h_implicit_gradient_fd(&x, &p, 1e-4, &mut buf);
        let gn = h_implicit_gradient_fd(&neg, &p, 1e-4, &mut buf);
        assert!((g[0] + gn[0]).abs() < 1e-8 && (g[1] + gn[1]).abs() < 1e-8);
    }

    #[test]
    fn richardson_step_halving() {
        let h = |s: &PendulumState| (2.0 * s.theta).sin() * s.theta_dot.exp();
        let x = PendulumState::new(0.3, -0.2);
        let exact = [
            2.0 * (0.6f64).cos() * (-0.2f64).exp(),
            (0.6f64).sin() * (-0.2f64).exp(),
        ];
        let e1 = fd_gradient(&x, 1e-2, h);
        let e2 = fd_gradient(&x, 5e-3, h);
        for i in 0..2 {
            let r1 = (e1[i] - exact[i]).abs();
            let r2 = (e2[i] - exact[i]).abs();
            // Second-order: halving the step cuts the error by about four.
            assert!((r1 / r2 - 4.0).abs() < 0.1, "ratio {}", r1 / r2);
        }
    }

    #[test]
    fn inactive_constraint_returns_desired_input() {
        let p = PendulumFilterParams::default();
        let mut buf = TrajectoryBuffer::new(&p.flow);
        let out = qp_filter(
            &PendulumState::new(0.0, 0.0),
            0.7,
            &p,
            &QpBaselineParams::default(),
            &mut buf,
        );
        assert_eq!(out.u, 0.7);
        assert!(!out.active);
    }

    #[test]
    fn active_constraint_is_met_with_equality() {
        let p = PendulumFilterParams::default();
        let qp = QpBaselineParams::default();
        let mut buf = TrajectoryBuffer::new(&p.flow);
        let x = PendulumState::new(0.6, 0.9);
        let out = qp_filter(&x, 20.0, &p, &qp, &mut buf);
        assert!(out.active && !out.infeasible);
        let f = pendulum_deriv(&x, 0.0);
        let lhs = out.gradient[0] * f.theta + out.gradient[1] * (f.theta_dot + out.u);
        assert!(
            (lhs + qp.alpha * out.h_i).abs() < 1e-9,
            "residual {}",
            lhs + qp.alpha * out.h_i
        );
    }

    #[test]
    fn degenerate_gradient_is_infeasible_and_falls_back() {
        let x = PendulumState::new(0.2, 0.0);
        let (_, active, infeasible) =
            solve_half_space(&x, 1.0, -1.0, [0.0, 0.0], &QpBaselineParams::default());
        assert!(active && infeasible);
    }

    #[test]
    fn sign_flip_counter() {
        use crate::harness::PendulumRow;
        let row = |h_i: f64, u: f64| PendulumRow {
            t: 0.0,
            state: PendulumState::new(0.5, 0.0),
            u_des: 0.0,
            u,
            h_i,
            lambda: 0.0,
        };
        let log = PendulumLog {
            rows: vec![
                row(0.01, 1.0),
                row(0.01, -1.0),
                row(0.0, 0.0),
                row(-0.01, 1.0),
                row(1.0, -1.0),
            ],
        };
        assert_eq!(boundary_sign_flips(&log, 0.1), 2);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn closed_form_matches_grid_search(
            th in -0.95..0.95f64,
            om in -1.35..1.35f64,
            u_des in -10.0..10.0f64,
        ) {
            let p = PendulumFilterParams::default();
            let qp = QpBaselineParams::default();
            let x = PendulumState::new(th, om);
            let mut buf = TrajectoryBuffer::new(&p.flow);
            let out = qp_filter(&x, u_des, &p, &qp, &mut buf);
            prop_assume!(!out.infeasible && out.h_i.is_finite());
            let f = pendulum_deriv(&x, 0.0);
            let feasible = |u: f64| {
                out.gradient[0] * f.theta + out.gradient[1] * (f.theta_dot + u) >= -qp.alpha * out.h_i
            };
            let (lo, hi, n) = (-200.0, 200.0, 100_000);
            let step = (hi - lo) / n as f64;
            let best = (0..=n)
                .map(|k| lo + k as f64 * step)
                .filter(|u| feasible(*u))
                .min_by(|a, b| (a - u_des).abs().total_cmp(&(b - u_des).abs()));
            if let Some(best) = best {
                prop_assert!((best - out.u).abs() <= step + 1e-9, "grid {best} vs {}", out.u);
            }
        }
    }
}
