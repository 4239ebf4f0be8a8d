//! Closed-loop runner: pilot → filter → plant at a fixed control rate, with
//! telemetry capture and the metrics reported for each run.

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::flow::rk4_step;
use crate::geofence::GeofenceBox;
use crate::pilot::{PilotSource, RadioLink, ScriptedPilot, SilentPilot};
use crate::scenario::{PendulumScenario, PilotConfig, QuadScenario};
use crate::shield::{FilterOutput, GeofenceShield};
use crate::telemetry::{TelemetryLog, TelemetryRow, Violation};
use crate::vehicle::{
    pendulum_deriv, quad_deriv, PendulumState, QuadCommand, QuadParams, QuadState,
};

/// Stepwise quadrotor simulation with the shield in the loop.
///
/// Each control tick filters the desired command at the current state, then
/// [`Simulator::advance`] holds the filtered command over the physics substeps.
#[derive(Debug, Clone)]
pub struct Simulator {
    shield: GeofenceShield,
    quad: QuadParams,
    state: QuadState,
    link: RadioLink,
    control_dt: f64,
    substeps: usize,
    tick: u64,
    applied: QuadCommand,
    last_output: Option<FilterOutput>,
}

impl Simulator {
    /// Validate the scenario and build a simulator at its initial state.
    ///
    /// Rejects an initial state outside the invariant set unless the scenario
    /// sets `allow_unsafe_start`.
    pub fn new(s: &QuadScenario) -> Result<Self, ConfigError> {
        s.validate()?;
        let mut shield = GeofenceShield::new(s.geofence, s.filter, s.quad, s.flow)?;
        let state = s.initial.to_state();
        let h_i = shield.h_implicit(&state);
        if !(h_i > 0.0) && !s.allow_unsafe_start {
            return Err(ConfigError::UnsafeStart { h_i });
        }
        Ok(Self {
            shield,
            quad: s.quad,
            state,
            link: RadioLink::default(),
            control_dt: s.control_dt,
            substeps: s.substeps(),
            tick: 0,
            applied: QuadCommand::ZERO,
            last_output: None,
        })
    }

    pub fn time(&self) -> f64 {
        self.tick as f64 * self.control_dt
    }

    pub fn control_dt(&self) -> f64 {
        self.control_dt
    }

    pub fn tick_index(&self) -> u64 {
        self.tick
    }

    pub fn state(&self) -> &QuadState {
        &self.state
    }

    pub fn shield(&self) -> &GeofenceShield {
        &self.shield
    }

    pub fn last_output(&self) -> Option<&FilterOutput> {
        self.last_output.as_ref()
    }

    /// Filter the pilot message (if any) at the current state.
    pub fn filter(&mut self, msg: Option<QuadCommand>) -> TelemetryRow {
        let t = self.time();
        let u_des = self.link.desired(t, msg);
        let out = self.shield.filter(&self.state, &u_des);
        self.applied = out.u_cmd;
        self.last_output = Some(out);
        TelemetryRow {
            t,
            state: self.state,
            u_des,
            u_cmd: out.u_cmd,
            h_i: out.h_i,
            lambda: out.lambda,
            v_perp: out.v_perp,
        }
    }

    /// Geofence value of the current state, if it is negative.
    pub fn violation(&self) -> Option<Violation> {
        let h = self.shield.fence().h(&self.state.position);
        (h < 0.0).then(|| Violation { t: self.time(), h })
    }

    /// Integrate one control period under the last filtered command.
    pub fn advance(&mut self) {
        let h = self.control_dt / self.substeps as f64;
        let u = self.applied;
        for _ in 0..self.substeps {
            self.state = rk4_step(&self.state, h, |x| quad_deriv(x, &u, &self.quad));
        }
        self.tick += 1;
    }
}

/// Build the scenario's own pilot.
pub fn scenario_pilot(s: &QuadScenario) -> Box<dyn PilotSource> {
    match &s.pilot {
        PilotConfig::Scripted { segments } => {
            Box::new(ScriptedPilot::new(segments.clone(), s.quad))
        }
        PilotConfig::External => Box::new(SilentPilot),
    }
}

/// Run a scenario against `pilot` until its duration elapses or the geofence
/// is violated.
pub fn run_scenario(
    s: &QuadScenario,
    pilot: &mut dyn PilotSource,
) -> Result<TelemetryLog, ConfigError> {
    let mut sim = Simulator::new(s)?;
    let n_ticks = s.n_ticks();
    let mut log = TelemetryLog {
        rows: Vec::with_capacity(n_ticks + 1),
        violation: None,
    };
    for k in 0..=n_ticks {
        let msg = pilot.poll(sim.time(), sim.state());
        log.push(sim.filter(msg));
        if let Some(v) = sim.violation() {
            log.violation = Some(v);
            break;
        }
        if k < n_ticks {
            sim.advance();
        }
    }
    Ok(log)
}

/// Run a scenario with the pilot it describes.
pub fn run_scripted(s: &QuadScenario) -> Result<TelemetryLog, ConfigError> {
    let mut pilot = scenario_pilot(s);
    run_scenario(s, pilot.as_mut())
}

/// λ below this marks the filter as braking.
pub const BRAKING_LAMBDA: f64 = 0.9;
/// Approach speed below which the vehicle counts as stopped, m/s.
pub const STOPPED_SPEED: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub top_speed: f64,
    pub peak_approach_speed: f64,
    pub min_h: f64,
    pub min_face_distance: f64,
    pub min_lambda: f64,
    /// Distance to the nearest face when lambda first dropped below
    /// [`BRAKING_LAMBDA`].
    pub brake_onset_distance: Option<f64>,
    /// Distance to the binding face at the first stop after braking began.
    pub stop_distance_to_face: Option<f64>,
    pub stop_time: Option<f64>,
    pub max_command_step: f64,
    pub violated: bool,
    pub duration: f64,
}

pub fn compute_metrics(log: &TelemetryLog, fence: &GeofenceBox, rate_limit: f64) -> Metrics {
    let mut m = Metrics {
        top_speed: 0.0,
        peak_approach_speed: 0.0,
        min_h: f64::INFINITY,
        min_face_distance: f64::INFINITY,
        min_lambda: f64::INFINITY,
        brake_onset_distance: None,
        stop_distance_to_face: None,
        stop_time: None,
        max_command_step: 0.0,
        violated: log.violation.is_some(),
        duration: log.rows.last().map_or(0.0, |r| r.t),
    };
    let mut braking = false;
    for (i, row) in log.rows.iter().enumerate() {
        let p = &row.state.position;
        m.top_speed = m.top_speed.max(row.state.velocity.norm());
        m.peak_approach_speed = m.peak_approach_speed.max(row.v_perp);
        m.min_h = m.min_h.min(fence.h(p));
        m.min_face_distance = m.min_face_distance.min(fence.face_distance(p));
        m.min_lambda = m.min_lambda.min(row.lambda);
        if i > 0 {
            let step = row.u_cmd.distance(&log.rows[i - 1].u_cmd, rate_limit);
            m.max_command_step = m.max_command_step.max(step);
        }
        if row.lambda < BRAKING_LAMBDA && !braking {
            braking = true;
            m.brake_onset_distance = Some(fence.face_distance(p));
        }
        if braking && m.stop_time.is_none() && row.v_perp < STOPPED_SPEED {
            m.stop_time = Some(row.t);
            m.stop_distance_to_face = Some(fence.face_distance(p));
        }
    }
    m.violated |= m.min_h < 0.0;
    m
}

/// Lipschitz fit of the applied command along a trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Smoothness {
    /// Fitted bound on |Δu|/Δt (normalized command units per second).
    pub fitted_rate: f64,
    pub max_rate: f64,
    /// Increments larger than `jump_factor · fitted_rate · Δt`.
    pub jumps: usize,
    pub jump_factor: f64,
}

/// Fit `L` as the `quantile` of per-tick command rates and count increments
/// exceeding `jump_factor · L · Δt`.
pub fn command_smoothness(
    log: &TelemetryLog,
    rate_limit: f64,
    quantile: f64,
    jump_factor: f64,
) -> Smoothness {
    let mut rates: Vec<f64> = log
        .rows
        .windows(2)
        .map(|w| w[1].u_cmd.distance(&w[0].u_cmd, rate_limit) / (w[1].t - w[0].t))
        .collect();
    if rates.is_empty() {
        return Smoothness {
            fitted_rate: 0.0,
            max_rate: 0.0,
            jumps: 0,
            jump_factor,
        };
    }
    let max_rate = rates.iter().copied().fold(0.0, f64::max);
    let mut sorted = rates.clone();
    sorted.sort_by(f64::total_cmp);
    let fitted_rate = sorted[((sorted.len() - 1) as f64 * quantile).round() as usize];
    let jumps = rates
        .drain(..)
        .filter(|r| *r > jump_factor * fitted_rate && fitted_rate.is_finite())
        .count();
    Smoothness {
        fitted_rate,
        max_rate,
        jumps,
        jump_factor,
    }
}

/// A contiguous stretch of ticks with λ below [`BRAKING_LAMBDA`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Engagement {
    pub start: f64,
    pub end: f64,
    /// Axis and side (+1/-1) of the face closest at the engagement's deepest point.
    pub axis: usize,
    pub side: f64,
    pub min_distance: f64,
    pub min_lambda: f64,
    /// Largest distance from that face reached before the next engagement.
    pub retreat_distance: f64,
}

impl Engagement {
    pub fn retreat(&self) -> f64 {
        self.retreat_distance - self.min_distance
    }
}

fn face_distance_on(
    fence: &GeofenceBox,
    p: &nalgebra::Vector3<f64>,
    axis: usize,
    side: f64,
) -> f64 {
    fence.half_extents[axis] - side * (p[axis] - fence.center[axis])
}

pub fn engagements(log: &TelemetryLog, fence: &GeofenceBox) -> Vec<Engagement> {
    let rows = &log.rows;
    let mut spans = Vec::new();
    let mut i = 0;
    while i < rows.len() {
        if rows[i].lambda < BRAKING_LAMBDA {
            let start = i;
            while i < rows.len() && rows[i].lambda < BRAKING_LAMBDA {
                i += 1;
            }
            spans.push((start, i));
        } else {
            i += 1;
        }
    }
    let mut out = Vec::with_capacity(spans.len());
    for (k, &(a, b)) in spans.iter().enumerate() {
        let deepest = (a..b)
            .min_by(|&x, &y| {
                fence
                    .min_face_distance(&rows[x].state.position)
                    .total_cmp(&fence.min_face_distance(&rows[y].state.position))
            })
            .expect("non-empty span");
        let p = rows[deepest].state.position;
        let d = p - fence.center;
        let (axis, _) = (0..3)
            .map(|j| (j, fence.half_extents[j] - d[j].abs()))
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .expect("three axes");
        let side = if d[axis] >= 0.0 { 1.0 } else { -1.0 };
        let next = spans.get(k + 1).map_or(rows.len(), |s| s.0);
        let retreat_distance = rows[b.min(rows.len())..next]
            .iter()
            .map(|r| face_distance_on(fence, &r.state.position, axis, side))
            .fold(f64::NEG_INFINITY, f64::max);
        out.push(Engagement {
            start: rows[a].t,
            end: rows[b - 1].t,
            axis,
            side,
            min_distance: face_distance_on(fence, &p, axis, side),
            min_lambda: rows[a..b]
                .iter()
                .map(|r| r.lambda)
                .fold(f64::INFINITY, f64::min),
            retreat_distance,
        });
    }
    out
}

/// Row of a pendulum run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PendulumRow {
    pub t: f64,
    pub state: PendulumState,
    pub u_des: f64,
    pub u: f64,
    pub h_i: f64,
    /// NaN for controllers without a blend weight.
    pub lambda: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PendulumLog {
    pub rows: Vec<PendulumRow>,
}

impl PendulumLog {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "theta", "theta_dot", "u_des", "u", "hI", "lambda"])?;
        for r in &self.rows {
            w.write_record(
                [
                    r.t,
                    r.state.theta,
                    r.state.theta_dot,
                    r.u_des,
                    r.u,
                    r.h_i,
                    r.lambda,
                ]
                .iter()
                .map(|v| format!("{v:?}")),
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Maps `(state, u_des)` to `(u, lambda, h_I)`.
pub type PendulumController<'a> = dyn FnMut(&PendulumState, f64) -> (f64, f64, f64) + 'a;

/// Closed-loop pendulum with a zero-order hold on the controller output.
pub fn run_pendulum(s: &PendulumScenario, controller: &mut PendulumController<'_>) -> PendulumLog {
    let n_ticks = s.n_ticks();
    let substeps = s.substeps();
    let h = s.control_dt / substeps as f64;
    let mut x = s.initial_state();
    let mut log = PendulumLog {
        rows: Vec::with_capacity(n_ticks + 1),
    };
    for k in 0..=n_ticks {
        let (u, lambda, h_i) = controller(&x, s.u_des);
        log.rows.push(PendulumRow {
            t: k as f64 * s.control_dt,
            state: x,
            u_des: s.u_des,
            u,
            h_i,
            lambda,
        });
        if k == n_ticks {
            break;
        }
        for _ in 0..substeps {
            x = rk4_step(&x, h, |s| pendulum_deriv(s, u));
        }
    }
    log
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::Scenario;

    fn quad(name: &str) -> QuadScenario {
        match Scenario::builtin(name).unwrap() {
            Scenario::Quad(q) => q,
            _ => panic!("not a quad scenario"),
        }
    }

    #[test]
    fn zero_duration_gives_one_row() {
        let mut s = quad("horizontal_sprint");
        s.duration = 0.0;
        let log = run_scripted(&s).unwrap();
        assert_eq!(log.len(), 1);
        assert_eq!(log.rows[0].t, 0.0);
    }

    #[test]
    fn unsafe_start_is_rejected_unless_flagged() {
        let mut s = quad("horizontal_sprint");
        s.initial.position = [
            s.geofence.center.x + s.geofence.half_extents.x + 1.0,
            0.0,
            s.initial.position[2],
        ];
        assert!(matches!(
            run_scripted(&s),
            Err(ConfigError::UnsafeStart { .. })
        ));
        s.allow_unsafe_start = true;
        let log = run_scripted(&s).unwrap();
        assert!(log.violation.is_some());
    }

    #[test]
    fn hover_holds_position_with_pilot_in_control() {
        let mut s = quad("cockpit_arena");
        let hover = s.quad.hover_throttle();
        s.duration = 3.0;
        // Deep enough inside that beta * h / v_floor clears 30.
        s.geofence.half_extents = nalgebra::Vector3::new(60.0, 60.0, 60.0);
        s.geofence.center = nalgebra::Vector3::new(0.0, 0.0, 5.0);
        s.pilot = PilotConfig::Scripted {
            segments: vec![crate::scenario::Segment::Command {
                duration: 3.0,
                throttle: hover,
                rates: [0.0; 3],
            }],
        };
        let log = run_scripted(&s).unwrap();
        let first = log.rows[0].state.position;
        for r in &log.rows {
            assert!((r.state.position - first).norm() < 1e-6);
            assert!(r.lambda > 1.0 - 1e-9, "lambda {}", r.lambda);
        }
    }

    #[test]
    fn metrics_of_constant_log() {
        let fence =
            GeofenceBox::new(nalgebra::Vector3::zeros(), nalgebra::Vector3::repeat(10.0)).unwrap();
        let row = TelemetryRow {
            t: 0.0,
            state: QuadState {
                velocity: nalgebra::Vector3::new(3.0, 4.0, 0.0),
                ..QuadState::default()
            },
            u_des: QuadCommand::ZERO,
            u_cmd: QuadCommand::ZERO,
            h_i: 5.0,
            lambda: 0.75,
            v_perp: 0.0,
        };
        let log = TelemetryLog {
            rows: (0..4)
                .map(|k| TelemetryRow { t: k as f64, ..row })
                .collect(),
            violation: None,
        };
        let m = compute_metrics(&log, &fence, 10.0);
        assert_eq!(m.top_speed, 5.0);
        assert_eq!(m.min_lambda, 0.75);
        assert_eq!(m.max_command_step, 0.0);
        assert!(!m.violated);
    }

    #[test]
    fn metrics_flag_a_crossed_face() {
        let fence =
            GeofenceBox::new(nalgebra::Vector3::zeros(), nalgebra::Vector3::repeat(10.0)).unwrap();
        let rows = [9.0, 10.5]
            .iter()
            .enumerate()
            .map(|(k, x)| TelemetryRow {
                t: k as f64,
                state: QuadState::at_rest(nalgebra::Vector3::new(*x, 0.0, 0.0)),
                u_des: QuadCommand::ZERO,
                u_cmd: QuadCommand::ZERO,
                h_i: 0.0,
                lambda: 0.0,
                v_perp: 0.0,
            })
            .collect();
        let m = compute_metrics(
            &TelemetryLog {
                rows,
                violation: None,
            },
            &fence,
            10.0,
        );
        assert!(m.min_h < 0.0 && m.min_face_distance < 0.0 && m.violated);
    }

    #[test]
    fn runs_are_bit_identical() {
        let mut s = quad("four_flight_reliability_1");
        s.duration = 4.0;
        let a = run_scripted(&s).unwrap();
        let b = run_scripted(&s).unwrap();
        assert_eq!(a, b);
    }
}
