//! Sources of desired commands, and the radio-link semantics applied to them.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scenario::Segment;
use crate::shield::velocity_tracking_command;
use crate::vehicle::{QuadCommand, QuadParams, QuadState};

/// Anything that may produce a pilot command at a control tick.
///
/// `None` means no message arrived this tick.
pub trait PilotSource {
    fn poll(&mut self, t: f64, x: &QuadState) -> Option<QuadCommand>;
}

/// A source that never sends anything.
#[derive(Debug, Default, Clone, Copy)]
pub struct SilentPilot;

impl PilotSource for SilentPilot {
    fn poll(&mut self, _t: f64, _x: &QuadState) -> Option<QuadCommand> {
        None
    }
}

impl<F> PilotSource for F
where
    F: FnMut(f64, &QuadState) -> Option<QuadCommand>,
{
    fn poll(&mut self, t: f64, x: &QuadState) -> Option<QuadCommand> {
        self(t, x)
    }
}

/// Latest-wins command hold with a loss-of-signal timeout.
///
/// The last command is held until `timeout` seconds pass without a new one;
/// after that (and before the first message) the desired input is zero
/// throttle and zero rates.
#[derive(Debug, Clone, Copy)]
pub struct RadioLink {
    timeout: f64,
    last: Option<(f64, QuadCommand)>,
}

impl RadioLink {
    pub const DEFAULT_TIMEOUT: f64 = 0.1;

    pub fn new(timeout: f64) -> Self {
        Self {
            timeout,
            last: None,
        }
    }

    pub fn desired(&mut self, t: f64, msg: Option<QuadCommand>) -> QuadCommand {
        if let Some(cmd) = msg {
            self.last = Some((t, cmd));
            return cmd;
        }
        match self.last {
            // Small slack so a 100 ms timeout at 2.5 ms ticks is not lost to rounding.
            Some((t0, cmd)) if t - t0 < self.timeout - 1e-9 => cmd,
            _ => QuadCommand::ZERO,
        }
    }
}

impl Default for RadioLink {
    fn default() -> Self {
        Self::new(Self::DEFAULT_TIMEOUT)
    }
}

/// Piecewise scripted pilot. Silent after the last segment.
#[derive(Debug, Clone)]
pub struct ScriptedPilot {
    segments: Vec<Segment>,
    starts: Vec<f64>,
    /// Target of the directly preceding velocity segment, if any.
    previous_targets: Vec<Option<Vector3<f64>>>,
    quad: QuadParams,
    fuzz: Vec<Option<FuzzState>>,
}

#[derive(Debug, Clone)]
struct FuzzState {
    rng: ChaCha8Rng,
    slot: Option<u64>,
    current: QuadCommand,
}

impl ScriptedPilot {
    pub fn new(segments: Vec<Segment>, quad: QuadParams) -> Self {
        let mut starts = Vec::with_capacity(segments.len());
        let mut t = 0.0;
        for s in &segments {
            starts.push(t);
            t += s.duration();
        }
        let fuzz = segments
            .iter()
            .map(|s| match s {
                Segment::Fuzz { seed, .. } => Some(FuzzState {
                    rng: ChaCha8Rng::seed_from_u64(*seed),
                    slot: None,
                    current: QuadCommand::ZERO,
                }),
                _ => None,
            })
            .collect();
        let previous_targets = std::iter::once(None)
            .chain(segments.windows(2).map(|w| match w[0] {
                Segment::Velocity { velocity, .. } => Some(Vector3::from(velocity)),
                _ => None,
            }))
            .collect();
        Self {
            segments,
            starts,
            previous_targets,
            quad,
            fuzz,
        }
    }

    /// Index of the segment active at `t`.
    pub fn segment_at(&self, t: f64) -> Option<usize> {
        self.segments
            .iter()
            .zip(&self.starts)
            .position(|(s, &start)| t >= start && t < start + s.duration())
    }

    pub fn total_duration(&self) -> f64 {
        self.segments.iter().map(Segment::duration).sum()
    }
}

impl PilotSource for ScriptedPilot {
    fn poll(&mut self, t: f64, x: &QuadState) -> Option<QuadCommand> {
        let i = self.segment_at(t)?;
        let rate_limit = self.quad.rate_limit;
        match &self.segments[i] {
            Segment::Command {
                throttle, rates, ..
            } => Some(QuadCommand::new(*throttle, Vector3::from(*rates)).clamped(rate_limit)),
            Segment::Velocity {
                velocity,
                gain,
                attitude_gain,
                ramp,
                ..
            } => {
                let target = Vector3::from(*velocity);
                let setpoint = match self.previous_targets[i] {
                    Some(prev) if *ramp > 0.0 => {
                        let s = ((t - self.starts[i]) / ramp).clamp(0.0, 1.0);
                        prev + (target - prev) * s
                    }
                    _ => target,
                };
                Some(velocity_tracking_command(
                    x,
                    &setpoint,
                    *gain,
                    *attitude_gain,
                    &self.quad,
                ))
            }
            Segment::Silent { .. } => None,
            Segment::Fuzz { hold, .. } => {
                let slot = ((t - self.starts[i]) / hold).floor() as u64;
                let state = self.fuzz[i].as_mut().expect("fuzz state for fuzz segment");
                if state.slot != Some(slot) {
                    state.slot = Some(slot);
                    state.current = random_stick(&mut state.rng, rate_limit);
                }
                Some(state.current)
            }
        }
    }
}

/// Mostly full-deflection sticks, occasionally centered.
fn random_stick(rng: &mut ChaCha8Rng, rate_limit: f64) -> QuadCommand {
    let mut axis = || match rng.random_range(0..5) {
        0 => 0.0,
        1 | 2 => rate_limit,
        _ => -rate_limit,
    };
    let rates = Vector3::new(axis(), axis(), axis());
    let throttle = match rng.random_range(0..4) {
        0 => 0.0,
        1 => 1.0,
        _ => rng.random_range(0.0..=1.0),
    };
    QuadCommand::new(throttle, rates)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn link_holds_then_times_out() {
        let mut link = RadioLink::default();
        let cmd = QuadCommand::new(0.5, Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(link.desired(0.0, None), QuadCommand::ZERO);
        assert_eq!(link.desired(0.0025, Some(cmd)), cmd);
        assert_eq!(link.desired(0.05, None), cmd);
        assert_eq!(link.desired(0.0025 + 0.0975, None), cmd);
        assert_eq!(link.desired(0.0025 + 0.1, None), QuadCommand::ZERO);
    }

    #[test]
    fn scripted_segments_in_order() {
        let segments = vec![
            Segment::Command {
                duration: 1.0,
                throttle: 0.4,
                rates: [0.0, 1.0, 0.0],
            },
            Segment::Silent { duration: 0.5 },
            Segment::Command {
                duration: 1.0,
                throttle: 2.0,
                rates: [50.0, 0.0, 0.0],
            },
        ];
        let mut p = ScriptedPilot::new(segments, QuadParams::default());
        let x = QuadState::default();
        assert_eq!(p.poll(0.5, &x).unwrap().throttle, 0.4);
        assert!(p.poll(1.2, &x).is_none());
        let clamped = p.poll(1.6, &x).unwrap();
        assert_eq!(clamped.throttle, 1.0);
        assert_eq!(clamped.rates.x, 10.0);
        assert!(p.poll(2.5, &x).is_none());
        assert_eq!(p.total_duration(), 2.5);
    }

    #[test]
    fn fuzz_is_deterministic_and_bounded() {
        let seg = vec![Segment::Fuzz {
            duration: 5.0,
            hold: 0.2,
            seed: 7,
        }];
        let x = QuadState::default();
        let mut a = ScriptedPilot::new(seg.clone(), QuadParams::default());
        let mut b = ScriptedPilot::new(seg, QuadParams::default());
        for k in 0..2000 {
            let t = k as f64 * 0.0025;
            let ca = a.poll(t, &x).unwrap();
            assert_eq!(Some(ca), b.poll(t, &x));
            assert!(ca.within_bounds(10.0));
        }
    }
}
