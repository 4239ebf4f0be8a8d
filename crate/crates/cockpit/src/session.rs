//! Live pilot sessions: a control loop on its own thread that owns the
//! simulator, fed by a latest-wins stick cell and publishing decimated
//! telemetry through a lossy watch channel.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use geoshield::harness::Simulator;
use geoshield::scenario::{builtin_ids, QuadScenario, Scenario};
use geoshield::telemetry::{TelemetryLog, TelemetryRow};
use geoshield::{ConfigError, GeofenceBox};
use thiserror::Error;
use tokio::sync::watch;

use crate::protocol::{
    GeofenceDescriptor, Phase, PilotInputMsg, ProtocolError, SessionStatus, TelemetryFrame,
};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("unknown scenario '{id}'")]
    UnknownScenario { id: String, available: Vec<String> },
    #[error("scenario '{0}' is not a quadrotor scenario")]
    NotFlyable(String),
    #[error("a session is already active on this connection")]
    AlreadyActive,
    #[error("no active session")]
    NoSession,
    #[error("cannot launch while {0:?}")]
    NotArmed(Phase),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

impl SessionError {
    /// Scenario ids worth suggesting with this error, if any.
    pub fn available(&self) -> &[String] {
        match self {
            SessionError::UnknownScenario { available, .. } => available,
            _ => &[],
        }
    }
}

/// Resolve a scenario id (or a path to a scenario file) to a flyable scenario.
pub fn load_flyable(id: &str) -> Result<QuadScenario, SessionError> {
    match Scenario::load(id) {
        Ok(Scenario::Quad(q)) => Ok(q),
        Ok(Scenario::Pendulum(_)) => Err(SessionError::NotFlyable(id.to_string())),
        Err(ConfigError::UnknownScenario { .. }) | Err(ConfigError::Io(_)) => {
            Err(SessionError::UnknownScenario {
                id: id.to_string(),
                available: flyable_ids(),
            })
        }
        Err(e) => Err(e.into()),
    }
}

pub fn flyable_ids() -> Vec<String> {
    builtin_ids()
        .into_iter()
        .filter(|id| matches!(Scenario::builtin(id), Ok(Scenario::Quad(_))))
        .map(str::to_string)
        .collect()
}

/// Why a stick message was not accepted.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum InputRejection {
    #[error("seq {seq} is not newer than {last}")]
    Stale { seq: u64, last: u64 },
    #[error(transparent)]
    Malformed(#[from] ProtocolError),
}

/// Latest-wins stick buffer between the network side and the control loop.
///
/// There is no queue: a newer message simply replaces an older one that the
/// loop has not read yet, as on a radio link.
#[derive(Debug, Default)]
pub struct InputCell {
    latest: Mutex<Option<(PilotInputMsg, Instant)>>,
    accepted: AtomicU64,
    stale: AtomicU64,
    malformed: AtomicU64,
}

impl InputCell {
    /// Accept `msg` if it validates and its `seq` is newer than anything seen.
    pub fn offer(&self, msg: PilotInputMsg) -> Result<(), InputRejection> {
        if let Err(e) = msg.validate() {
            self.malformed.fetch_add(1, Ordering::Relaxed);
            return Err(e.into());
        }
        let mut slot = self.latest.lock().expect("input cell poisoned");
        if let Some((last, _)) = slot.as_ref() {
            if msg.seq <= last.seq {
                self.stale.fetch_add(1, Ordering::Relaxed);
                return Err(InputRejection::Stale {
                    seq: msg.seq,
                    last: last.seq,
                });
            }
        }
        *slot = Some((msg, Instant::now()));
        self.accepted.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    /// Count a message that could not even be parsed.
    pub fn count_malformed(&self) {
        self.malformed.fetch_add(1, Ordering::Relaxed);
    }

    pub fn latest(&self) -> Option<(PilotInputMsg, Instant)> {
        *self.latest.lock().expect("input cell poisoned")
    }

    pub fn counts(&self) -> (u64, u64, u64) {
        (
            self.accepted.load(Ordering::Relaxed),
            self.stale.load(Ordering::Relaxed),
            self.malformed.load(Ordering::Relaxed),
        )
    }
}

/// Emits `rate` frames per second of control ticks at `control_rate`.
#[derive(Debug, Clone, Copy)]
pub struct Decimator {
    rate: u64,
    control_rate: u64,
}

impl Decimator {
    pub fn new(rate_hz: f64, control_dt: f64) -> Self {
        Self {
            rate: rate_hz.round().max(1.0) as u64,
            control_rate: (1.0 / control_dt).round().max(1.0) as u64,
        }
    }

    /// Whether loop tick `k` carries a frame.
    pub fn emits(&self, k: u64) -> bool {
        k == 0 || (k * self.rate) / self.control_rate != ((k - 1) * self.rate) / self.control_rate
    }
}

/// The session state machine without any threading. The control loop
/// thread calls [`SessionCore::tick`] once per period; tests can drive it
/// directly.
pub struct SessionCore {
    scenario_id: String,
    sim: Simulator,
    rate_limit: f64,
    fence: GeofenceBox,
    phase: Phase,
    decimator: Decimator,
    loop_ticks: u64,
    frames: u64,
    applied_seq: Option<u64>,
    log: Option<TelemetryLog>,
}

/// Result of one loop tick.
#[derive(Debug, Clone)]
pub struct TickOutcome {
    pub row: TelemetryRow,
    pub frame: Option<TelemetryFrame>,
}

impl SessionCore {
    /// Load `scenario_id` and arm at its initial state.
    pub fn start(scenario_id: &str, telemetry_hz: f64) -> Result<Self, SessionError> {
        let scenario = load_flyable(scenario_id)?;
        Self::from_scenario(scenario_id, &scenario, telemetry_hz)
    }

    pub fn from_scenario(
        id: &str,
        s: &QuadScenario,
        telemetry_hz: f64,
    ) -> Result<Self, SessionError> {
        let sim = Simulator::new(s)?;
        Ok(Self {
            scenario_id: id.to_string(),
            sim,
            rate_limit: s.quad.rate_limit,
            fence: s.geofence,
            phase: Phase::Armed,
            decimator: Decimator::new(telemetry_hz, s.control_dt),
            loop_ticks: 0,
            frames: 0,
            applied_seq: None,
            log: None,
        })
    }

    /// Keep every control tick in a telemetry log (for offline comparison).
    pub fn record(&mut self) {
        self.log.get_or_insert_with(TelemetryLog::default);
    }

    pub fn take_log(&mut self) -> Option<TelemetryLog> {
        self.log.take()
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn scenario_id(&self) -> &str {
        &self.scenario_id
    }

    pub fn fence(&self) -> &GeofenceBox {
        &self.fence
    }

    pub fn simulator(&self) -> &Simulator {
        &self.sim
    }

    pub fn launch(&mut self) -> Result<(), SessionError> {
        match self.phase {
            Phase::Armed => {
                self.phase = Phase::Flying;
                Ok(())
            }
            other => Err(SessionError::NotArmed(other)),
        }
    }

    /// One control period. `latest` is the newest accepted stick message;
    /// it counts as fresh only the first tick it is seen, so the radio-link
    /// timeout runs from the last new message.
    pub fn tick(&mut self, latest: Option<&PilotInputMsg>) -> TickOutcome {
        let fresh = latest.filter(|m| self.applied_seq.is_none_or(|s| m.seq > s));
        let row = match self.phase {
            Phase::Flying => {
                if let Some(m) = fresh {
                    self.applied_seq = Some(m.seq);
                }
                let row = self
                    .sim
                    .filter(fresh.map(|m| m.to_command(self.rate_limit)));
                let violation = self.sim.violation();
                if let Some(log) = self.log.as_mut() {
                    log.push(row);
                    log.violation = violation;
                }
                if violation.is_some() {
                    self.phase = Phase::ViolatedHalt;
                } else {
                    self.sim.advance();
                }
                row
            }
            // Held at the initial state; the filter still runs so the
            // cockpit can show h_I and lambda before launch.
            Phase::Armed | Phase::Idle | Phase::ViolatedHalt => self.sim.filter(None),
        };
        // The halting tick always carries a frame so clients see why.
        let emit = self.decimator.emits(self.loop_ticks) || self.phase == Phase::ViolatedHalt;
        let frame = emit.then(|| {
            let f = TelemetryFrame::from_row(self.frames, self.loop_ticks, self.phase, &row);
            self.frames += 1;
            f
        });
        self.loop_ticks += 1;
        TickOutcome { row, frame }
    }
}

/// How the loop thread spaces its ticks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pacing {
    /// One tick per control period of wall time.
    RealTime,
    /// Back to back, for tests and replays.
    Unpaced,
}

#[derive(Debug, Clone, Copy)]
pub struct SessionConfig {
    pub telemetry_hz: f64,
    pub pacing: Pacing,
    /// Stop after this many loop ticks.
    pub max_ticks: Option<u64>,
    /// Keep a full telemetry log, returned in the [`LoopReport`].
    pub record: bool,
    /// Hold each frame back this long before publishing it, to mimic the
    /// video latency of a real FPV link. Zero publishes at once.
    pub display_latency: Duration,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            telemetry_hz: 60.0,
            pacing: Pacing::RealTime,
            max_ticks: None,
            record: false,
            display_latency: Duration::ZERO,
        }
    }
}

/// What the control loop saw, returned when it ends.
#[derive(Debug, Clone, Default)]
pub struct LoopReport {
    pub ticks: u64,
    pub final_phase: Option<Phase>,
    /// Lateness of each tick's start against its deadline, seconds; only
    /// collected with [`Pacing::RealTime`].
    pub lateness: Vec<f64>,
    pub log: Option<TelemetryLog>,
}

impl LoopReport {
    pub fn lateness_quantile(&self, q: f64) -> Option<f64> {
        if self.lateness.is_empty() {
            return None;
        }
        let mut v = self.lateness.clone();
        v.sort_by(f64::total_cmp);
        Some(v[((v.len() - 1) as f64 * q).round() as usize])
    }
}

struct Shared {
    input: InputCell,
    stop: AtomicBool,
    launch: AtomicBool,
    phase: AtomicU8,
}

fn phase_code(p: Phase) -> u8 {
    match p {
        Phase::Idle => 0,
        Phase::Armed => 1,
        Phase::Flying => 2,
        Phase::ViolatedHalt => 3,
    }
}

fn phase_from_code(c: u8) -> Phase {
    match c {
        1 => Phase::Armed,
        2 => Phase::Flying,
        3 => Phase::ViolatedHalt,
        _ => Phase::Idle,
    }
}

/// A running session. Dropping it stops the loop.
pub struct Session {
    scenario_id: String,
    fence: GeofenceDescriptor,
    shared: Arc<Shared>,
    telemetry: watch::Receiver<Option<TelemetryFrame>>,
    thread: Option<JoinHandle<LoopReport>>,
}

impl Session {
    pub fn start(scenario_id: &str, cfg: SessionConfig) -> Result<Self, SessionError> {
        let mut core = SessionCore::start(scenario_id, cfg.telemetry_hz)?;
        if cfg.record {
            core.record();
        }
        Ok(Self::spawn(core, cfg))
    }

    /// Run an already built core on a new loop thread.
    pub fn spawn(core: SessionCore, cfg: SessionConfig) -> Self {
        let shared = Arc::new(Shared {
            input: InputCell::default(),
            stop: AtomicBool::new(false),
            launch: AtomicBool::new(false),
            phase: AtomicU8::new(phase_code(core.phase())),
        });
        let (tx, rx) = watch::channel(None);
        let scenario_id = core.scenario_id().to_string();
        let fence = core.fence().into();
        let thread = {
            let shared = Arc::clone(&shared);
            std::thread::Builder::new()
                .name(format!("control-{scenario_id}"))
                .spawn(move || control_loop(core, cfg, &shared, &tx))
                .expect("spawn control loop")
        };
        Self {
            scenario_id,
            fence,
            shared,
            telemetry: rx,
            thread: Some(thread),
        }
    }

    pub fn scenario_id(&self) -> &str {
        &self.scenario_id
    }

    pub fn fence(&self) -> GeofenceDescriptor {
        self.fence
    }

    pub fn phase(&self) -> Phase {
        phase_from_code(self.shared.phase.load(Ordering::Acquire))
    }

    pub fn handle_input(&self, msg: PilotInputMsg) -> Result<(), InputRejection> {
        self.shared.input.offer(msg)
    }

    pub fn count_malformed(&self) {
        self.shared.input.count_malformed();
    }

    pub fn launch(&self) -> Result<(), SessionError> {
        match self.phase() {
            Phase::Armed => {
                self.shared.launch.store(true, Ordering::Release);
                Ok(())
            }
            other => Err(SessionError::NotArmed(other)),
        }
    }

    /// Latest-frame subscription; slow readers only ever see the newest frame.
    pub fn subscribe(&self) -> watch::Receiver<Option<TelemetryFrame>> {
        self.telemetry.clone()
    }

    pub fn status(&self) -> SessionStatus {
        let (accepted, stale, malformed) = self.shared.input.counts();
        SessionStatus {
            phase: self.phase(),
            scenario: Some(self.scenario_id.clone()),
            accepted_inputs: accepted,
            stale_inputs: stale,
            malformed_inputs: malformed,
        }
    }

    pub fn is_finished(&self) -> bool {
        self.thread.as_ref().is_none_or(JoinHandle::is_finished)
    }

    /// Stop the loop and wait for it.
    pub fn stop(mut self) -> LoopReport {
        self.halt()
    }

    /// Wait for a loop started with `max_ticks` to finish on its own.
    pub fn join(mut self) -> LoopReport {
        self.thread
            .take()
            .map(|t| t.join().expect("control loop panicked"))
            .unwrap_or_default()
    }

    fn halt(&mut self) -> LoopReport {
        self.shared.stop.store(true, Ordering::Release);
        self.thread
            .take()
            .map(|t| t.join().expect("control loop panicked"))
            .unwrap_or_default()
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        if self.thread.is_some() {
            self.halt();
        }
    }
}

/// Sleep most of the way to `deadline`, then spin the rest; plain sleeps
/// overshoot by tens of microseconds.
fn wait_until(deadline: Instant) {
    const SPIN: Duration = Duration::from_micros(500);
    let now = Instant::now();
    if deadline > now + SPIN {
        std::thread::sleep(deadline - now - SPIN);
    }
    while Instant::now() < deadline {
        std::hint::spin_loop();
    }
}

fn control_loop(
    mut core: SessionCore,
    cfg: SessionConfig,
    shared: &Shared,
    telemetry: &watch::Sender<Option<TelemetryFrame>>,
) -> LoopReport {
    let period = Duration::from_secs_f64(core.simulator().control_dt());
    let mut report = LoopReport::default();
    let start = Instant::now();
    let mut delayed: VecDeque<(Instant, TelemetryFrame)> = VecDeque::new();
    let mut k: u64 = 0;
    loop {
        if shared.stop.load(Ordering::Acquire) || cfg.max_ticks.is_some_and(|m| k >= m) {
            break;
        }
        if cfg.pacing == Pacing::RealTime {
            let deadline = start + period * k as u32;
            wait_until(deadline);
            report
                .lateness
                .push((Instant::now() - deadline).as_secs_f64());
        }
        if shared.launch.swap(false, Ordering::AcqRel) {
            // Launch is only requested from `armed`; a stale request after a
            // phase change is dropped.
            let _ = core.launch();
        }
        let latest = shared.input.latest();
        let outcome = core.tick(latest.as_ref().map(|(m, _)| m));
        shared
            .phase
            .store(phase_code(core.phase()), Ordering::Release);
        if let Some(mut frame) = outcome.frame {
            frame.input_age_ms = latest.map(|(_, at)| at.elapsed().as_secs_f64() * 1e3);
            delayed.push_back((Instant::now() + cfg.display_latency, frame));
        }
        let now = Instant::now();
        let halting = core.phase() == Phase::ViolatedHalt;
        while let Some((due, _)) = delayed.front() {
            if *due > now && !halting {
                break;
            }
            let (_, frame) = delayed.pop_front().expect("front exists");
            telemetry.send_replace(Some(frame));
        }
        k += 1;
        if core.phase() == Phase::ViolatedHalt {
            break;
        }
    }
    report.ticks = k;
    report.final_phase = Some(core.phase());
    report.log = core.take_log();
    report
}
