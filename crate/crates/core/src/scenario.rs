//! Scenario files: TOML documents describing one closed-loop experiment.
//!
//! Every scenario carries `schema_version` and `plant`. Quadrotor scenarios
//! describe the vehicle, geofence, filter tuning and a scripted pilot;
//! pendulum scenarios describe the filter comparison. Fields left out take
//! the documented defaults. Dotted-key overrides (`filter.beta=0.1`,
//! `settings.1.alpha=40`) are applied to the fully-populated document, so
//! unknown keys and type mismatches are rejected.

use std::path::Path;

use nalgebra::{Quaternion, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use toml::Value;

use crate::error::ConfigError;
use crate::flow::FlowConfig;
use crate::geofence::GeofenceBox;
use crate::pendulum::PendulumFilterParams;
use crate::qp::QpBaselineParams;
use crate::shield::FilterParams;
use crate::vehicle::{FlowState, PendulumState, QuadParams, QuadState};

pub const SCHEMA_VERSION: i64 = 1;

/// Scenarios that ship with the crate, by id.
pub const BUILTIN_SCENARIOS: &[(&str, &str)] = &[
    (
        "horizontal_sprint",
        include_str!("../scenarios/horizontal_sprint.toml"),
    ),
    (
        "free_fall_70m",
        include_str!("../scenarios/free_fall_70m.toml"),
    ),
    (
        "pendulum_compare",
        include_str!("../scenarios/pendulum_compare.toml"),
    ),
    (
        "four_flight_reliability_1",
        include_str!("../scenarios/four_flight_reliability_1.toml"),
    ),
    (
        "four_flight_reliability_2",
        include_str!("../scenarios/four_flight_reliability_2.toml"),
    ),
    (
        "four_flight_reliability_3",
        include_str!("../scenarios/four_flight_reliability_3.toml"),
    ),
    (
        "four_flight_reliability_4",
        include_str!("../scenarios/four_flight_reliability_4.toml"),
    ),
    (
        "cockpit_arena",
        include_str!("../scenarios/cockpit_arena.toml"),
    ),
];

/// Ids of the four-flight reliability suite.
pub const RELIABILITY_SUITE: [&str; 4] = [
    "four_flight_reliability_1",
    "four_flight_reliability_2",
    "four_flight_reliability_3",
    "four_flight_reliability_4",
];

fn default_control_dt() -> f64 {
    0.0025
}

fn default_physics_dt() -> f64 {
    0.0005
}

fn default_unit_quaternion() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantKind {
    Quadrotor,
    Pendulum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialQuadState {
    pub position: [f64; 3],
    #[serde(default)]
    pub velocity: [f64; 3],
    /// `[w, x, y, z]`; normalized on load.
    #[serde(default = "default_unit_quaternion")]
    pub attitude: [f64; 4],
    #[serde(default)]
    pub body_rates: [f64; 3],
}

impl InitialQuadState {
    pub fn to_state(&self) -> QuadState {
        let [w, x, y, z] = self.attitude;
        let q = Quaternion::new(w, x, y, z);
        QuadState {
            position: Vector3::from(self.position),
            attitude: q / q.norm(),
            velocity: Vector3::from(self.velocity),
            body_rates: Vector3::from(self.body_rates),
        }
    }
}

fn default_pilot_gain() -> f64 {
    3.0
}

fn default_pilot_attitude_gain() -> f64 {
    12.0
}

/// One piece of a scripted pilot profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Segment {
    /// Raw stick command.
    Command {
        duration: f64,
        throttle: f64,
        rates: [f64; 3],
    },
    /// Fly toward a world-frame velocity the way a pilot chasing a target
    /// speed would: tilt toward it and open the throttle, saturating both.
    Velocity {
        duration: f64,
        velocity: [f64; 3],
        #[serde(default = "default_pilot_gain")]
        gain: f64,
        #[serde(default = "default_pilot_attitude_gain")]
        attitude_gain: f64,
        /// Seconds to slide the target over from the previous velocity
        /// segment's target. Zero switches at once.
        #[serde(default)]
        ramp: f64,
    },
    /// No messages at all (radio loss).
    Silent { duration: f64 },
    /// Random full-deflection sticks, re-drawn every `hold` seconds.
    Fuzz { duration: f64, hold: f64, seed: u64 },
}

impl Segment {
    pub fn duration(&self) -> f64 {
        match self {
            Segment::Command { duration, .. }
            | Segment::Velocity { duration, .. }
            | Segment::Silent { duration }
            | Segment::Fuzz { duration, .. } => *duration,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PilotConfig {
    /// Piecewise profile; after the last segment the pilot goes silent.
    Scripted { segments: Vec<Segment> },
    /// Commands come from outside (the cockpit).
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadScenario {
    pub schema_version: i64,
    pub name: String,
    pub plant: PlantKind,
    #[serde(default)]
    pub description: String,
    /// Seconds of simulated flight.
    pub duration: f64,
    #[serde(default = "default_control_dt")]
    pub control_dt: f64,
    #[serde(default = "default_physics_dt")]
    pub physics_dt: f64,
    /// Permit an initial state outside the invariant set.
    #[serde(default)]
    pub allow_unsafe_start: bool,
    #[serde(default)]
    pub quad: QuadParams,
    pub initial: InitialQuadState,
    pub geofence: GeofenceBox,
    #[serde(default)]
    pub filter: FilterParams,
    #[serde(default = "FlowConfig::quad_default")]
    pub flow: FlowConfig,
    pub pilot: PilotConfig,
}

/// One gain pairing in the pendulum comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainSetting {
    pub name: String,
    /// Regulation-function decay gain.
    pub beta: f64,
    /// QP class-K gain.
    pub alpha: f64,
}

fn default_near_boundary() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PendulumScenario {
    pub schema_version: i64,
    pub name: String,
    pub plant: PlantKind,
    #[serde(default)]
    pub description: String,
    pub duration: f64,
    #[serde(default = "default_control_dt")]
    pub control_dt: f64,
    #[serde(default = "default_physics_dt")]
    pub physics_dt: f64,
    #[serde(default)]
    pub initial: [f64; 2],
    /// Constant desired angular acceleration, rad/s².
    pub u_des: f64,
    #[serde(default)]
    pub filter: PendulumFilterParams,
    #[serde(default)]
    pub qp: QpBaselineParams,
    pub settings: Vec<GainSetting>,
    /// `h_I(x)` below this counts as near the boundary.
    #[serde(default = "default_near_boundary")]
    pub near_boundary: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scenario {
    Quad(QuadScenario),
    Pendulum(PendulumScenario),
}

fn check_timing(duration: f64, control_dt: f64, physics_dt: f64) -> Result<usize, ConfigError> {
    if !(duration >= 0.0 && duration.is_finite()) {
        return Err(ConfigError::invalid(
            "scenario",
            "duration must be non-negative",
        ));
    }
    if !(control_dt > 0.0 && physics_dt > 0.0 && physics_dt <= control_dt) {
        return Err(ConfigError::invalid(
            "scenario",
            "need 0 < physics_dt <= control_dt",
        ));
    }
    let ratio = control_dt / physics_dt;
    let substeps = ratio.round();
    if (ratio - substeps).abs() > 1e-9 {
        return Err(ConfigError::invalid(
            "scenario",
            "control_dt must be an integer multiple of physics_dt",
        ));
    }
    Ok(substeps as usize)
}

fn check_header(version: i64, plant: PlantKind, expected: PlantKind) -> Result<(), ConfigError> {
    if version != SCHEMA_VERSION {
        return Err(ConfigError::SchemaVersion {
            found: version,
            expected: SCHEMA_VERSION,
        });
    }
    if plant != expected {
        return Err(ConfigError::invalid(
            "scenario",
            "plant does not match scenario layout",
        ));
    }
    Ok(())
}

impl QuadScenario {
    pub fn validate(&self) -> Result<(), ConfigError> {
        check_header(self.schema_version, self.plant, PlantKind::Quadrotor)?;
        check_timing(self.duration, self.control_dt, self.physics_dt)?;
        self.quad.validate()?;
        self.geofence.validate()?;
        self.filter.validate()?;
        self.geofence.inflated(self.filter.inflation)?;
        if !FlowState::is_finite(&self.initial.to_state()) {
            return Err(ConfigError::invalid(
                "initial",
                "initial state must be finite",
            ));
        }
        if let PilotConfig::Scripted { segments } = &self.pilot {
            for s in segments {
                if !(s.duration() >= 0.0) {
                    return Err(ConfigError::invalid(
                        "pilot",
                        "segment durations must be non-negative",
                    ));
                }
                match s {
                    Segment::Velocity {
                        gain,
                        attitude_gain,
                        ..
                    } if !(*gain > 0.0 && *attitude_gain > 0.0) => {
                        return Err(ConfigError::invalid(
                            "pilot",
                            "velocity segment gains must be positive",
                        ));
                    }
                    Segment::Fuzz { hold, .. } if !(*hold > 0.0) => {
                        return Err(ConfigError::invalid("pilot", "fuzz hold must be positive"));
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    pub fn substeps(&self) -> usize {
        check_timing(self.duration, self.control_dt, self.physics_dt).unwrap_or(1)
    }

    pub fn n_ticks(&self) -> usize {
        (self.duration / self.control_dt).round() as usize
    }
}

impl PendulumScenario {
    pub fn validate(&self) -> Result<(), ConfigError> {
        check_header(self.schema_version, self.plant, PlantKind::Pendulum)?;
        check_timing(self.duration, self.control_dt, self.physics_dt)?;
        self.filter.validate()?;
        self.qp.validate()?;
        for s in &self.settings {
            if !(s.beta > 0.0 && s.alpha > 0.0) {
                return Err(ConfigError::invalid(
                    "settings",
                    "beta and alpha must be positive",
                ));
            }
        }
        Ok(())
    }

    pub fn substeps(&self) -> usize {
        check_timing(self.duration, self.control_dt, self.physics_dt).unwrap_or(1)
    }

    pub fn n_ticks(&self) -> usize {
        (self.duration / self.control_dt).round() as usize
    }

    pub fn initial_state(&self) -> PendulumState {
        PendulumState::new(self.initial[0], self.initial[1])
    }
}

impl Scenario {
    /// Parse and validate a scenario document.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let value: Value = toml::from_str(text)?;
        Self::from_value(value)
    }

    fn from_value(value: Value) -> Result<Self, ConfigError> {
        let plant = value
            .get("plant")
            .and_then(Value::as_str)
            .ok_or_else(|| ConfigError::invalid("scenario", "missing `plant`"))?;
        let scenario = match plant {
            "quadrotor" => Scenario::Quad(deserialize(value)?),
            "pendulum" => Scenario::Pendulum(deserialize(value)?),
            other => {
                return Err(ConfigError::invalid(
                    "scenario",
                    format!("unknown plant `{other}`"),
                ))
            }
        };
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        match self {
            Scenario::Quad(s) => s.validate(),
            Scenario::Pendulum(s) => s.validate(),
        }
    }

    pub fn name(&self) -> &str {
        match self {
            Scenario::Quad(s) => &s.name,
            Scenario::Pendulum(s) => &s.name,
        }
    }

    pub fn builtin(name: &str) -> Result<Self, ConfigError> {
        let text = BUILTIN_SCENARIOS
            .iter()
            .find(|(id, _)| *id == name)
            .map(|(_, text)| *text)
            .ok_or_else(|| ConfigError::UnknownScenario {
                name: name.to_string(),
                available: builtin_ids().join(", "),
            })?;
        Self::from_toml(text)
    }

    /// A path to a TOML file, or the id of a built-in scenario.
    pub fn load(name_or_path: &str) -> Result<Self, ConfigError> {
        let path = Path::new(name_or_path);
        if path.exists() {
            Self::from_toml(&std::fs::read_to_string(path)?)
        } else {
            Self::builtin(name_or_path)
        }
    }

    pub fn to_value(&self) -> Value {
        Value::try_from(self).expect("scenario serializes to TOML")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes to TOML")
    }

    /// Apply `key=value` overrides and re-validate.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, ConfigError> {
        let mut doc = self.to_value();
        for o in overrides {
            let (key, raw) = split_override(o.as_ref())?;
            set_dotted(&mut doc, key, raw)?;
        }
        Self::from_value(doc)
    }
}

pub fn builtin_ids() -> Vec<&'static str> {
    BUILTIN_SCENARIOS.iter().map(|(id, _)| *id).collect()
}

fn deserialize<T: DeserializeOwned>(value: Value) -> Result<T, ConfigError> {
    value.try_into().map_err(ConfigError::from)
}

pub fn split_override(s: &str) -> Result<(&str, &str), ConfigError> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .filter(|(k, _)| !k.is_empty())
        .ok_or_else(|| ConfigError::invalid("override", format!("expected key=value, got `{s}`")))
}

fn parse_override_value(raw: &str) -> Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "string",
        Value::Integer(_) => "integer",
        Value::Float(_) => "float",
        Value::Boolean(_) => "boolean",
        Value::Datetime(_) => "datetime",
        Value::Array(_) => "array",
        Value::Table(_) => "table",
    }
}

/// Set `key` (dot-separated, numeric parts index arrays) to `raw` parsed as a
/// TOML value. The key must already exist and the value must have the same
/// type as the current one; integers are accepted where floats are expected.
pub fn set_dotted(doc: &mut Value, key: &str, raw: &str) -> Result<(), ConfigError> {
    let mut slot = &mut *doc;
    for part in key.split('.') {
        slot = match slot {
            Value::Table(t) => t.get_mut(part),
            Value::Array(a) => part.parse::<usize>().ok().and_then(move |i| a.get_mut(i)),
            _ => None,
        }
        .ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
    }
    let new = parse_override_value(raw);
    let new = match (&*slot, new) {
        (Value::Float(_), Value::Integer(i)) => Value::Float(i as f64),
        (Value::String(_), Value::String(s)) => Value::String(s),
        (old, new) if std::mem::discriminant(old) == std::mem::discriminant(&new) => new,
        (old, _) => {
            return Err(ConfigError::OverrideType {
                key: key.to_string(),
                expected: type_name(old),
                value: raw.to_string(),
            })
        }
    };
    *slot = new;
    Ok(())
}
