//! Per-tick telemetry records and their CSV form.

use std::io::{Read, Write};

use nalgebra::{Quaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::vehicle::{QuadCommand, QuadState};

/// Column order of the telemetry CSV. Stable across releases.
pub const CSV_COLUMNS: [&str; 25] = [
    "t",
    "px",
    "py",
    "pz",
    "qw",
    "qx",
    "qy",
    "qz",
    "vx",
    "vy",
    "vz",
    "wx",
    "wy",
    "wz",
    "throttle_des",
    "wdx_des",
    "wdy_des",
    "wdz_des",
    "throttle_cmd",
    "wx_cmd",
    "wy_cmd",
    "wz_cmd",
    "hI",
    "lambda",
    "vperp",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRow {
    pub t: f64,
    pub state: QuadState,
    pub u_des: QuadCommand,
    pub u_cmd: QuadCommand,
    pub h_i: f64,
    pub lambda: f64,
    pub v_perp: f64,
}

impl TelemetryRow {
    pub fn to_record(&self) -> [f64; 25] {
        let s = &self.state;
        let q = &s.attitude;
        [
            self.t,
            s.position.x,
            s.position.y,
            s.position.z,
            q.w,
            q.i,
            q.j,
            q.k,
            s.velocity.x,
            s.velocity.y,
            s.velocity.z,
            s.body_rates.x,
            s.body_rates.y,
            s.body_rates.z,
            self.u_des.throttle,
            self.u_des.rates.x,
            self.u_des.rates.y,
            self.u_des.rates.z,
            self.u_cmd.throttle,
            self.u_cmd.rates.x,
            self.u_cmd.rates.y,
            self.u_cmd.rates.z,
            self.h_i,
            self.lambda,
            self.v_perp,
        ]
    }

    pub fn from_record(r: &[f64; 25]) -> Self {
        Self {
            t: r[0],
            state: QuadState {
                position: Vector3::new(r[1], r[2], r[3]),
                attitude: Quaternion::new(r[4], r[5], r[6], r[7]),
                velocity: Vector3::new(r[8], r[9], r[10]),
                body_rates: Vector3::new(r[11], r[12], r[13]),
            },
            u_des: QuadCommand::new(r[14], Vector3::new(r[15], r[16], r[17])),
            u_cmd: QuadCommand::new(r[18], Vector3::new(r[19], r[20], r[21])),
            h_i: r[22],
            lambda: r[23],
            v_perp: r[24],
        }
    }
}

/// A geofence violation observed by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub t: f64,
    pub h: f64,
}

/// Append-only log, one row per control tick.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TelemetryLog {
    pub rows: Vec<TelemetryRow>,
    pub violation: Option<Violation>,
}

impl TelemetryLog {
    pub fn push(&mut self, row: TelemetryRow) {
        debug_assert!(
            self.rows.last().is_none_or(|last| row.t > last.t),
            "telemetry time must increase"
        );
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_COLUMNS)?;
        for row in &self.rows {
            w.write_record(row.to_record().iter().map(|v| format_value(*v)))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> csv::Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let headers = r.headers()?.clone();
        if headers.iter().ne(CSV_COLUMNS) {
            return Err(csv::Error::from(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                "unexpected telemetry columns",
            )));
        }
        let mut log = TelemetryLog::default();
        for record in r.deserialize::<[f64; 25]>() {
            log.rows.push(TelemetryRow::from_record(&record?));
        }
        Ok(log)
    }
}

/// Shortest representation that parses back to the same `f64`.
fn format_value(v: f64) -> String {
    if v == f64::NEG_INFINITY {
        "-inf".to_string()
    } else {
        format!("{v:?}")
    }
}
