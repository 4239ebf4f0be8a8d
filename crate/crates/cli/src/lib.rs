//! Command implementations behind the `geoshield` binary.
//!
//! Exit codes: 0 success, 1 a run violated the geofence, 2 the scenario or
//! its overrides were rejected (including an unsafe initial state), 3 an
//! output file could not be written.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use geoshield::bench::{bench_filter, BenchReport};
use geoshield::harness::{compute_metrics, run_scripted, Metrics};
use geoshield::qp::{compare_filters, ComparisonReport};
use geoshield::scenario::{PendulumScenario, QuadScenario, Scenario};
use geoshield::telemetry::Violation;
use geoshield::ConfigError;
use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

/// Version of the JSON documents written next to each run.
pub const METRICS_SCHEMA_VERSION: u32 = 1;

pub const EXIT_OK: u8 = 0;
pub const EXIT_VIOLATION: u8 = 1;
pub const EXIT_INVALID: u8 = 2;
pub const EXIT_IO: u8 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("writing {path}: {source}")]
    Output {
        path: PathBuf,
        source: Box<dyn std::error::Error + Send + Sync>,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => EXIT_INVALID,
            CliError::Output { .. } => EXIT_IO,
        }
    }

    fn output(path: &Path, e: impl std::error::Error + Send + Sync + 'static) -> Self {
        CliError::Output {
            path: path.to_path_buf(),
            source: Box::new(e),
        }
    }
}

/// Load a scenario by id or path and apply `key=value` overrides.
pub fn load_scenario(name: &str, overrides: &[String]) -> Result<Scenario, CliError> {
    let s = Scenario::load(name)?;
    Ok(if overrides.is_empty() {
        s
    } else {
        s.with_overrides(overrides)?
    })
}

fn expect_quad(s: Scenario, command: &str) -> Result<QuadScenario, CliError> {
    match s {
        Scenario::Quad(q) => Ok(q),
        Scenario::Pendulum(p) => Err(CliError::Usage(format!(
            "`{}` is a pendulum scenario; `{command}` needs a quadrotor scenario (try `compare`)",
            p.name
        ))),
    }
}

fn expect_pendulum(s: Scenario) -> Result<PendulumScenario, CliError> {
    match s {
        Scenario::Pendulum(p) => Ok(p),
        Scenario::Quad(q) => Err(CliError::Usage(format!(
            "`{}` is a quadrotor scenario; `compare` needs a pendulum scenario",
            q.name
        ))),
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::output(dir, e))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::output(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let out = create(path)?;
    serde_json::to_writer_pretty(out, value).map_err(|e| CliError::output(path, e))
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub scenario: String,
    pub overrides: Vec<String>,
    pub metrics: Metrics,
    pub violation: Option<Violation>,
    pub ticks: usize,
}

/// Fly one quadrotor scenario.
pub fn simulate(
    s: &QuadScenario,
    overrides: &[String],
) -> Result<(RunSummary, geoshield::telemetry::TelemetryLog), CliError> {
    let log = run_scripted(s)?;
    let metrics = compute_metrics(&log, &s.geofence, s.quad.rate_limit);
    let summary = RunSummary {
        schema_version: METRICS_SCHEMA_VERSION,
        scenario: s.name.clone(),
        overrides: overrides.to_vec(),
        metrics,
        violation: log.violation,
        ticks: log.len(),
    };
    Ok((summary, log))
}

/// `run`: write `telemetry.csv` and `metrics.json` into `out`.
pub fn cmd_run(scenario: &str, overrides: &[String], out: &Path) -> Result<u8, CliError> {
    let s = expect_quad(load_scenario(scenario, overrides)?, "run")?;
    let (summary, log) = simulate(&s, overrides)?;
    create_dir(out)?;
    let csv_path = out.join("telemetry.csv");
    log.write_csv(create(&csv_path)?)
        .map_err(|e| CliError::output(&csv_path, e))?;
    write_json(&out.join("metrics.json"), &summary)?;

    let m = &summary.metrics;
    println!("scenario        {}", summary.scenario);
    println!("ticks           {}", summary.ticks);
    println!(
        "top speed       {:.2} m/s ({:.1} km/h)",
        m.top_speed,
        m.top_speed * 3.6
    );
    println!("min h           {:.4} m^2", m.min_h);
    println!("min face dist   {:.3} m", m.min_face_distance);
    println!("min lambda      {:.4}", m.min_lambda);
    match m.brake_onset_distance {
        Some(d) => println!("brake onset     {d:.3} m from the face"),
        None => println!("brake onset     -"),
    }
    match m.stop_distance_to_face {
        Some(d) => println!("stop distance   {d:.3} m"),
        None => println!("stop distance   -"),
    }
    if let Some(v) = summary.violation {
        println!("VIOLATION at t = {:.4} s (h = {:.4})", v.t, v.h);
        return Ok(EXIT_VIOLATION);
    }
    Ok(EXIT_OK)
}

/// `bench`: time the filter on random states.
pub fn cmd_bench(
    scenario: &str,
    overrides: &[String],
    calls: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<u8, CliError> {
    #[derive(Serialize)]
    struct BenchDoc<'a> {
        schema_version: u32,
        scenario: &'a str,
        seed: u64,
        #[serde(flatten)]
        report: BenchReport,
    }

    let s = expect_quad(load_scenario(scenario, overrides)?, "bench")?;
    let report = bench_filter(&s, calls, seed)?;
    println!("calls           {}", report.timing.calls);
    println!("flow steps      {}", report.flow_steps);
    println!("median          {:.1} us", report.timing.median_ns / 1e3);
    println!("p99             {:.1} us", report.timing.p99_ns / 1e3);
    println!("mean            {:.1} us", report.timing.mean_ns / 1e3);
    match report.allocations {
        Some(0) => println!("allocations     0"),
        Some(n) => println!("allocations     {n} (expected none)"),
        None => println!("allocations     not counted"),
    }
    if let Some(dir) = out {
        create_dir(dir)?;
        write_json(
            &dir.join("bench.json"),
            &BenchDoc {
                schema_version: METRICS_SCHEMA_VERSION,
                scenario: &s.name,
                seed,
                report,
            },
        )?;
    }
    Ok(EXIT_OK)
}

/// One axis of a sweep: a dotted key and the raw values it takes.
#[derive(Debug, Clone, PartialEq)]
pub struct GridAxis {
    pub key: String,
    pub values: Vec<String>,
}

impl GridAxis {
    /// Parse `key=v1,v2,...`. Commas inside brackets belong to the value,
    /// so `initial.velocity=[1,0,0],[2,0,0]` has two values.
    pub fn parse(spec: &str) -> Result<Self, CliError> {
        let (key, raw) = spec.split_once('=').ok_or_else(|| {
            CliError::Usage(format!("grid axis `{spec}` must look like key=v1,v2"))
        })?;
        let key = key.trim();
        if key.is_empty() {
            return Err(CliError::Usage(format!("grid axis `{spec}` has no key")));
        }
        let mut values = Vec::new();
        let mut depth = 0i32;
        let mut current = String::new();
        for c in raw.chars() {
            match c {
                '[' => depth += 1,
                ']' => depth -= 1,
                ',' if depth == 0 => {
                    values.push(std::mem::take(&mut current));
                    continue;
                }
                _ => {}
            }
            current.push(c);
        }
        if depth != 0 {
            return Err(CliError::Usage(format!("unbalanced brackets in `{spec}`")));
        }
        values.push(current);
        let values: Vec<String> = values
            .into_iter()
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
            .collect();
        Ok(Self {
            key: key.to_string(),
            values,
        })
    }
}

/// Every combination of axis values, first axis slowest. No axes, or any
/// axis without values, gives no points.
pub fn grid_points(axes: &[GridAxis]) -> Vec<Vec<String>> {
    if axes.is_empty() || axes.iter().any(|a| a.values.is_empty()) {
        return Vec::new();
    }
    let mut points = vec![Vec::new()];
    for axis in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                axis.values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push(format!("{}={v}", axis.key));
                    q
                })
            })
            .collect();
    }
    points
}

/// One line of the sweep table.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub point: Vec<String>,
    pub columns: Vec<(String, String)>,
    pub violated: bool,
}

/// Flatten a serializable struct into `(name, value)` pairs. Nested objects
/// are joined with dots and missing values become empty cells.
fn flatten(prefix: &str, value: &Value, out: &mut Vec<(String, String)>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let name = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&name, v, out);
            }
        }
        Value::Null => out.push((prefix.to_string(), String::new())),
        Value::String(v) => out.push((prefix.to_string(), v.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

fn quad_rows(s: &QuadScenario, point: &[String]) -> Result<Vec<SweepRow>, CliError> {
    let (summary, _) = simulate(s, point)?;
    let mut columns = Vec::new();
    flatten(
        "",
        &serde_json::to_value(summary.metrics).expect("metrics serialize"),
        &mut columns,
    );
    Ok(vec![SweepRow {
        point: point.to_vec(),
        columns,
        violated: summary.violation.is_some() || summary.metrics.violated,
    }])
}

fn pendulum_rows(report: &ComparisonReport, point: &[String]) -> Vec<SweepRow> {
    report
        .runs
        .iter()
        .map(|r| {
            let mut columns = Vec::new();
            flatten(
                "",
                &serde_json::to_value(r).expect("runs serialize"),
                &mut columns,
            );
            SweepRow {
                point: point.to_vec(),
                columns,
                violated: r.min_h < 0.0,
            }
        })
        .collect()
}

fn sweep_point(base: &Scenario, point: &[String]) -> Result<Vec<SweepRow>, CliError> {
    match base.with_overrides(point)? {
        Scenario::Quad(q) => quad_rows(&q, point),
        Scenario::Pendulum(p) => Ok(pendulum_rows(&compare_filters(&p)?, point)),
    }
}

/// Run every grid point on up to `jobs` threads; rows come back in grid order.
pub fn sweep(base: &Scenario, axes: &[GridAxis], jobs: usize) -> Result<Vec<SweepRow>, CliError> {
    let points = grid_points(axes);
    type Slot = Option<Result<Vec<SweepRow>, CliError>>;
    let results: Mutex<Vec<Slot>> = Mutex::new((0..points.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..jobs.max(1).min(points.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(point) = points.get(i) else { break };
                let r = sweep_point(base, point);
                results.lock().expect("sweep results poisoned")[i] = Some(r);
            });
        }
    });
    let mut rows = Vec::new();
    for r in results.into_inner().expect("sweep results poisoned") {
        rows.extend(r.expect("every point ran")?);
    }
    Ok(rows)
}

/// Write the sweep table as CSV: one column per grid key, then the metrics.
pub fn write_sweep_csv<W: std::io::Write>(
    out: W,
    axes: &[GridAxis],
    rows: &[SweepRow],
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = axes.iter().map(|a| a.key.clone()).collect();
    header.push("violated".into());
    if let Some(first) = rows.first() {
        header.extend(first.columns.iter().map(|(k, _)| k.clone()));
    }
    w.write_record(&header)?;
    for row in rows {
        let mut record: Vec<String> = row
            .point
            .iter()
            .map(|p| p.split_once('=').map_or("", |(_, v)| v).to_string())
            .collect();
        record.push(row.violated.to_string());
        record.extend(row.columns.iter().map(|(_, v)| v.clone()));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// `sweep`: write `sweep.csv` into `out`; exits 1 if any run violated.
pub fn cmd_sweep(
    scenario: &str,
    overrides: &[String],
    grid: &[String],
    jobs: usize,
    out: &Path,
) -> Result<u8, CliError> {
    let base = load_scenario(scenario, overrides)?;
    let axes = grid
        .iter()
        .map(|g| GridAxis::parse(g))
        .collect::<Result<Vec<_>, _>>()?;
    let rows = sweep(&base, &axes, jobs)?;
    create_dir(out)?;
    let path = out.join("sweep.csv");
    write_sweep_csv(create(&path)?, &axes, &rows).map_err(|e| CliError::output(&path, e))?;
    write_sweep_csv(std::io::stdout().lock(), &axes, &rows)
        .map_err(|e| CliError::output(Path::new("<stdout>"), e))?;
    let violated = rows.iter().filter(|r| r.violated).count();
    if violated > 0 {
        eprintln!("{violated} of {} runs violated the geofence", rows.len());
        return Ok(EXIT_VIOLATION);
    }
    Ok(EXIT_OK)
}

/// `compare`: both pendulum filters at every gain setting.
pub fn cmd_compare(
    scenario: &str,
    overrides: &[String],
    out: Option<&Path>,
) -> Result<u8, CliError> {
    #[derive(Serialize)]
    struct CompareDoc<'a> {
        schema_version: u32,
        scenario: &'a str,
        #[serde(flatten)]
        report: &'a ComparisonReport,
    }

    let p = expect_pendulum(load_scenario(scenario, overrides)?)?;
    let report = compare_filters(&p)?;
    println!(
        "{:<11} {:<8} {:>11} {:>11} {:>10} {:>10} {:>7}",
        "filter", "setting", "median_us", "p99_us", "max_theta", "min_h", "flips"
    );
    for r in &report.runs {
        println!(
            "{:<11} {:<8} {:>11.2} {:>11.2} {:>10.4} {:>10.4} {:>7}",
            r.filter,
            r.setting,
            r.timing.median_ns / 1e3,
            r.timing.p99_ns / 1e3,
            r.max_abs_theta,
            r.min_h,
            r.boundary_sign_flips
        );
    }
    if let Some(dir) = out {
        create_dir(dir)?;
        write_json(
            &dir.join("compare.json"),
            &CompareDoc {
                schema_version: METRICS_SCHEMA_VERSION,
                scenario: &p.name,
                report: &report,
            },
        )?;
        for r in &report.runs {
            let path = dir.join(format!("{}_{}.csv", r.filter, r.setting));
            r.log
                .write_csv(create(&path)?)
                .map_err(|e| CliError::output(&path, e))?;
        }
    }
    if report.runs.iter().any(|r| r.min_h < 0.0) {
        return Ok(EXIT_VIOLATION);
    }
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_axes_respect_brackets() {
        let a = GridAxis::parse("initial.velocity=[1,0,0], [2,0,0]").unwrap();
        assert_eq!(a.key, "initial.velocity");
        assert_eq!(a.values, vec!["[1,0,0]", "[2,0,0]"]);
        assert_eq!(
            GridAxis::parse("filter.beta=").unwrap().values,
            Vec::<String>::new()
        );
        assert!(GridAxis::parse("filter.beta").is_err());
        assert!(GridAxis::parse("x=[1,2").is_err());
    }

    #[test]
    fn grid_is_a_cartesian_product() {
        let axes = [
            GridAxis::parse("a=1,2").unwrap(),
            GridAxis::parse("b=x,y,z").unwrap(),
        ];
        let pts = grid_points(&axes);
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[0], vec!["a=1", "b=x"]);
        assert_eq!(pts[5], vec!["a=2", "b=z"]);
        assert!(grid_points(&[]).is_empty());
        assert!(grid_points(&[GridAxis::parse("a=").unwrap()]).is_empty());
    }
}
