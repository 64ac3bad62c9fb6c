//! Text formats: generated calls, trajectories, response times, EMS data
//! templates and the run configuration.
//!
//! Every writer has a matching reader. Numbers are written with Rust's
//! shortest round-trip formatting, so write, read, write is byte-identical.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::domain::{CallSpec, Priority, Scenario, ServiceClass, TripType};
use crate::geo::GeoPoint;
use crate::sim::{snapshot, SimOutput};
use crate::streets::GraphError;
use crate::trace::{discretize_log, DiscretizedRide};

pub mod config;
pub mod run;
pub mod templates;

pub use config::{parse_config, parse_config_str, ConfigError, RunConfig};
pub use run::{ForecastArtifacts, RunFolder};
pub use templates::{
    parse_ambulances, parse_historical, parse_sites, write_ambulances, write_historical, write_sites, AmbulanceEntry,
    Gender, HistoricalRecord,
};

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("{file} line {line}: {msg}")]
    Parse { file: &'static str, line: usize, msg: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Invalid(String),
}

pub(crate) fn parse_err(file: &'static str, line: usize, msg: impl Into<String>) -> IoError {
    IoError::Parse { file, line, msg: msg.into() }
}

/// Non-blank, non-comment lines with their 1-based numbers.
pub(crate) fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.trim();
        (!l.is_empty() && !l.starts_with('#')).then_some((i + 1, l))
    })
}

pub(crate) fn field<T: std::str::FromStr>(
    tok: Option<&str>,
    file: &'static str,
    line: usize,
    what: &str,
) -> Result<T, IoError> {
    let tok = tok.ok_or_else(|| parse_err(file, line, format!("missing {what}")))?;
    tok.parse().map_err(|_| parse_err(file, line, format!("bad {what} '{tok}'")))
}

pub(crate) fn point(lat: f64, lon: f64, file: &'static str, line: usize) -> Result<GeoPoint, IoError> {
    GeoPoint::new(lat, lon).map_err(|e| parse_err(file, line, e.to_string()))
}

pub const CALLS_FILE: &str = "calls.txt";

/// `scenario_id call_id epoch_seconds lat lon type_id priority service_class`,
/// sorted by scenario, then time, then call id.
pub fn format_calls(scenarios: &[Scenario]) -> String {
    let mut rows: Vec<(u64, &CallSpec)> = scenarios.iter().flat_map(|s| s.calls.iter().map(move |c| (s.id, c))).collect();
    rows.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.t_c.total_cmp(&b.1.t_c)).then(a.1.id.cmp(&b.1.id)));
    let mut s = String::new();
    for (sid, c) in rows {
        let _ = writeln!(
            s,
            "{sid} {} {} {} {} {} {} {}",
            c.id, c.t_c, c.loc.lat, c.loc.lon, c.call_type, c.priority, c.service_class
        );
    }
    s
}

/// Scenarios in order of first appearance; a scenario without calls has no
/// lines and is therefore absent.
pub fn parse_calls(text: &str) -> Result<Vec<Scenario>, IoError> {
    const F: &str = "calls";
    let mut out: Vec<Scenario> = Vec::new();
    for (line, l) in content_lines(text) {
        let mut t = l.split_whitespace();
        let sid: u64 = field(t.next(), F, line, "scenario id")?;
        let id: u64 = field(t.next(), F, line, "call id")?;
        let t_c: f64 = field(t.next(), F, line, "time")?;
        let lat: f64 = field(t.next(), F, line, "latitude")?;
        let lon: f64 = field(t.next(), F, line, "longitude")?;
        let call_type: usize = field(t.next(), F, line, "type")?;
        let priority: Priority = field(t.next(), F, line, "priority")?;
        let service_class: ServiceClass = field(t.next(), F, line, "service class")?;
        if t.next().is_some() {
            return Err(parse_err(F, line, "trailing fields"));
        }
        if !t_c.is_finite() {
            return Err(parse_err(F, line, "time must be finite"));
        }
        let spec = CallSpec { id, t_c, loc: point(lat, lon, F, line)?, call_type, priority, service_class };
        match out.iter_mut().find(|s| s.id == sid) {
            Some(s) => s.calls.push(spec),
            None => out.push(Scenario { id: sid, calls: vec![spec] }),
        }
    }
    Ok(out)
}

pub fn write_calls(scenarios: &[Scenario], folder: &Path) -> Result<PathBuf, IoError> {
    fs::create_dir_all(folder)?;
    let path = folder.join(CALLS_FILE);
    fs::write(&path, format_calls(scenarios))?;
    Ok(path)
}

pub fn read_calls(path: &Path) -> Result<Vec<Scenario>, IoError> {
    parse_calls(&fs::read_to_string(path)?)
}

/// One open call on a trajectory line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActiveCall {
    pub call_id: u64,
    pub loc: GeoPoint,
    pub priority: Priority,
}

/// One ambulance on a trajectory line; `destination` is a call, hospital,
/// or station index depending on the ride type, -1 when none.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmbulanceEntryState {
    pub id: usize,
    pub ride_type: u8,
    pub loc: GeoPoint,
    pub destination: i64,
}

/// `t n_calls [id lat lon priority]... n_amb [id type lat lon dest]...`
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLine {
    pub t: f64,
    pub calls: Vec<ActiveCall>,
    pub ambulances: Vec<AmbulanceEntryState>,
}

pub fn trajectory_file_name(scenario: u64, policy: &str) -> String {
    format!("output_scenarios_{scenario}_{policy}")
}

pub fn response_file_name(policy: &str) -> String {
    format!("response_times_{policy}")
}

/// Instants at which something changes: window bounds, call arrivals and
/// every trip node inside the window.
pub fn event_times(out: &SimOutput) -> Vec<f64> {
    let mut ts = vec![out.start, out.end];
    ts.extend(out.calls.iter().map(|c| c.t_c));
    for a in &out.ambulances {
        ts.extend(a.log.times.iter().copied());
    }
    ts.retain(|t| *t >= out.start && *t <= out.end);
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    ts
}

pub fn trajectory_lines(out: &SimOutput) -> Result<Vec<TrajectoryLine>, IoError> {
    event_times(out)
        .into_iter()
        .map(|t| {
            let snap = snapshot(out, t).map_err(|e| IoError::Invalid(e.to_string()))?;
            Ok(TrajectoryLine {
                t,
                calls: snap.calls.iter().map(|c| ActiveCall { call_id: c.call_id, loc: c.loc, priority: c.priority }).collect(),
                ambulances: snap
                    .ambulances
                    .iter()
                    .map(|a| AmbulanceEntryState {
                        id: a.id,
                        ride_type: a.ride_type.code(),
                        loc: a.position,
                        destination: a.destination.index(),
                    })
                    .collect(),
            })
        })
        .collect()
}

pub fn format_trajectories(lines: &[TrajectoryLine]) -> String {
    let mut s = String::new();
    for l in lines {
        let _ = write!(s, "{} {}", l.t, l.calls.len());
        for c in &l.calls {
            let _ = write!(s, " {} {} {} {}", c.call_id, c.loc.lat, c.loc.lon, c.priority);
        }
        let _ = write!(s, " {}", l.ambulances.len());
        for a in &l.ambulances {
            let _ = write!(s, " {} {} {} {} {}", a.id, a.ride_type, a.loc.lat, a.loc.lon, a.destination);
        }
        s.push('\n');
    }
    s
}

pub fn parse_trajectories(text: &str) -> Result<Vec<TrajectoryLine>, IoError> {
    const F: &str = "trajectory";
    let mut out = Vec::new();
    for (line, l) in content_lines(text) {
        let mut t = l.split_whitespace();
        let time: f64 = field(t.next(), F, line, "time")?;
        let n_calls: usize = field(t.next(), F, line, "call count")?;
        let mut calls = Vec::with_capacity(n_calls.min(1024));
        for _ in 0..n_calls {
            let call_id = field(t.next(), F, line, "call id")?;
            let lat = field(t.next(), F, line, "latitude")?;
            let lon = field(t.next(), F, line, "longitude")?;
            let priority = field(t.next(), F, line, "priority")?;
            calls.push(ActiveCall { call_id, loc: point(lat, lon, F, line)?, priority });
        }
        let n_amb: usize = field(t.next(), F, line, "ambulance count")?;
        let mut ambulances = Vec::with_capacity(n_amb.min(1024));
        for _ in 0..n_amb {
            let id = field(t.next(), F, line, "ambulance id")?;
            let ride_type: u8 = field(t.next(), F, line, "ride type")?;
            if !(1..=8).contains(&ride_type) {
                return Err(parse_err(F, line, format!("ride type {ride_type} out of range")));
            }
            let lat = field(t.next(), F, line, "latitude")?;
            let lon = field(t.next(), F, line, "longitude")?;
            let destination = field(t.next(), F, line, "destination")?;
            ambulances.push(AmbulanceEntryState { id, ride_type, loc: point(lat, lon, F, line)?, destination });
        }
        if t.next().is_some() {
            return Err(parse_err(F, line, "trailing fields"));
        }
        out.push(TrajectoryLine { t: time, calls, ambulances });
    }
    Ok(out)
}

/// Writes `<folder>/<policy>/output_scenarios_<id>_<policy>`.
pub fn write_trajectories(out: &SimOutput, folder: &Path) -> Result<PathBuf, IoError> {
    let dir = folder.join(out.label());
    fs::create_dir_all(&dir)?;
    let path = dir.join(trajectory_file_name(out.scenario, out.label()));
    fs::write(&path, format_trajectories(&trajectory_lines(out)?))?;
    Ok(path)
}

/// `call_id t_c response allocation_cost ambulance`; unserved calls carry
/// -1 in the last three fields.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResponseLine {
    pub call_id: u64,
    pub t_c: f64,
    pub response: f64,
    pub allocation_cost: f64,
    pub ambulance: i64,
}

pub fn response_lines(out: &SimOutput) -> Vec<ResponseLine> {
    out.records
        .iter()
        .map(|r| match r.serving_ambulance {
            Some(a) => ResponseLine {
                call_id: r.call_id,
                t_c: r.t_c,
                response: r.waiting_on_scene,
                allocation_cost: r.allocation_cost,
                ambulance: a as i64,
            },
            None => ResponseLine { call_id: r.call_id, t_c: r.t_c, response: -1.0, allocation_cost: -1.0, ambulance: -1 },
        })
        .collect()
}

pub fn format_response_times(lines: &[ResponseLine]) -> String {
    let mut s = String::new();
    for l in lines {
        let _ = writeln!(s, "{} {} {} {} {}", l.call_id, l.t_c, l.response, l.allocation_cost, l.ambulance);
    }
    s
}

pub fn parse_response_times(text: &str) -> Result<Vec<ResponseLine>, IoError> {
    const F: &str = "response times";
    content_lines(text)
        .map(|(line, l)| {
            let mut t = l.split_whitespace();
            let r = ResponseLine {
                call_id: field(t.next(), F, line, "call id")?,
                t_c: field(t.next(), F, line, "time")?,
                response: field(t.next(), F, line, "response")?,
                allocation_cost: field(t.next(), F, line, "allocation cost")?,
                ambulance: field(t.next(), F, line, "ambulance")?,
            };
            if t.next().is_some() {
                return Err(parse_err(F, line, "trailing fields"));
            }
            Ok(r)
        })
        .collect()
}

/// Writes `<folder>/<policy>/response_times_<policy>` with the records of
/// every output of that policy, scenario-major.
pub fn write_response_times(outputs: &[&SimOutput], folder: &Path) -> Result<Option<PathBuf>, IoError> {
    let Some(first) = outputs.first() else { return Ok(None) };
    let label = first.label();
    if outputs.iter().any(|o| o.label() != label) {
        return Err(IoError::Invalid("outputs mix policies".into()));
    }
    let mut sorted = outputs.to_vec();
    sorted.sort_by_key(|o| o.scenario);
    let lines: Vec<ResponseLine> = sorted.iter().flat_map(|o| response_lines(o)).collect();
    let dir = folder.join(label);
    fs::create_dir_all(&dir)?;
    let path = dir.join(response_file_name(label));
    fs::write(&path, format_response_times(&lines))?;
    Ok(Some(path))
}

pub fn trace_file_name(scenario: u64, policy: &str, ambulance: usize, t_step: f64) -> String {
    format!("trace_{scenario}_{policy}_{ambulance}_{t_step}")
}

/// `t lat lon ride_type`, one grid instant per line.
pub fn format_trace(ride: &DiscretizedRide) -> String {
    let mut s = String::new();
    for ((t, p), ty) in ride.times.iter().zip(&ride.rides).zip(&ride.types) {
        let _ = writeln!(s, "{t} {} {} {}", p.lat, p.lon, ty.code());
    }
    s
}

pub fn parse_trace(text: &str, t_step: f64) -> Result<DiscretizedRide, IoError> {
    const F: &str = "trace";
    let mut ride = DiscretizedRide { t_step, ..Default::default() };
    for (line, l) in content_lines(text) {
        let mut t = l.split_whitespace();
        let time: f64 = field(t.next(), F, line, "time")?;
        let lat = field(t.next(), F, line, "latitude")?;
        let lon = field(t.next(), F, line, "longitude")?;
        let code: u8 = field(t.next(), F, line, "ride type")?;
        let ty = TripType::new(code).map_err(|e| parse_err(F, line, e.to_string()))?;
        if t.next().is_some() {
            return Err(parse_err(F, line, "trailing fields"));
        }
        if ride.times.last().is_some_and(|&prev| time < prev) {
            return Err(parse_err(F, line, "times decrease"));
        }
        ride.times.push(time);
        ride.rides.push(point(lat, lon, F, line)?);
        ride.types.push(ty);
    }
    Ok(ride)
}

/// Discretizes every ambulance of `out` and writes
/// `<folder>/<policy>/trace_<scenario>_<policy>_<ambulance>_<t_step>`.
pub fn write_traces(out: &SimOutput, t_step: f64, folder: &Path) -> Result<Vec<PathBuf>, IoError> {
    let dir = folder.join(out.label());
    fs::create_dir_all(&dir)?;
    let mut written = Vec::with_capacity(out.ambulances.len());
    for (k, a) in out.ambulances.iter().enumerate() {
        let ride = discretize_log(&a.log, t_step, out.speed_kmh).map_err(|e| IoError::Invalid(e.to_string()))?;
        let path = dir.join(trace_file_name(out.scenario, out.label(), k, t_step));
        fs::write(&path, format_trace(&ride))?;
        written.push(path);
    }
    Ok(written)
}

/// All writers for a batch: `calls.txt`, then per policy its trajectory
/// files and response-time file.
pub fn write_batch(scenarios: &[Scenario], outputs: &[SimOutput], folder: &Path) -> Result<Vec<PathBuf>, IoError> {
    let mut written = vec![write_calls(scenarios, folder)?];
    let mut labels: Vec<&str> = outputs.iter().map(|o| o.label()).collect();
    labels.dedup();
    labels.sort();
    labels.dedup();
    for label in labels {
        let group: Vec<&SimOutput> = outputs.iter().filter(|o| o.label() == label).collect();
        for o in &group {
            if o.error.is_none() {
                written.push(write_trajectories(o, folder)?);
            }
        }
        let ok: Vec<&SimOutput> = group.into_iter().filter(|o| o.error.is_none()).collect();
        written.extend(write_response_times(&ok, folder)?);
    }
    Ok(written)
}
