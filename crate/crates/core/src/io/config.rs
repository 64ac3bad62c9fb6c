//! Run configuration: `key = value` files, command-line overrides and the
//! `EMS_SIM_OUTPUT` environment fallback.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{read_calls, templates};
use crate::dispatch::{CostModel, PolicyId};
use crate::domain::{AmbulanceType, CallType, Priority, Scenario, Site};
use crate::forecast::{
    aggregate, build_rect_partition, fit_no_covariates, generate_sample_paths, into_scenarios, path_rng, BBox,
    IntensityModel, SpacePartition, TimePartition, SECONDS_PER_DAY,
};
use crate::geo::GeoPoint;
use crate::sim::{DurationDist, FleetUnit, SimConfig};
use crate::streets::{load_graph, TravelModel};

pub const MAX_HOSPITALS: usize = 9;
pub const MAX_BASES: usize = 29;
pub const OUTPUT_ENV: &str = "EMS_SIM_OUTPUT";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("missing required key '{0}'")]
    Missing(String),
    #[error("key '{key}': {msg}")]
    Invalid { key: String, msg: String },
    #[error("line {line}: expected 'key = value'")]
    Syntax { line: usize },
    #[error("cannot read {path}: {msg}")]
    Read { path: String, msg: String },
}

fn invalid(key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.to_string(), msg: msg.into() }
}

/// Every knob of a batch run. Field names double as configuration keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub h_use_fixed_bases: bool,
    pub n_scenarios: usize,
    pub n_hospitals: usize,
    pub n_bases: usize,
    pub n_ambulances: usize,
    pub output_folder: Option<PathBuf>,
    pub policies: Vec<String>,
    pub nm_window: f64,
    pub seed: u64,
    pub speed_kmh: f64,
    /// Weights of low, intermediate and high priority calls.
    pub theta: [f64; 3],
    /// Penalty for an ambulance below the rank a call needs; 0 disables.
    pub mismatch_penalty: f64,
    /// Epoch seconds.
    pub start: f64,
    pub horizon_hours: f64,
    /// Calls per hour over the whole region when no data file is given.
    pub call_rate: f64,
    pub bbox: [f64; 4],
    pub grid: [usize; 2],
    pub time_on_scene: f64,
    pub time_on_scene_sigma: f64,
    pub time_at_hospital: f64,
    pub time_at_hospital_sigma: f64,
    pub cleaning_time: f64,
    pub cleaning_time_sigma: f64,
    pub class_probs: [f64; 4],
    pub stations_file: Option<PathBuf>,
    pub hospitals_file: Option<PathBuf>,
    pub ambulances_file: Option<PathBuf>,
    pub calls_file: Option<PathBuf>,
    pub history_file: Option<PathBuf>,
    pub graph_file: Option<PathBuf>,
}

/// Monday 2021-01-04 00:00 UTC.
pub const DEFAULT_START: f64 = 1_609_718_400.0;

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            h_use_fixed_bases: false,
            n_scenarios: 1,
            n_hospitals: 3,
            n_bases: 5,
            n_ambulances: 10,
            output_folder: None,
            policies: PolicyId::all().iter().map(|p| p.label().to_string()).collect(),
            nm_window: crate::dispatch::DEFAULT_NM_WINDOW,
            seed: 1,
            speed_kmh: 60.0,
            theta: [1.0, 2.0, 4.0],
            mismatch_penalty: crate::dispatch::DEFAULT_MISMATCH_PENALTY,
            start: DEFAULT_START,
            horizon_hours: 168.0,
            call_rate: 4.0,
            bbox: [-23.08, -43.79, -22.74, -43.10],
            grid: [10, 10],
            time_on_scene: 900.0,
            time_on_scene_sigma: 0.0,
            time_at_hospital: 1200.0,
            time_at_hospital_sigma: 0.0,
            cleaning_time: 1200.0,
            cleaning_time_sigma: 0.0,
            class_probs: [0.25; 4],
            stations_file: None,
            hospitals_file: None,
            ambulances_file: None,
            calls_file: None,
            history_file: None,
            graph_file: None,
        }
    }
}

fn list<const N: usize, T: std::str::FromStr>(key: &str, v: &str) -> Result<[T; N], ConfigError> {
    let parts: Vec<T> = v
        .split([',', 'x'])
        .map(|s| s.trim().parse::<T>().map_err(|_| invalid(key, format!("bad value '{s}'"))))
        .collect::<Result<_, _>>()?;
    parts.try_into().map_err(|_| invalid(key, format!("expected {N} values")))
}

fn scalar<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError> {
    v.parse().map_err(|_| invalid(key, format!("bad value '{v}'")))
}

fn boolean(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v.to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(invalid(key, format!("bad flag '{v}'"))),
    }
}

/// Epoch seconds, `YYYY-MM-DD`, `YYYY-MM-DDTHH:MM:SS` (UTC) or RFC 3339.
pub fn parse_instant(v: &str) -> Option<f64> {
    if let Ok(x) = v.parse::<f64>() {
        return x.is_finite().then_some(x);
    }
    if let Ok(d) = DateTime::parse_from_rfc3339(v) {
        return Some(d.timestamp() as f64);
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M"] {
        if let Ok(d) = NaiveDateTime::parse_from_str(v, fmt) {
            return Some(d.and_utc().timestamp() as f64);
        }
    }
    NaiveDate::parse_from_str(v, "%Y-%m-%d").ok().map(|d| d.and_hms_opt(0, 0, 0).expect("midnight").and_utc().timestamp() as f64)
}

impl RunConfig {
    /// Sets one key; `Ok(false)` for an unknown key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<bool, ConfigError> {
        let path = || Some(PathBuf::from(v));
        match key {
            "h_use_fixed_bases" => self.h_use_fixed_bases = boolean(key, v)?,
            "n_scenarios" => self.n_scenarios = scalar(key, v)?,
            "n_hospitals" => self.n_hospitals = scalar(key, v)?,
            "n_bases" => self.n_bases = scalar(key, v)?,
            "n_ambulances" => self.n_ambulances = scalar(key, v)?,
            "output_folder" => self.output_folder = path(),
            "policies" => self.policies = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
            "nm_window" => self.nm_window = scalar(key, v)?,
            "seed" => self.seed = scalar(key, v)?,
            "speed_kmh" => self.speed_kmh = scalar(key, v)?,
            "theta" => self.theta = list(key, v)?,
            "mismatch_penalty" => self.mismatch_penalty = scalar(key, v)?,
            "start" => self.start = parse_instant(v).ok_or_else(|| invalid(key, format!("bad instant '{v}'")))?,
            "horizon_hours" => self.horizon_hours = scalar(key, v)?,
            "call_rate" => self.call_rate = scalar(key, v)?,
            "bbox" => self.bbox = list(key, v)?,
            "grid" => self.grid = list(key, v)?,
            "time_on_scene" => self.time_on_scene = scalar(key, v)?,
            "time_on_scene_sigma" => self.time_on_scene_sigma = scalar(key, v)?,
            "time_at_hospital" => self.time_at_hospital = scalar(key, v)?,
            "time_at_hospital_sigma" => self.time_at_hospital_sigma = scalar(key, v)?,
            "cleaning_time" => self.cleaning_time = scalar(key, v)?,
            "cleaning_time_sigma" => self.cleaning_time_sigma = scalar(key, v)?,
            "class_probs" => self.class_probs = list(key, v)?,
            "stations_file" => self.stations_file = path(),
            "hospitals_file" => self.hospitals_file = path(),
            "ambulances_file" => self.ambulances_file = path(),
            "calls_file" => self.calls_file = path(),
            "history_file" => self.history_file = path(),
            "graph_file" => self.graph_file = path(),
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Bounds and consistency checks; `output_folder` is checked separately
    /// by [`parse_config_str`] because service runs assign their own.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_hospitals > MAX_HOSPITALS {
            return Err(invalid("n_hospitals", format!("at most {MAX_HOSPITALS} hospitals")));
        }
        if self.n_bases > MAX_BASES {
            return Err(invalid("n_bases", format!("at most {MAX_BASES} bases")));
        }
        if self.n_bases == 0 {
            return Err(invalid("n_bases", "at least one base"));
        }
        if self.n_ambulances == 0 {
            return Err(invalid("n_ambulances", "at least one ambulance"));
        }
        if self.n_scenarios == 0 {
            return Err(invalid("n_scenarios", "at least one scenario"));
        }
        self.policy_ids()?;
        let positive = |k: &str, v: f64| if v > 0.0 && v.is_finite() { Ok(()) } else { Err(invalid(k, "must be positive")) };
        let nonneg = |k: &str, v: f64| if v >= 0.0 && v.is_finite() { Ok(()) } else { Err(invalid(k, "must be >= 0")) };
        positive("speed_kmh", self.speed_kmh)?;
        positive("horizon_hours", self.horizon_hours)?;
        positive("nm_window", self.nm_window)?;
        nonneg("call_rate", self.call_rate)?;
        nonneg("mismatch_penalty", self.mismatch_penalty)?;
        for t in self.theta {
            positive("theta", t)?;
        }
        for (k, v) in [
            ("time_on_scene", self.time_on_scene),
            ("time_on_scene_sigma", self.time_on_scene_sigma),
            ("time_at_hospital", self.time_at_hospital),
            ("time_at_hospital_sigma", self.time_at_hospital_sigma),
            ("cleaning_time", self.cleaning_time),
            ("cleaning_time_sigma", self.cleaning_time_sigma),
        ] {
            nonneg(k, v)?;
        }
        if self.class_probs.iter().any(|p| !(*p >= 0.0 && p.is_finite())) || self.class_probs.iter().sum::<f64>() <= 0.0 {
            return Err(invalid("class_probs", "nonnegative with a positive sum"));
        }
        if !self.start.is_finite() {
            return Err(invalid("start", "must be finite"));
        }
        let [a, b, c, d] = self.bbox;
        BBox::new(a, b, c, d).map_err(|e| invalid("bbox", e.to_string()))?;
        if self.grid[0] == 0 || self.grid[1] == 0 {
            return Err(invalid("grid", "at least 1x1"));
        }
        Ok(())
    }

    pub fn policy_ids(&self) -> Result<Vec<PolicyId>, ConfigError> {
        if self.policies.is_empty() {
            return Err(invalid("policies", "at least one policy"));
        }
        self.policies
            .iter()
            .map(|p| match p.as_str() {
                "NM" => Ok(PolicyId::NM { window: self.nm_window }),
                _ => p.parse::<PolicyId>().map_err(|_| invalid("policies", format!("unknown policy '{p}'"))),
            })
            .collect()
    }

    pub fn end(&self) -> f64 {
        self.start + self.horizon_hours * 3600.0
    }

    pub fn region(&self) -> BBox {
        let [a, b, c, d] = self.bbox;
        BBox { min_lat: a, min_lon: b, max_lat: c, max_lon: d }
    }
}

/// Result of [`parse_config`]: the configuration and non-fatal warnings.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedConfig {
    pub config: RunConfig,
    pub warnings: Vec<String>,
}

/// Splits `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (k, v) = body.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1 });
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Merges defaults, file, command line and environment. Precedence for
/// every key: command line over file over defaults; `output_folder` falls
/// back to `env_output` when neither sets it.
pub fn parse_config_str(
    text: &str,
    overrides: &[(String, String)],
    env_output: Option<&str>,
) -> Result<ParsedConfig, ConfigError> {
    let mut merged: BTreeMap<String, String> = BTreeMap::new();
    let mut warnings = Vec::new();
    for (k, v) in parse_pairs(text)? {
        if merged.insert(k.clone(), v).is_some() {
            warnings.push(format!("key '{k}' repeated; the last value wins"));
        }
    }
    for (k, v) in overrides {
        merged.insert(k.clone(), v.clone());
    }
    let mut config = RunConfig::default();
    for (k, v) in &merged {
        if !config.set(k, v)? {
            warnings.push(format!("unknown key '{k}' ignored"));
        }
    }
    if config.output_folder.is_none() {
        config.output_folder = env_output.filter(|s| !s.is_empty()).map(PathBuf::from);
    }
    if config.output_folder.is_none() {
        return Err(ConfigError::Missing("output_folder".into()));
    }
    config.validate()?;
    Ok(ParsedConfig { config, warnings })
}

/// Reads the file at `path`; see [`parse_config_str`]. The environment
/// variable `EMS_SIM_OUTPUT` is consulted for the output folder.
pub fn parse_config(path: &Path, overrides: &[(String, String)]) -> Result<ParsedConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|e| ConfigError::Read { path: path.display().to_string(), msg: e.to_string() })?;
    let env = std::env::var(OUTPUT_ENV).ok();
    parse_config_str(&text, overrides, env.as_deref())
}

/// Everything needed to simulate a configuration.
#[derive(Debug, Clone)]
pub struct PreparedRun {
    pub sim: SimConfig,
    pub scenarios: Vec<Scenario>,
    pub policies: Vec<PolicyId>,
    pub router: TravelModel,
    pub partition: SpacePartition,
    pub time_partition: TimePartition,
    /// Arrival model the scenarios were drawn from (absent when calls were
    /// read from a file).
    pub model: Option<IntensityModel>,
}

fn read_text(key: &str, path: &Path) -> Result<String, ConfigError> {
    fs::read_to_string(path).map_err(|e| invalid(key, format!("{}: {e}", path.display())))
}

fn synthetic_sites(region: BBox, n: usize, seed: u64, stream: u64) -> Vec<Site> {
    let mut rng = path_rng(seed, stream);
    (0..n)
        .map(|id| Site {
            id,
            loc: GeoPoint {
                lat: rng.random_range(region.min_lat..region.max_lat),
                lon: rng.random_range(region.min_lon..region.max_lon),
            },
        })
        .collect()
}

/// Streams reserved for synthetic sites, far from scenario/path streams.
const STATION_STREAM: u64 = 1 << 40;
const HOSPITAL_STREAM: u64 = (1 << 40) + 1;

impl RunConfig {
    /// Loads data files (or synthesizes sites, fleet and calls), builds the
    /// simulation config and the scenarios.
    pub fn prepare(&self) -> Result<PreparedRun, ConfigError> {
        self.validate()?;
        let region = self.region();
        let stations = match &self.stations_file {
            Some(p) => {
                let mut s = templates::parse_sites(&read_text("stations_file", p)?).map_err(|e| invalid("stations_file", e.to_string()))?;
                s.truncate(self.n_bases);
                s
            }
            None => synthetic_sites(region, self.n_bases, self.seed, STATION_STREAM),
        };
        if stations.is_empty() {
            return Err(invalid("stations_file", "no stations"));
        }
        let hospitals = match &self.hospitals_file {
            Some(p) => {
                let mut s = templates::parse_sites(&read_text("hospitals_file", p)?).map_err(|e| invalid("hospitals_file", e.to_string()))?;
                s.truncate(self.n_hospitals);
                s
            }
            None => synthetic_sites(region, self.n_hospitals, self.seed, HOSPITAL_STREAM),
        };
        let amb_types = AmbulanceType::defaults();
        let fleet: Vec<FleetUnit> = match &self.ambulances_file {
            Some(p) => {
                let entries = templates::parse_ambulances(&read_text("ambulances_file", p)?)
                    .map_err(|e| invalid("ambulances_file", e.to_string()))?;
                entries
                    .iter()
                    .take(self.n_ambulances)
                    .map(|a| {
                        let mut u = a.to_fleet_unit(&stations).expect("stations nonempty");
                        if self.h_use_fixed_bases && u.home_base.is_none() {
                            u.home_base = Some(u.station);
                        }
                        u
                    })
                    .collect()
            }
            None => (0..self.n_ambulances)
                .map(|k| {
                    let station = stations[k % stations.len()].id;
                    FleetUnit { amb_type: k % amb_types.len(), station, home_base: Some(station) }
                })
                .collect(),
        };
        let call_types: Vec<CallType> = CallType::defaults()
            .into_iter()
            .map(|mut c| {
                c.theta = self.theta[c.priority.level() as usize];
                c
            })
            .collect();
        let cost = if self.mismatch_penalty > 0.0 {
            CostModel::from_types(&call_types, &amb_types, self.mismatch_penalty)
        } else {
            CostModel::without_mismatch(&call_types, amb_types.len())
        };
        let sim = SimConfig {
            start: self.start,
            end: self.end(),
            call_types: call_types.clone(),
            amb_types,
            fleet,
            stations,
            hospitals,
            cleaning_stations: Vec::new(),
            use_home_base: self.h_use_fixed_bases,
            cost,
            speed_kmh: self.speed_kmh,
            time_on_scene: DurationDist { median: self.time_on_scene, sigma: self.time_on_scene_sigma },
            time_at_hospital: DurationDist { median: self.time_at_hospital, sigma: self.time_at_hospital_sigma },
            cleaning_time: DurationDist { median: self.cleaning_time, sigma: self.cleaning_time_sigma },
            class_probs: self.class_probs,
            seed: self.seed,
            n_scenarios: self.n_scenarios,
        };
        sim.validate().map_err(|e| invalid("fleet", e.to_string()))?;

        let partition = build_rect_partition(region, self.grid[0], self.grid[1]).map_err(|e| invalid("grid", e.to_string()))?;
        let time_partition = TimePartition::daily_slots(30).expect("30 divides a day");
        let (scenarios, model) = match &self.calls_file {
            Some(p) => {
                let mut s = read_calls(p).map_err(|e| invalid("calls_file", e.to_string()))?;
                s.truncate(self.n_scenarios);
                (s, None)
            }
            None => {
                let model = match &self.history_file {
                    Some(p) => {
                        let recs = templates::parse_historical(&read_text("history_file", p)?)
                            .map_err(|e| invalid("history_file", e.to_string()))?;
                        history_model(&recs, &partition, &time_partition, call_types.len())
                            .ok_or_else(|| invalid("history_file", "no calls"))?
                    }
                    None => uniform_model(self.call_rate, call_types.len(), &partition, &time_partition),
                };
                let paths = generate_sample_paths(&model, &partition, &time_partition, self.start, self.end(), self.n_scenarios, self.seed)
                    .map_err(|e| invalid("grid", e.to_string()))?;
                (into_scenarios(&paths, &call_types, self.class_probs, self.seed), Some(model))
            }
        };
        let router = self.router()?;
        Ok(PreparedRun {
            sim,
            scenarios,
            policies: self.policy_ids()?,
            router,
            partition,
            time_partition,
            model,
        })
    }
}

impl RunConfig {
    /// Street router when a graph file is configured, great circle otherwise.
    pub fn router(&self) -> Result<TravelModel, ConfigError> {
        let graph = match &self.graph_file {
            Some(p) => Some(Arc::new(load_graph(p).map_err(|e| invalid("graph_file", e.to_string()))?)),
            None => None,
        };
        TravelModel::new(graph, self.speed_kmh).map_err(|e| invalid("speed_kmh", e.to_string()))
    }
}

/// Spreads `rate` calls per hour evenly over types and zones.
pub fn uniform_model(rate: f64, n_types: usize, sp: &SpacePartition, tp: &TimePartition) -> IntensityModel {
    let mut m = IntensityModel::zeros(n_types, sp.len(), tp.len());
    if let IntensityModel::Table { lambda, .. } = &mut m {
        let per_cell = rate / (n_types * sp.len()) as f64;
        lambda.iter_mut().for_each(|l| *l = per_cell);
    }
    m
}

/// Closed-form fit over whole days spanned by the records.
pub fn history_model(
    records: &[templates::HistoricalRecord],
    sp: &SpacePartition,
    tp: &TimePartition,
    n_types: usize,
) -> Option<IntensityModel> {
    let (from, to) = history_span(records)?;
    let obs: Vec<_> = records.iter().map(|r| r.observed()).collect();
    Some(fit_no_covariates(&aggregate(&obs, sp, tp, n_types, from, to).cube, tp))
}

/// Midnight before the first record to midnight after the last.
pub fn history_span(records: &[templates::HistoricalRecord]) -> Option<(f64, f64)> {
    let lo = records.iter().map(|r| r.t).fold(f64::INFINITY, f64::min);
    let hi = records.iter().map(|r| r.t).fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() {
        return None;
    }
    let day = SECONDS_PER_DAY as f64;
    Some(((lo / day).floor() * day, ((hi / day).floor() + 1.0) * day))
}

/// Priority of each default call type, for tools that only carry types.
pub fn default_priority(call_type: usize) -> Priority {
    Priority::ALL[call_type.min(Priority::ALL.len() - 1)]
}
