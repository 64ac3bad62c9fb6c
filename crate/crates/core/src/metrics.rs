//! Response-time distributions: summaries, empirical CDFs, histograms.

use std::fmt::Write as _;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{CallRecord, Priority};
use crate::forecast::{minute_of_day, weekday};
use crate::sim::SimOutput;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricsError {
    #[error("no records match the filter")]
    EmptySelection,
    #[error("invalid filter: {0}")]
    InvalidFilter(String),
    #[error("histogram needs at least one bin")]
    InvalidBins,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Raw,
    Penalized,
}

impl MetricKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::Raw => "raw",
            MetricKind::Penalized => "penalized",
        }
    }
}

impl FromStr for MetricKind {
    type Err = MetricsError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw" => Ok(MetricKind::Raw),
            "penalized" => Ok(MetricKind::Penalized),
            _ => Err(MetricsError::InvalidFilter(format!("unknown metric kind '{s}'"))),
        }
    }
}

/// Selection of served calls by arrival weekday, intraday window and
/// priority. Weekday bit 0 is Monday; window bounds are minutes of the day
/// in multiples of 30.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricFilter {
    pub days: u8,
    pub start_min: u32,
    pub end_min: u32,
    pub kind: MetricKind,
    pub priorities: Vec<Priority>,
}

impl Default for MetricFilter {
    fn default() -> Self {
        MetricFilter { days: 0x7f, start_min: 0, end_min: 1440, kind: MetricKind::Raw, priorities: Priority::ALL.to_vec() }
    }
}

impl MetricFilter {
    pub fn new(days: u8, start_min: u32, end_min: u32, kind: MetricKind, priorities: Vec<Priority>) -> Result<Self, MetricsError> {
        let f = MetricFilter { days, start_min, end_min, kind, priorities };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<(), MetricsError> {
        if self.days & 0x7f == 0 {
            return Err(MetricsError::InvalidFilter("no day selected".into()));
        }
        if !self.start_min.is_multiple_of(30) || !self.end_min.is_multiple_of(30) || self.start_min >= self.end_min || self.end_min > 1440 {
            return Err(MetricsError::InvalidFilter("window must be a nonempty range of 30-minute slots".into()));
        }
        if self.priorities.is_empty() {
            return Err(MetricsError::InvalidFilter("no priority selected".into()));
        }
        Ok(())
    }

    pub fn with_kind(mut self, kind: MetricKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn with_priorities(mut self, p: &[Priority]) -> Self {
        self.priorities = p.to_vec();
        self
    }

    pub fn matches(&self, r: &CallRecord) -> bool {
        let m = minute_of_day(r.t_c);
        r.served()
            && self.days & (1 << weekday(r.t_c)) != 0
            && m >= self.start_min as f64
            && m < self.end_min as f64
            && self.priorities.contains(&r.priority)
    }

    pub fn value(&self, r: &CallRecord) -> f64 {
        match self.kind {
            MetricKind::Raw => r.waiting_on_scene,
            MetricKind::Penalized => r.waiting_on_scene_penalized,
        }
    }

    /// Parses `days` as a comma list of 0..6 (Monday = 0), `window` as
    /// `HH:MM-HH:MM` and `priorities` as a comma list of priority names.
    pub fn parse(days: Option<&str>, window: Option<&str>, kind: Option<&str>, priorities: Option<&str>) -> Result<Self, MetricsError> {
        let mut f = MetricFilter::default();
        if let Some(d) = days.filter(|s| !s.is_empty()) {
            f.days = 0;
            for tok in d.split(',') {
                let n: u8 = tok.trim().parse().ok().filter(|n| *n < 7).ok_or_else(|| MetricsError::InvalidFilter(format!("bad day '{tok}'")))?;
                f.days |= 1 << n;
            }
        }
        if let Some(w) = window.filter(|s| !s.is_empty()) {
            let (a, b) = w.split_once('-').ok_or_else(|| MetricsError::InvalidFilter("window must be HH:MM-HH:MM".into()))?;
            f.start_min = parse_hhmm(a)?;
            f.end_min = parse_hhmm(b)?;
        }
        if let Some(k) = kind.filter(|s| !s.is_empty()) {
            f.kind = k.parse()?;
        }
        if let Some(p) = priorities.filter(|s| !s.is_empty()) {
            f.priorities = p
                .split(',')
                .map(|s| s.trim().parse::<Priority>().map_err(|_| MetricsError::InvalidFilter(format!("bad priority '{s}'"))))
                .collect::<Result<_, _>>()?;
        }
        f.validate()?;
        Ok(f)
    }
}

fn parse_hhmm(s: &str) -> Result<u32, MetricsError> {
    let bad = || MetricsError::InvalidFilter(format!("bad time '{s}'"));
    let (h, m) = s.trim().split_once(':').ok_or_else(bad)?;
    let h: u32 = h.parse().map_err(|_| bad())?;
    let m: u32 = m.parse().map_err(|_| bad())?;
    if m >= 60 || h * 60 + m > 1440 {
        return Err(bad());
    }
    Ok(h * 60 + m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistSummary {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub q90: f64,
    pub n: usize,
}

/// Lower nearest-rank quantile of sorted values: element `ceil(q n)`
/// (1-based), the first element for `q = 0`.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = (q * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

/// Filtered metric values in record order.
pub fn select(records: &[CallRecord], f: &MetricFilter) -> Vec<f64> {
    records.iter().filter(|r| f.matches(r)).map(|r| f.value(r)).collect()
}

fn sorted(records: &[CallRecord], f: &MetricFilter) -> Result<Vec<f64>, MetricsError> {
    let mut v = select(records, f);
    if v.is_empty() {
        return Err(MetricsError::EmptySelection);
    }
    v.sort_by(f64::total_cmp);
    Ok(v)
}

pub fn summarize_values(values: &[f64]) -> Result<DistSummary, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::EmptySelection);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mean = (v.iter().sum::<f64>() / v.len() as f64).clamp(v[0], v[v.len() - 1]);
    Ok(DistSummary { min: v[0], max: v[v.len() - 1], mean, q90: nearest_rank(&v, 0.9), n: v.len() })
}

pub fn summarize(records: &[CallRecord], f: &MetricFilter) -> Result<DistSummary, MetricsError> {
    summarize_values(&sorted(records, f)?)
}

/// Distinct values with the fraction of samples at or below each.
pub fn ecdf(records: &[CallRecord], f: &MetricFilter) -> Result<Vec<(f64, f64)>, MetricsError> {
    Ok(ecdf_values(&sorted(records, f)?))
}

pub fn ecdf_values(sorted: &[f64]) -> Vec<(f64, f64)> {
    let n = sorted.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, &v) in sorted.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == v => last.1 = frac,
            _ => out.push((v, frac)),
        }
    }
    if let Some(last) = out.last_mut() {
        last.1 = 1.0;
    }
    out
}

/// Smallest value whose cumulative fraction reaches `q`.
pub fn ecdf_inverse(points: &[(f64, f64)], q: f64) -> Option<f64> {
    points.iter().find(|(_, p)| *p >= q - 1e-12).map(|(v, _)| *v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Equal-width bins over `[min, max]`; the last bin is closed on the right.
pub fn histogram(records: &[CallRecord], f: &MetricFilter, bins: usize) -> Result<Histogram, MetricsError> {
    if bins == 0 {
        return Err(MetricsError::InvalidBins);
    }
    histogram_values(&sorted(records, f)?, bins)
}

pub fn histogram_values(values: &[f64], bins: usize) -> Result<Histogram, MetricsError> {
    if bins == 0 {
        return Err(MetricsError::InvalidBins);
    }
    if values.is_empty() {
        return Err(MetricsError::EmptySelection);
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|k| if k == bins { hi } else { lo + k as f64 * width }).collect();
    let mut counts = vec![0; bins];
    for &v in values {
        let k = if width > 0.0 { ((v - lo) / width).floor() as usize } else { 0 };
        counts[k.min(bins - 1)] += 1;
    }
    Ok(Histogram { edges, counts })
}

/// Records of every output run with `policy`, concatenated across scenarios.
pub fn pooled_records<'a>(outputs: &'a [SimOutput], policy: &str) -> Vec<&'a CallRecord> {
    outputs.iter().filter(|o| o.label() == policy).flat_map(|o| o.records.iter()).collect()
}

/// One row of the tabular export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub policy: String,
    pub metric: MetricKind,
    /// Set when the row covers a single scenario.
    pub scenario: Option<u64>,
    pub summary: DistSummary,
}

/// Summary per policy label (pooled across scenarios), or per policy and
/// scenario when `per_scenario` is set. Policies without matching records
/// are left out.
pub fn summarize_outputs(outputs: &[SimOutput], f: &MetricFilter, per_scenario: bool) -> Vec<SummaryRow> {
    let mut groups: Vec<(String, Option<u64>)> = Vec::new();
    for o in outputs {
        let key = (o.label().to_string(), per_scenario.then_some(o.scenario));
        if !groups.contains(&key) {
            groups.push(key);
        }
    }
    groups
        .into_par_iter()
        .filter_map(|(policy, scenario)| {
            let records: Vec<CallRecord> = outputs
                .iter()
                .filter(|o| o.label() == policy && scenario.is_none_or(|s| s == o.scenario))
                .flat_map(|o| o.records.iter().cloned())
                .collect();
            summarize(&records, f).ok().map(|summary| SummaryRow { policy, metric: f.kind, scenario, summary })
        })
        .collect()
}

pub const EXPORT_HEADER: &str = "policy,metric,min,mean,q90,max,n";

/// Comma-delimited table; per-scenario rows carry `policy@scenario`.
pub fn export_table(rows: &[SummaryRow]) -> String {
    let mut s = String::from(EXPORT_HEADER);
    s.push('\n');
    for r in rows {
        let policy = match r.scenario {
            Some(id) => format!("{}@{id}", r.policy),
            None => r.policy.clone(),
        };
        let d = &r.summary;
        let _ = writeln!(s, "{policy},{},{},{},{},{},{}", r.metric.as_str(), d.min, d.mean, d.q90, d.max, d.n);
    }
    s
}
