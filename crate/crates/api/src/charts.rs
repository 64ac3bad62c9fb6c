//! Chart payloads: forecast heatmaps and line plots from a run's arrival
//! model, and line plot / heatmap / histogram / pie chart views of its
//! historical dataset.

use std::collections::BTreeMap;

use emsim::domain::Priority;
use emsim::forecast::{
    counts_per_period, generate_sample_paths, minute_of_day, path_summary, weekday, ForecastError, IntensityModel,
    SpacePartition, TimePartition,
};
use emsim::geo::GeoPoint;
use emsim::io::config::parse_instant;
use emsim::io::{Gender, HistoricalRecord};
use emsim::metrics::{histogram_values, Histogram};
use serde::{Deserialize, Serialize};

use crate::error::ApiError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneValue {
    pub zone: usize,
    pub value: f64,
    pub ring: Vec<GeoPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodPoint {
    pub t: f64,
    pub mean: f64,
    pub q_low: f64,
    pub q_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountPoint {
    pub t: f64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PieSlice {
    pub label: String,
    pub count: u64,
    pub fraction: f64,
}

fn zones(sp: &SpacePartition, values: Vec<f64>) -> Vec<ZoneValue> {
    sp.zones
        .iter()
        .zip(values)
        .map(|(z, value)| ZoneValue { zone: z.id, value, ring: z.ring.clone() })
        .collect()
}

/// Expected number of calls per zone over `[from, to)`, optionally for one
/// call type.
pub fn forecast_heatmap(
    model: &IntensityModel,
    sp: &SpacePartition,
    tp: &TimePartition,
    from: f64,
    to: f64,
    call_type: Option<usize>,
) -> Result<Vec<ZoneValue>, ApiError> {
    let (n_types, n_zones, _) = model.dims();
    if call_type.is_some_and(|c| c >= n_types) {
        return Err(ApiError::BadRequest("unknown call type".into()));
    }
    let mut values = vec![0.0; n_zones];
    for (t, _, _) in tp.occurrences(from, to) {
        for c in (0..n_types).filter(|c| call_type.is_none_or(|x| x == *c)) {
            for (i, v) in values.iter_mut().enumerate() {
                *v += model.expected_count(c, i, t, tp);
            }
        }
    }
    Ok(zones(sp, values))
}

/// Mean and quantiles of the simulated number of calls per period.
#[allow(clippy::too_many_arguments)]
pub fn forecast_lineplot(
    model: &IntensityModel,
    sp: &SpacePartition,
    tp: &TimePartition,
    from: f64,
    to: f64,
    period: f64,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<PeriodPoint>, ApiError> {
    if !(period > 0.0) || !(to > from) {
        return Err(ApiError::BadRequest("expected period > 0 and from < to".into()));
    }
    let fe = |e: ForecastError| ApiError::BadRequest(e.to_string());
    let paths = generate_sample_paths(model, sp, tp, from, to, n_paths, seed).map_err(fe)?;
    let summary = path_summary(&counts_per_period(&paths, from, to, period), 0.05, 0.95).map_err(fe)?;
    Ok(summary
        .into_iter()
        .enumerate()
        .map(|(j, s)| PeriodPoint { t: from + j as f64 * period, mean: s.mean, q_low: s.q_low, q_high: s.q_high })
        .collect())
}

/// Filters over historical calls; every field is optional.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
pub struct DataFilter {
    pub from: Option<String>,
    pub to: Option<String>,
    /// Weekdays as a comma list, 0 = Monday.
    pub days: Option<String>,
    /// `HH:MM-HH:MM` on 30-minute boundaries.
    pub window: Option<String>,
    #[serde(rename = "type")]
    pub call_type: Option<usize>,
    pub priority: Option<String>,
    pub age_min: Option<u32>,
    pub age_max: Option<u32>,
    pub gender: Option<String>,
    pub hospital: Option<usize>,
    pub district: Option<usize>,
}

/// [`DataFilter`] with its fields parsed.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordSelector {
    pub from: f64,
    pub to: f64,
    pub days: u8,
    pub start_min: u32,
    pub end_min: u32,
    pub call_type: Option<usize>,
    pub priority: Option<Priority>,
    pub age: (u32, u32),
    pub gender: Option<Gender>,
    pub hospital: Option<usize>,
    pub district: Option<usize>,
}

fn hhmm(s: &str) -> Option<u32> {
    let (h, m) = s.split_once(':')?;
    let (h, m): (u32, u32) = (h.parse().ok()?, m.parse().ok()?);
    (h <= 24 && m < 60 && h * 60 + m <= 1440).then_some(h * 60 + m)
}

impl DataFilter {
    pub fn parse(&self) -> Result<RecordSelector, ApiError> {
        let bad = |m: String| ApiError::BadRequest(m);
        let instant = |v: &Option<String>, default: f64| match v {
            None => Ok(default),
            Some(s) => parse_instant(s).ok_or_else(|| bad(format!("bad instant '{s}'"))),
        };
        let days = match &self.days {
            None => 0x7f,
            Some(s) => s.split(',').try_fold(0u8, |acc, d| match d.trim().parse::<u8>() {
                Ok(d) if d < 7 => Ok(acc | 1 << d),
                _ => Err(bad(format!("bad weekday '{d}'"))),
            })?,
        };
        let (start_min, end_min) = match &self.window {
            None => (0, 1440),
            Some(w) => {
                let (a, b) = w.split_once('-').ok_or_else(|| bad(format!("bad window '{w}'")))?;
                match (hhmm(a), hhmm(b)) {
                    (Some(a), Some(b)) if a < b && a % 30 == 0 && b % 30 == 0 => (a, b),
                    _ => return Err(bad(format!("window '{w}' must be HH:MM-HH:MM on 30-minute boundaries"))),
                }
            }
        };
        let priority = match &self.priority {
            None => None,
            Some(p) => Some(p.parse::<Priority>().map_err(|e| bad(e.to_string()))?),
        };
        let gender = match self.gender.as_deref() {
            None => None,
            Some(g) => Some(g.parse::<Gender>().map_err(|_| bad(format!("bad gender '{g}'")))?),
        };
        let sel = RecordSelector {
            from: instant(&self.from, f64::NEG_INFINITY)?,
            to: instant(&self.to, f64::INFINITY)?,
            days,
            start_min,
            end_min,
            call_type: self.call_type,
            priority,
            age: (self.age_min.unwrap_or(0), self.age_max.unwrap_or(u32::MAX)),
            gender,
            hospital: self.hospital,
            district: self.district,
        };
        if sel.from > sel.to {
            return Err(bad("expected from <= to".into()));
        }
        Ok(sel)
    }
}

impl RecordSelector {
    /// Attribute filters skip records with the attribute unknown.
    pub fn matches(&self, r: &HistoricalRecord) -> bool {
        let minute = minute_of_day(r.t);
        r.t >= self.from
            && r.t < self.to
            && self.days & (1u8 << weekday(r.t)) != 0
            && minute >= f64::from(self.start_min)
            && minute < f64::from(self.end_min)
            && self.call_type.is_none_or(|c| c == r.call_type)
            && self.priority.is_none_or(|p| p == r.priority)
            && (self.age == (0, u32::MAX) || r.age.is_some_and(|a| a >= self.age.0 && a <= self.age.1))
            && self.gender.is_none_or(|g| r.gender == Some(g))
            && self.hospital.is_none_or(|h| r.hospital == Some(h))
            && self.district.is_none_or(|d| r.district == Some(d))
    }
}

fn nonempty<'a>(records: &'a [HistoricalRecord], sel: &RecordSelector) -> Result<Vec<&'a HistoricalRecord>, ApiError> {
    let v: Vec<&HistoricalRecord> = records.iter().filter(|r| sel.matches(r)).collect();
    if v.is_empty() {
        return Err(ApiError::Unprocessable("no records match the filter".into()));
    }
    Ok(v)
}

/// Number of selected calls per period, from the period containing the
/// first selected call to the one containing the last.
pub fn data_lineplot(records: &[HistoricalRecord], sel: &RecordSelector, period: f64) -> Result<Vec<CountPoint>, ApiError> {
    if !(period > 0.0 && period.is_finite()) {
        return Err(ApiError::BadRequest("period must be positive".into()));
    }
    let v = nonempty(records, sel)?;
    let lo = v.iter().map(|r| r.t).fold(f64::INFINITY, f64::min);
    let hi = v.iter().map(|r| r.t).fold(f64::NEG_INFINITY, f64::max);
    let first = (lo / period).floor() as i64;
    let n = ((hi / period).floor() as i64 - first + 1) as usize;
    if n > 1_000_000 {
        return Err(ApiError::BadRequest("too many periods".into()));
    }
    let mut counts = vec![0u64; n];
    for r in v {
        counts[((r.t / period).floor() as i64 - first) as usize] += 1;
    }
    Ok(counts.into_iter().enumerate().map(|(j, count)| CountPoint { t: (first + j as i64) as f64 * period, count }).collect())
}

/// Selected calls per zone.
pub fn data_heatmap(records: &[HistoricalRecord], sel: &RecordSelector, sp: &SpacePartition) -> Result<Vec<ZoneValue>, ApiError> {
    let v = nonempty(records, sel)?;
    let mut counts = vec![0.0; sp.len()];
    for r in v {
        if let Some(z) = sp.locate(r.loc) {
            counts[z] += 1.0;
        }
    }
    Ok(zones(sp, counts))
}

/// Histogram of age, hour of day or weekday.
pub fn data_histogram(records: &[HistoricalRecord], sel: &RecordSelector, field: &str, bins: usize) -> Result<Histogram, ApiError> {
    let v = nonempty(records, sel)?;
    let values: Vec<f64> = match field {
        "age" => v.iter().filter_map(|r| r.age.map(f64::from)).collect(),
        "hour" => v.iter().map(|r| minute_of_day(r.t) / 60.0).collect(),
        "weekday" => v.iter().map(|r| weekday(r.t) as f64).collect(),
        _ => return Err(ApiError::BadRequest(format!("unknown histogram field '{field}'"))),
    };
    histogram_values(&values, bins).map_err(ApiError::from)
}

/// Share of selected calls per value of `by`; fractions sum to 1.
pub fn data_piechart(records: &[HistoricalRecord], sel: &RecordSelector, by: &str) -> Result<Vec<PieSlice>, ApiError> {
    let v = nonempty(records, sel)?;
    let opt = |x: Option<String>| x.unwrap_or_else(|| "unknown".into());
    let label = |r: &HistoricalRecord| -> Result<String, ApiError> {
        Ok(match by {
            "type" => r.call_type.to_string(),
            "priority" => r.priority.to_string(),
            "gender" => opt(r.gender.map(|g| format!("{g:?}"))),
            "hospital" => opt(r.hospital.map(|h| h.to_string())),
            "district" => opt(r.district.map(|d| d.to_string())),
            "weekday" => weekday(r.t).to_string(),
            _ => return Err(ApiError::BadRequest(format!("unknown pie chart key '{by}'"))),
        })
    };
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for r in &v {
        *counts.entry(label(r)?).or_default() += 1;
    }
    let total = v.len() as f64;
    Ok(counts.into_iter().map(|(label, count)| PieSlice { label, count, fraction: count as f64 / total }).collect())
}
