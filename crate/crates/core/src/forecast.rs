//! Space/time discretization, Poisson intensity estimation and random
//! generation of emergency calls.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{CallSpec, CallType, Priority, Scenario, ServiceClass};
use crate::geo::GeoPoint;
use crate::metrics::nearest_rank;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ForecastError {
    #[error("degenerate region")]
    InvalidRegion,
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("no coefficient vector satisfies the positivity constraints")]
    Infeasible,
    #[error("solver stopped after {iterations} iterations")]
    MaxIterations { iterations: usize, beta: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub min_lat: f64,
    pub min_lon: f64,
    pub max_lat: f64,
    pub max_lon: f64,
}

impl BBox {
    pub fn new(min_lat: f64, min_lon: f64, max_lat: f64, max_lon: f64) -> Result<Self, ForecastError> {
        let b = BBox { min_lat, min_lon, max_lat, max_lon };
        let finite = [min_lat, min_lon, max_lat, max_lon].iter().all(|v| v.is_finite());
        if !finite || !(max_lat > min_lat && max_lon > min_lon) || min_lat < -90.0 || max_lat > 90.0 {
            return Err(ForecastError::InvalidRegion);
        }
        Ok(b)
    }

    /// Closed on the min edges, open on the max edges.
    pub fn contains(&self, p: GeoPoint) -> bool {
        p.lat >= self.min_lat && p.lat < self.max_lat && p.lon >= self.min_lon && p.lon < self.max_lon
    }

    fn of_ring(ring: &[GeoPoint]) -> BBox {
        let mut b = BBox { min_lat: f64::MAX, min_lon: f64::MAX, max_lat: f64::MIN, max_lon: f64::MIN };
        for p in ring {
            b.min_lat = b.min_lat.min(p.lat);
            b.max_lat = b.max_lat.max(p.lat);
            b.min_lon = b.min_lon.min(p.lon);
            b.max_lon = b.max_lon.max(p.lon);
        }
        b
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Zone {
    pub id: usize,
    /// Closed ring (first vertex not repeated).
    pub ring: Vec<GeoPoint>,
    pub bbox: BBox,
}

impl Zone {
    /// Even-odd rule with half-open edge crossings.
    pub fn contains(&self, p: GeoPoint) -> bool {
        if !(p.lat >= self.bbox.min_lat && p.lat <= self.bbox.max_lat && p.lon >= self.bbox.min_lon && p.lon <= self.bbox.max_lon) {
            return false;
        }
        let mut inside = false;
        let n = self.ring.len();
        let mut j = n - 1;
        for i in 0..n {
            let (a, b) = (self.ring[i], self.ring[j]);
            if (a.lat > p.lat) != (b.lat > p.lat) {
                let x = a.lon + (p.lat - a.lat) / (b.lat - a.lat) * (b.lon - a.lon);
                if p.lon < x {
                    inside = !inside;
                }
            }
            j = i;
        }
        inside
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PartitionKind {
    Rect { nx: usize, ny: usize, bbox: BBox },
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpacePartition {
    pub zones: Vec<Zone>,
    pub kind: PartitionKind,
}

/// `nx` columns (longitude) by `ny` rows (latitude), ids row-major from the
/// south-west corner.
pub fn build_rect_partition(bbox: BBox, nx: usize, ny: usize) -> Result<SpacePartition, ForecastError> {
    BBox::new(bbox.min_lat, bbox.min_lon, bbox.max_lat, bbox.max_lon)?;
    if nx == 0 || ny == 0 {
        return Err(ForecastError::InvalidPartition("nx and ny must be at least 1".into()));
    }
    let dlat = (bbox.max_lat - bbox.min_lat) / ny as f64;
    let dlon = (bbox.max_lon - bbox.min_lon) / nx as f64;
    let mut zones = Vec::with_capacity(nx * ny);
    for r in 0..ny {
        for c in 0..nx {
            let lat0 = bbox.min_lat + r as f64 * dlat;
            let lon0 = bbox.min_lon + c as f64 * dlon;
            let lat1 = if r + 1 == ny { bbox.max_lat } else { lat0 + dlat };
            let lon1 = if c + 1 == nx { bbox.max_lon } else { lon0 + dlon };
            let ring = vec![
                GeoPoint { lat: lat0, lon: lon0 },
                GeoPoint { lat: lat0, lon: lon1 },
                GeoPoint { lat: lat1, lon: lon1 },
                GeoPoint { lat: lat1, lon: lon0 },
            ];
            zones.push(Zone { id: r * nx + c, bbox: BBox::of_ring(&ring), ring });
        }
    }
    Ok(SpacePartition { zones, kind: PartitionKind::Rect { nx, ny, bbox } })
}

impl SpacePartition {
    pub fn len(&self) -> usize {
        self.zones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.zones.is_empty()
    }

    /// Zone containing `g`, or `None` outside the partition.
    pub fn locate(&self, g: GeoPoint) -> Option<usize> {
        match &self.kind {
            PartitionKind::Rect { nx, ny, bbox } => {
                if !bbox.contains(g) {
                    return None;
                }
                let c = (((g.lon - bbox.min_lon) / (bbox.max_lon - bbox.min_lon)) * *nx as f64).floor() as usize;
                let r = (((g.lat - bbox.min_lat) / (bbox.max_lat - bbox.min_lat)) * *ny as f64).floor() as usize;
                let (mut c, mut r) = (c.min(nx - 1), r.min(ny - 1));
                // Rounding at shared edges: honour the stored zone bounds.
                let z = &self.zones[r * nx + c].bbox;
                if g.lon < z.min_lon && c > 0 {
                    c -= 1;
                } else if g.lon >= z.max_lon && c + 1 < *nx {
                    c += 1;
                }
                if g.lat < z.min_lat && r > 0 {
                    r -= 1;
                } else if g.lat >= z.max_lat && r + 1 < *ny {
                    r += 1;
                }
                Some(r * nx + c)
            }
            PartitionKind::Custom => self.zones.iter().find(|z| z.contains(g)).map(|z| z.id),
        }
    }

    /// Pairs of zones sharing an edge (rectangular partitions only).
    pub fn neighbors(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        if let PartitionKind::Rect { nx, ny, .. } = self.kind {
            for r in 0..ny {
                for c in 0..nx {
                    let id = r * nx + c;
                    if c + 1 < nx {
                        out.push((id, id + 1));
                    }
                    if r + 1 < ny {
                        out.push((id, id + nx));
                    }
                }
            }
        }
        out
    }

    /// Uniform point in a zone by rejection from its bounding box.
    pub fn sample_in_zone<R: Rng + ?Sized>(&self, zone: usize, rng: &mut R) -> GeoPoint {
        let z = &self.zones[zone];
        loop {
            let p = GeoPoint {
                lat: rng.random_range(z.bbox.min_lat..z.bbox.max_lat),
                lon: rng.random_range(z.bbox.min_lon..z.bbox.max_lon),
            };
            if matches!(self.kind, PartitionKind::Rect { .. }) || z.contains(p) {
                return p;
            }
        }
    }
}

/// Parses `<zone_id>; <lat,lon> <lat,lon> ...` polygons, one per line.
/// Ids must be dense `0..n`, in any order.
pub fn parse_partition(text: &str) -> Result<SpacePartition, ForecastError> {
    let mut zones: Vec<Zone> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let err = |msg: &str| ForecastError::Parse { line, msg: msg.to_string() };
        let (id, rest) = body.split_once(';').ok_or_else(|| err("expected '<zone_id>; <lat,lon> ...'"))?;
        let id: usize = id.trim().parse().map_err(|_| err("bad zone id"))?;
        let mut ring = Vec::new();
        for tok in rest.split_whitespace() {
            let (a, b) = tok.split_once(',').ok_or_else(|| err("vertex must be lat,lon"))?;
            let lat: f64 = a.parse().map_err(|_| err("bad latitude"))?;
            let lon: f64 = b.parse().map_err(|_| err("bad longitude"))?;
            let p = GeoPoint::new(lat, lon).map_err(|e| err(&e.to_string()))?;
            ring.push(p);
        }
        if ring.len() > 1 && ring.first() == ring.last() {
            ring.pop();
        }
        if ring.len() < 3 {
            return Err(err("a polygon needs at least three vertices"));
        }
        let bbox = BBox::of_ring(&ring);
        if !(bbox.max_lat > bbox.min_lat && bbox.max_lon > bbox.min_lon) {
            return Err(err("degenerate polygon"));
        }
        zones.push(Zone { id, ring, bbox });
    }
    zones.sort_by_key(|z| z.id);
    if zones.iter().enumerate().any(|(i, z)| z.id != i) {
        return Err(ForecastError::InvalidPartition("zone ids must be dense from 0".into()));
    }
    Ok(SpacePartition { zones, kind: PartitionKind::Custom })
}

/// Canonical text of a partition in the polygon file format.
pub fn partition_to_text(sp: &SpacePartition) -> String {
    let mut s = String::new();
    for z in &sp.zones {
        s.push_str(&format!("{};", z.id));
        for p in &z.ring {
            s.push_str(&format!(" {},{}", p.lat, p.lon));
        }
        s.push('\n');
    }
    s
}

pub const SECONDS_PER_DAY: i64 = 86_400;

/// Day of week of an epoch instant (UTC), Monday = 0.
pub fn weekday(t: f64) -> u32 {
    let day = (t / SECONDS_PER_DAY as f64).floor() as i64;
    (day + 3).rem_euclid(7) as u32
}

/// Minute of the day of an epoch instant (UTC), fractional.
pub fn minute_of_day(t: f64) -> f64 {
    t.rem_euclid(SECONDS_PER_DAY as f64) / 60.0
}

/// Recurring weekly window: a set of weekdays (bit 0 = Monday) and an
/// intraday interval `[start_min, end_min)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub days: u8,
    pub start_min: u32,
    pub end_min: u32,
}

impl TimeWindow {
    pub const ALL_DAYS: u8 = 0x7f;

    pub fn duration_hours(&self) -> f64 {
        (self.end_min - self.start_min) as f64 / 60.0
    }

    pub fn contains(&self, t: f64) -> bool {
        let m = minute_of_day(t);
        self.days & (1 << weekday(t)) != 0 && m >= self.start_min as f64 && m < self.end_min as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimePartition {
    pub windows: Vec<TimeWindow>,
}

impl TimePartition {
    pub fn new(windows: Vec<TimeWindow>) -> Result<Self, ForecastError> {
        for w in &windows {
            if w.days & TimeWindow::ALL_DAYS == 0 || w.start_min >= w.end_min || w.end_min > 1440 {
                return Err(ForecastError::InvalidPartition(format!("bad window {w:?}")));
            }
        }
        for (i, a) in windows.iter().enumerate() {
            for b in &windows[i + 1..] {
                if a.days & b.days != 0 && a.start_min < b.end_min && b.start_min < a.end_min {
                    return Err(ForecastError::InvalidPartition("windows overlap".into()));
                }
            }
        }
        Ok(TimePartition { windows })
    }

    /// Same intraday slots of `minutes` every day of the week.
    pub fn daily_slots(minutes: u32) -> Result<Self, ForecastError> {
        if minutes == 0 || 1440 % minutes != 0 {
            return Err(ForecastError::InvalidPartition("slot length must divide a day".into()));
        }
        Self::new(
            (0..1440 / minutes)
                .map(|k| TimeWindow { days: TimeWindow::ALL_DAYS, start_min: k * minutes, end_min: (k + 1) * minutes })
                .collect(),
        )
    }

    /// Slots of `minutes` for each day of the week separately.
    pub fn weekly_slots(minutes: u32) -> Result<Self, ForecastError> {
        if minutes == 0 || 1440 % minutes != 0 {
            return Err(ForecastError::InvalidPartition("slot length must divide a day".into()));
        }
        let mut w = Vec::new();
        for d in 0..7u8 {
            for k in 0..1440 / minutes {
                w.push(TimeWindow { days: 1 << d, start_min: k * minutes, end_min: (k + 1) * minutes });
            }
        }
        Self::new(w)
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn duration_hours(&self, t: usize) -> f64 {
        self.windows[t].duration_hours()
    }

    pub fn locate(&self, t: f64) -> Option<usize> {
        self.windows.iter().position(|w| w.contains(t))
    }

    /// Calendar occurrences `(window, start, end)` lying wholly inside
    /// `[from, to)`, in chronological order.
    pub fn occurrences(&self, from: f64, to: f64) -> Vec<(usize, f64, f64)> {
        let mut out = Vec::new();
        if !(to > from) {
            return out;
        }
        let d0 = (from / SECONDS_PER_DAY as f64).floor() as i64;
        let d1 = (to / SECONDS_PER_DAY as f64).ceil() as i64;
        for day in d0..d1 {
            let wd = (day + 3).rem_euclid(7) as u32;
            let base = (day * SECONDS_PER_DAY) as f64;
            let mut today: Vec<(usize, f64, f64)> = self
                .windows
                .iter()
                .enumerate()
                .filter(|(_, w)| w.days & (1 << wd) != 0)
                .map(|(i, w)| (i, base + w.start_min as f64 * 60.0, base + w.end_min as f64 * 60.0))
                .filter(|&(_, s, e)| s >= from && e <= to)
                .collect();
            today.sort_by(|a, b| a.1.total_cmp(&b.1));
            out.extend(today);
        }
        out
    }
}

/// A historical call used for estimation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservedCall {
    pub t: f64,
    pub loc: GeoPoint,
    pub call_type: usize,
}

/// Observation counts `n` and arrival counts `m` indexed `[c][i][t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationCube {
    pub n_types: usize,
    pub n_zones: usize,
    pub n_windows: usize,
    pub n: Vec<f64>,
    pub m: Vec<f64>,
}

impl ObservationCube {
    pub fn zeros(n_types: usize, n_zones: usize, n_windows: usize) -> Self {
        let len = n_types * n_zones * n_windows;
        ObservationCube { n_types, n_zones, n_windows, n: vec![0.0; len], m: vec![0.0; len] }
    }

    pub fn idx(&self, c: usize, i: usize, t: usize) -> usize {
        (c * self.n_zones + i) * self.n_windows + t
    }

    pub fn len(&self) -> usize {
        self.n.len()
    }

    pub fn is_empty(&self) -> bool {
        self.n.is_empty()
    }

    pub fn window_of(&self, cell: usize) -> usize {
        cell % self.n_windows
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregation {
    pub cube: ObservationCube,
    /// Calls outside the partition, the time windows or the type range.
    pub rejected: usize,
}

/// Counts arrivals per (type, zone, window) and window occurrences over the
/// data span `[from, to)`.
pub fn aggregate(
    calls: &[ObservedCall],
    sp: &SpacePartition,
    tp: &TimePartition,
    n_types: usize,
    from: f64,
    to: f64,
) -> Aggregation {
    let mut cube = ObservationCube::zeros(n_types, sp.len(), tp.len());
    let mut per_window = vec![0.0; tp.len()];
    for (w, _, _) in tp.occurrences(from, to) {
        per_window[w] += 1.0;
    }
    for c in 0..n_types {
        for i in 0..sp.len() {
            for (t, n) in per_window.iter().enumerate() {
                let k = cube.idx(c, i, t);
                cube.n[k] = *n;
            }
        }
    }
    let mut rejected = 0;
    for call in calls {
        let zone = sp.locate(call.loc);
        let window = tp.locate(call.t);
        match (zone, window) {
            (Some(i), Some(t)) if call.call_type < n_types && call.t >= from && call.t < to && cube.n[cube.idx(call.call_type, i, t)] > 0.0 => {
                let k = cube.idx(call.call_type, i, t);
                cube.m[k] += 1.0;
            }
            _ => rejected += 1,
        }
    }
    Aggregation { cube, rejected }
}

/// Per-cell covariate vectors `x[cell][k]`, cells laid out as in the cube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Covariates {
    pub k: usize,
    pub x: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum IntensityModel {
    /// Rate per hour for every cell; `unobserved` flags cells with `N = 0`.
    Table { n_types: usize, n_zones: usize, n_windows: usize, lambda: Vec<f64>, unobserved: Vec<bool> },
    /// Expected count per window occurrence `beta . x`.
    Covariate { n_types: usize, n_zones: usize, n_windows: usize, beta: Vec<f64>, covariates: Covariates },
}

impl IntensityModel {
    pub fn dims(&self) -> (usize, usize, usize) {
        match self {
            IntensityModel::Table { n_types, n_zones, n_windows, .. }
            | IntensityModel::Covariate { n_types, n_zones, n_windows, .. } => (*n_types, *n_zones, *n_windows),
        }
    }

    fn idx(&self, c: usize, i: usize, t: usize) -> usize {
        let (_, z, w) = self.dims();
        (c * z + i) * w + t
    }

    /// Expected number of calls in one occurrence of window `t`.
    pub fn expected_count(&self, c: usize, i: usize, t: usize, tp: &TimePartition) -> f64 {
        let k = self.idx(c, i, t);
        match self {
            IntensityModel::Table { lambda, .. } => lambda[k] * tp.duration_hours(t),
            IntensityModel::Covariate { beta, covariates, .. } => dot(beta, &covariates.x[k]).max(0.0),
        }
    }

    /// Calls per hour.
    pub fn rate(&self, c: usize, i: usize, t: usize, tp: &TimePartition) -> f64 {
        self.expected_count(c, i, t, tp) / tp.duration_hours(t)
    }

    pub fn zeros(n_types: usize, n_zones: usize, n_windows: usize) -> Self {
        let len = n_types * n_zones * n_windows;
        IntensityModel::Table { n_types, n_zones, n_windows, lambda: vec![0.0; len], unobserved: vec![false; len] }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Closed-form Poisson maximum likelihood `lambda = M / (N * D_t)`.
pub fn fit_no_covariates(obs: &ObservationCube, tp: &TimePartition) -> IntensityModel {
    let mut lambda = vec![0.0; obs.len()];
    let mut unobserved = vec![false; obs.len()];
    for k in 0..obs.len() {
        let n = obs.n[k];
        if n > 0.0 {
            lambda[k] = obs.m[k] / (n * tp.duration_hours(obs.window_of(k)));
        } else {
            unobserved[k] = true;
        }
    }
    IntensityModel::Table { n_types: obs.n_types, n_zones: obs.n_zones, n_windows: obs.n_windows, lambda, unobserved }
}

/// Negative log-likelihood of a rate table (constant terms dropped).
pub fn table_nll(obs: &ObservationCube, tp: &TimePartition, lambda: &[f64]) -> f64 {
    (0..obs.len())
        .filter(|&k| obs.n[k] > 0.0)
        .map(|k| {
            let mu = lambda[k] * tp.duration_hours(obs.window_of(k));
            let log_term = if obs.m[k] > 0.0 { obs.m[k] * mu.ln() } else { 0.0 };
            obs.n[k] * mu - log_term
        })
        .sum()
}

/// Rate table with quadratic smoothing between neighbouring zones:
/// minimizes the negative log-likelihood plus
/// `weight * sum (lambda[c,i,t] - lambda[c,j,t])^2` over `neighbors`.
pub fn fit_smoothed(
    obs: &ObservationCube,
    tp: &TimePartition,
    neighbors: &[(usize, usize)],
    weight: f64,
    opts: SolverOptions,
) -> Result<(IntensityModel, SolverReport), ForecastError> {
    if !(weight >= 0.0 && weight.is_finite()) {
        return Err(ForecastError::InvalidInput("smoothing weight must be >= 0".into()));
    }
    let base = fit_no_covariates(obs, tp);
    let IntensityModel::Table { lambda: start, unobserved, .. } = &base else { unreachable!() };
    if weight == 0.0 || neighbors.is_empty() {
        return Ok((base.clone(), SolverReport { iterations: 0, objective: table_nll(obs, tp, start), converged: true }));
    }
    let floor = opts.epsilon;
    let objective = |l: &[f64]| {
        let mut f = table_nll(obs, tp, l);
        for c in 0..obs.n_types {
            for t in 0..obs.n_windows {
                for &(i, j) in neighbors {
                    let d = l[obs.idx(c, i, t)] - l[obs.idx(c, j, t)];
                    f += weight * d * d;
                }
            }
        }
        f
    };
    let gradient = |l: &[f64]| {
        let mut g = vec![0.0; l.len()];
        for k in 0..l.len() {
            if obs.n[k] > 0.0 {
                let d = tp.duration_hours(obs.window_of(k));
                g[k] = obs.n[k] * d - obs.m[k] / l[k];
            }
        }
        for c in 0..obs.n_types {
            for t in 0..obs.n_windows {
                for &(i, j) in neighbors {
                    let (a, b) = (obs.idx(c, i, t), obs.idx(c, j, t));
                    let d = 2.0 * weight * (l[a] - l[b]);
                    g[a] += d;
                    g[b] -= d;
                }
            }
        }
        g
    };
    let project = |l: &mut Vec<f64>| {
        for v in l.iter_mut() {
            *v = v.max(floor);
        }
        true
    };
    let x0: Vec<f64> = start.iter().map(|v| v.max(floor)).collect();
    let (lambda, report) = projected_gradient(x0, objective, gradient, project, opts)?;
    Ok((
        IntensityModel::Table {
            n_types: obs.n_types,
            n_zones: obs.n_zones,
            n_windows: obs.n_windows,
            lambda,
            unobserved: unobserved.clone(),
        },
        report,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Positivity floor for the fitted intensity.
    pub epsilon: f64,
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { epsilon: 1e-6, rel_tol: 1e-8, max_iter: 10_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub iterations: usize,
    pub objective: f64,
    pub converged: bool,
}

/// Spectral projected gradient with Armijo backtracking. `project` returns
/// false when it cannot reach the feasible set.
fn projected_gradient(
    mut x: Vec<f64>,
    f: impl Fn(&[f64]) -> f64,
    grad: impl Fn(&[f64]) -> Vec<f64>,
    project: impl Fn(&mut Vec<f64>) -> bool,
    opts: SolverOptions,
) -> Result<(Vec<f64>, SolverReport), ForecastError> {
    const ARMIJO: f64 = 1e-4;
    let mut fx = f(&x);
    let mut g = grad(&x);
    let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut step = if gnorm > 0.0 { 1.0 / gnorm } else { 1.0 };
    for it in 1..=opts.max_iter {
        let mut accepted = None;
        let mut s = step;
        for _ in 0..60 {
            let mut y: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - s * gi).collect();
            if !project(&mut y) {
                return Err(ForecastError::Infeasible);
            }
            let fy = f(&y);
            let decrease: f64 = g.iter().zip(y.iter().zip(&x)).map(|(gi, (yi, xi))| gi * (yi - xi)).sum();
            if fy.is_finite() && fy <= fx + ARMIJO * decrease {
                accepted = Some((y, fy));
                break;
            }
            s *= 0.5;
        }
        let Some((y, fy)) = accepted else {
            // No decrease along the projected arc: stationary to precision.
            return Ok((x, SolverReport { iterations: it, objective: fx, converged: true }));
        };
        let g_new = grad(&y);
        let sk: Vec<f64> = y.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yk: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&sk, &yk);
        let ss = dot(&sk, &sk);
        step = if sy > 0.0 { (ss / sy).clamp(1e-12, 1e12) } else { (s * 2.0).min(1e12) };
        let rel = (fx - fy) / fx.abs().max(1.0);
        x = y;
        g = g_new;
        fx = fy;
        if rel < opts.rel_tol {
            return Ok((x, SolverReport { iterations: it, objective: fx, converged: true }));
        }
    }
    Err(ForecastError::MaxIterations { iterations: opts.max_iter, beta: x })
}

/// Negative log-likelihood `sum N * beta.x - M * log(beta.x)` over
/// observed cells.
pub fn covariate_nll(obs: &ObservationCube, cov: &Covariates, beta: &[f64]) -> f64 {
    let mut f = 0.0;
    for k in 0..obs.len() {
        if obs.n[k] > 0.0 {
            let mu = dot(beta, &cov.x[k]);
            if mu <= 0.0 {
                return f64::INFINITY;
            }
            f += obs.n[k] * mu - obs.m[k] * mu.ln();
        }
    }
    f
}

pub fn covariate_gradient(obs: &ObservationCube, cov: &Covariates, beta: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; cov.k];
    for k in 0..obs.len() {
        if obs.n[k] > 0.0 {
            let mu = dot(beta, &cov.x[k]);
            let w = obs.n[k] - obs.m[k] / mu;
            for (gj, xj) in g.iter_mut().zip(&cov.x[k]) {
                *gj += w * xj;
            }
        }
    }
    g
}

/// Projection onto `{beta : a_r . beta >= eps}` by Dykstra's alternating
/// projections. Returns false if it cannot reach feasibility.
fn dykstra(beta: &mut [f64], rows: &[Vec<f64>], eps: f64) -> bool {
    let feasible = |b: &[f64]| rows.iter().all(|a| dot(a, b) >= eps * (1.0 - 1e-9));
    if feasible(beta) {
        return true;
    }
    let mut corr = vec![vec![0.0; beta.len()]; rows.len()];
    for _ in 0..10_000 {
        for (r, a) in rows.iter().enumerate() {
            let mut y: Vec<f64> = beta.iter().zip(&corr[r]).map(|(b, c)| b + c).collect();
            let aa = dot(a, a);
            let viol = eps - dot(a, &y);
            if viol > 0.0 {
                for (yj, aj) in y.iter_mut().zip(a) {
                    *yj += viol / aa * aj;
                }
            }
            for j in 0..beta.len() {
                corr[r][j] = beta[j] + corr[r][j] - y[j];
                beta[j] = y[j];
            }
        }
        if feasible(beta) {
            return true;
        }
    }
    false
}

/// Constrained maximum likelihood for `lambda(x) = beta . x`.
pub fn fit_covariates(
    obs: &ObservationCube,
    cov: &Covariates,
    opts: SolverOptions,
) -> Result<(IntensityModel, SolverReport), ForecastError> {
    if cov.k == 0 || cov.x.len() != obs.len() || cov.x.iter().any(|x| x.len() != cov.k || x.iter().any(|v| !v.is_finite())) {
        return Err(ForecastError::InvalidInput("covariates must be finite with one K-vector per cell".into()));
    }
    let rows: Vec<Vec<f64>> = (0..obs.len()).filter(|&k| obs.n[k] > 0.0).map(|k| cov.x[k].clone()).collect();
    if rows.is_empty() {
        return Err(ForecastError::InvalidInput("no observed cells".into()));
    }
    if rows.iter().any(|a| a.iter().all(|v| *v == 0.0)) {
        return Err(ForecastError::Infeasible);
    }
    // Start from least squares on the empirical per-occurrence means.
    let targets: Vec<f64> =
        (0..obs.len()).filter(|&k| obs.n[k] > 0.0).map(|k| (obs.m[k] / obs.n[k]).max(opts.epsilon)).collect();
    let mut beta = least_squares(&rows, &targets).unwrap_or_else(|| vec![1.0; cov.k]);
    if !dykstra(&mut beta, &rows, opts.epsilon) {
        return Err(ForecastError::Infeasible);
    }
    let (beta, report) = projected_gradient(
        beta,
        |b| covariate_nll(obs, cov, b),
        |b| covariate_gradient(obs, cov, b),
        |b| dykstra(b, &rows, opts.epsilon),
        opts,
    )?;
    Ok((
        IntensityModel::Covariate {
            n_types: obs.n_types,
            n_zones: obs.n_zones,
            n_windows: obs.n_windows,
            beta,
            covariates: cov.clone(),
        },
        report,
    ))
}

/// Normal equations solved by Gaussian elimination with partial pivoting.
fn least_squares(rows: &[Vec<f64>], y: &[f64]) -> Option<Vec<f64>> {
    let k = rows.first()?.len();
    let mut a = vec![vec![0.0; k + 1]; k];
    for (r, yr) in rows.iter().zip(y) {
        for i in 0..k {
            for j in 0..k {
                a[i][j] += r[i] * r[j];
            }
            a[i][k] += r[i] * yr;
        }
    }
    for col in 0..k {
        let piv = (col..k).max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        for r in 0..k {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..=k {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    Some((0..k).map(|i| a[i][k] / a[i][i]).collect())
}

/// A generated call before service attributes are attached.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratedCall {
    pub t: f64,
    pub loc: GeoPoint,
    pub call_type: usize,
    pub zone: usize,
    pub window: usize,
}

/// RNG stream for one generated path.
pub fn path_rng(seed: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path);
    rng
}

fn poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map(|d| d.sample(rng) as u64).unwrap_or(0)
}

/// Draws `n_paths` independent call sequences over `[from, to)`: a Poisson
/// count per (type, zone, window occurrence), uniform times within the
/// occurrence and uniform locations within the zone.
pub fn generate_sample_paths(
    model: &IntensityModel,
    sp: &SpacePartition,
    tp: &TimePartition,
    from: f64,
    to: f64,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<Vec<GeneratedCall>>, ForecastError> {
    let (n_types, n_zones, n_windows) = model.dims();
    if n_zones != sp.len() || n_windows != tp.len() {
        return Err(ForecastError::InvalidInput("model dimensions do not match the partitions".into()));
    }
    let occurrences = tp.occurrences(from, to);
    Ok((0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = path_rng(seed, p as u64);
            let mut calls = Vec::new();
            for &(t, start, end) in &occurrences {
                for c in 0..n_types {
                    for i in 0..n_zones {
                        let count = poisson(model.expected_count(c, i, t, tp), &mut rng);
                        for _ in 0..count {
                            let time = rng.random_range(start..end);
                            let loc = sp.sample_in_zone(i, &mut rng);
                            calls.push(GeneratedCall { t: time, loc, call_type: c, zone: i, window: t });
                        }
                    }
                }
            }
            calls.sort_by(|a, b| a.t.total_cmp(&b.t));
            calls
        })
        .collect())
}

/// Turns generated paths into scenarios: service classes drawn from
/// `class_probs` (C1..C4) on a stream separate from the arrivals, call ids
/// unique across all scenarios.
pub fn into_scenarios(
    paths: &[Vec<GeneratedCall>],
    call_types: &[CallType],
    class_probs: [f64; 4],
    seed: u64,
) -> Vec<Scenario> {
    let total: f64 = class_probs.iter().sum();
    let mut next_id = 0u64;
    paths
        .iter()
        .enumerate()
        .map(|(p, calls)| {
            let mut rng = path_rng(seed ^ 0x5eed_c1a5, p as u64);
            let specs = calls
                .iter()
                .map(|g| {
                    let mut u = rng.random::<f64>() * total;
                    let mut class = ServiceClass::C4;
                    for (q, cl) in class_probs.iter().zip(ServiceClass::ALL) {
                        if u < *q {
                            class = cl;
                            break;
                        }
                        u -= q;
                    }
                    next_id += 1;
                    CallSpec {
                        id: next_id,
                        t_c: g.t,
                        loc: g.loc,
                        call_type: g.call_type,
                        priority: call_types.get(g.call_type).map(|c| c.priority).unwrap_or(Priority::Low),
                        service_class: class,
                    }
                })
                .collect();
            Scenario { id: p as u64, calls: specs }
        })
        .collect()
}

/// Mean and lower nearest-rank quantiles of one period across paths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeriodSummary {
    pub mean: f64,
    pub q_low: f64,
    pub q_high: f64,
}

/// `counts[path][period]` summarized per period.
pub fn path_summary(counts: &[Vec<f64>], q_low: f64, q_high: f64) -> Result<Vec<PeriodSummary>, ForecastError> {
    let Some(first) = counts.first() else {
        return Err(ForecastError::InvalidInput("at least one path is required".into()));
    };
    let periods = first.len();
    if counts.iter().any(|c| c.len() != periods) {
        return Err(ForecastError::InvalidInput("every path needs the same periods".into()));
    }
    Ok((0..periods)
        .map(|j| {
            let mut v: Vec<f64> = counts.iter().map(|c| c[j]).collect();
            v.sort_by(f64::total_cmp);
            PeriodSummary {
                mean: v.iter().sum::<f64>() / v.len() as f64,
                q_low: nearest_rank(&v, q_low),
                q_high: nearest_rank(&v, q_high),
            }
        })
        .collect())
}

/// Calls per period of `period_seconds` from `from`, for every path.
pub fn counts_per_period(paths: &[Vec<GeneratedCall>], from: f64, to: f64, period_seconds: f64) -> Vec<Vec<f64>> {
    let n = ((to - from) / period_seconds).ceil().max(0.0) as usize;
    paths
        .iter()
        .map(|calls| {
            let mut v = vec![0.0; n];
            for c in calls {
                let j = ((c.t - from) / period_seconds).floor();
                if j >= 0.0 && (j as usize) < n {
                    v[j as usize] += 1.0;
                }
            }
            v
        })
        .collect()
}

/// Expected calls per zone over `[from, to)`, summed over types.
pub fn zone_expectations(model: &IntensityModel, tp: &TimePartition, from: f64, to: f64) -> Vec<f64> {
    let (n_types, n_zones, _) = model.dims();
    let mut out = vec![0.0; n_zones];
    for (t, _, _) in tp.occurrences(from, to) {
        for c in 0..n_types {
            for (i, o) in out.iter_mut().enumerate() {
                *o += model.expected_count(c, i, t, tp);
            }
        }
    }
    out
}
