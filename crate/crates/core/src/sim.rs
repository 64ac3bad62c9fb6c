//! Discrete-event engine: call arrivals, service completions, station
//! returns, and the trip histories they produce.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dispatch::{
    apply_assignment, plan_assignment, policy_on_call, policy_on_free, send_to_station, CostModel, DispatchContext,
    DispatchDecision, DispatchError, DispatchState, PolicyId,
};
use crate::domain::{
    AmbulanceState, AmbulanceType, CallRecord, CallSpec, CallType, EmergencyCall, Priority, Scenario, ServiceClass,
    Site, StateVector, Target, TripLog, TripType, FAR_FUTURE,
};
use crate::geo::{self, GeoError, GeoPoint};
use crate::streets::{RouteError, Router};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("time {t} outside the simulated window [{start}, {end}]")]
    OutOfRange { t: f64, start: f64, end: f64 },
    #[error(transparent)]
    Dispatch(#[from] DispatchError),
    #[error(transparent)]
    Route(#[from] RouteError),
    #[error(transparent)]
    Geo(#[from] GeoError),
}

/// Lognormal duration in seconds given its median; `sigma = 0` is constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DurationDist {
    pub median: f64,
    pub sigma: f64,
}

impl DurationDist {
    pub const fn fixed(seconds: f64) -> Self {
        DurationDist { median: seconds, sigma: 0.0 }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        // Always consume one draw so streams stay aligned across settings.
        let z: f64 = rng.random();
        if self.sigma == 0.0 || self.median == 0.0 {
            return self.median;
        }
        let d = LogNormal::new(self.median.ln(), self.sigma).expect("validated parameters");
        let mut local = ChaCha8Rng::seed_from_u64(z.to_bits());
        d.sample(&mut local)
    }

    fn validate(&self, what: &str) -> Result<(), SimError> {
        if !(self.median >= 0.0 && self.median.is_finite() && self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(SimError::InvalidConfig(format!("{what}: median and sigma must be finite and >= 0")));
        }
        Ok(())
    }
}

/// One ambulance of the fleet: its type, starting station and home base
/// (station ids).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FleetUnit {
    pub amb_type: usize,
    pub station: usize,
    pub home_base: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Simulated window, epoch seconds.
    pub start: f64,
    pub end: f64,
    pub call_types: Vec<CallType>,
    pub amb_types: Vec<AmbulanceType>,
    pub fleet: Vec<FleetUnit>,
    pub stations: Vec<Site>,
    pub hospitals: Vec<Site>,
    /// Falls back to `stations` when empty.
    pub cleaning_stations: Vec<Site>,
    pub use_home_base: bool,
    pub cost: CostModel,
    pub speed_kmh: f64,
    pub time_on_scene: DurationDist,
    pub time_at_hospital: DurationDist,
    pub cleaning_time: DurationDist,
    /// Probabilities of C1..C4 for generated calls.
    pub class_probs: [f64; 4],
    pub seed: u64,
    pub n_scenarios: usize,
}

impl SimConfig {
    /// A small working configuration: default types, one station, unit fleet.
    pub fn example(start: f64, end: f64) -> Self {
        let call_types = CallType::defaults();
        let amb_types = AmbulanceType::defaults();
        let cost = CostModel::without_mismatch(&call_types, amb_types.len());
        SimConfig {
            start,
            end,
            call_types,
            amb_types,
            fleet: vec![FleetUnit { amb_type: 2, station: 0, home_base: Some(0) }],
            stations: vec![Site { id: 0, loc: GeoPoint { lat: -22.9, lon: -43.2 } }],
            hospitals: vec![Site { id: 0, loc: GeoPoint { lat: -22.91, lon: -43.18 } }],
            cleaning_stations: Vec::new(),
            use_home_base: false,
            cost,
            speed_kmh: 60.0,
            time_on_scene: DurationDist::fixed(900.0),
            time_at_hospital: DurationDist::fixed(1200.0),
            cleaning_time: DurationDist::fixed(1200.0),
            class_probs: [0.25; 4],
            seed: 1,
            n_scenarios: 1,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.to_string()));
        if !(self.start.is_finite() && self.end.is_finite() && self.end > self.start) {
            return bad("the window must satisfy start < end");
        }
        if self.fleet.is_empty() {
            return bad("the fleet is empty");
        }
        if self.stations.is_empty() {
            return bad("at least one station is required");
        }
        if !(self.speed_kmh > 0.0 && self.speed_kmh.is_finite()) {
            return bad("speed must be positive");
        }
        for site in self.stations.iter().chain(&self.hospitals).chain(&self.cleaning_stations) {
            if site.loc.validate().is_err() {
                return bad("invalid site location");
            }
        }
        for u in &self.fleet {
            if u.amb_type >= self.amb_types.len() {
                return bad("fleet references an unknown ambulance type");
            }
            if self.station(u.station).is_none() || u.home_base.is_some_and(|h| self.station(h).is_none()) {
                return bad("fleet references an unknown station");
            }
        }
        if self.cost.theta.len() != self.call_types.len() || self.cost.mismatch.len() != self.amb_types.len() {
            return bad("cost model dimensions do not match the configured types");
        }
        CostModel::new(self.cost.theta.clone(), self.cost.mismatch.clone())?;
        self.time_on_scene.validate("time_on_scene")?;
        self.time_at_hospital.validate("time_at_hospital")?;
        self.cleaning_time.validate("cleaning_time")?;
        if self.class_probs.iter().any(|p| !(*p >= 0.0 && p.is_finite())) || self.class_probs.iter().sum::<f64>() <= 0.0
        {
            return bad("class probabilities must be nonnegative with a positive sum");
        }
        Ok(())
    }

    pub fn station(&self, id: usize) -> Option<Site> {
        self.stations.iter().find(|s| s.id == id).copied()
    }

    fn cleaning_sites(&self) -> &[Site] {
        if self.cleaning_stations.is_empty() {
            &self.stations
        } else {
            &self.cleaning_stations
        }
    }

    /// Draws a service class from `class_probs`.
    pub fn sample_class<R: Rng + ?Sized>(&self, rng: &mut R) -> ServiceClass {
        let total: f64 = self.class_probs.iter().sum();
        let mut u = rng.random::<f64>() * total;
        for (p, class) in self.class_probs.iter().zip(ServiceClass::ALL) {
            if u < *p {
                return class;
            }
            u -= p;
        }
        ServiceClass::C4
    }
}

/// RNG stream reserved for one scenario: identical for every policy.
pub fn scenario_rng(seed: u64, scenario: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(scenario);
    rng
}

fn nearest(sites: &[Site], p: GeoPoint) -> Option<Site> {
    sites
        .iter()
        .min_by(|a, b| geo::central_angle(a.loc, p).total_cmp(&geo::central_angle(b.loc, p)).then(a.id.cmp(&b.id)))
        .copied()
}

/// Turns scenario calls into fully specified emergencies: nearest hospital,
/// nearest cleaning station (to the hospital, or to the scene when there is
/// no hospital leg) and sampled service durations.
pub fn materialize_calls<R: Rng + ?Sized>(
    cfg: &SimConfig,
    specs: &[CallSpec],
    rng: &mut R,
) -> Result<Vec<EmergencyCall>, SimError> {
    let mut out = Vec::with_capacity(specs.len());
    for s in specs {
        let on_scene = cfg.time_on_scene.sample(rng);
        let at_hospital = cfg.time_at_hospital.sample(rng);
        let cleaning = cfg.cleaning_time.sample(rng);
        let class = s.service_class;
        let hospital = if class.needs_hospital() {
            Some(nearest(&cfg.hospitals, s.loc).ok_or_else(|| {
                SimError::InvalidConfig(format!("call {} needs a hospital but none is configured", s.id))
            })?)
        } else {
            None
        };
        let cleaning_station = if class.needs_cleaning() {
            let from = hospital.map(|h| h.loc).unwrap_or(s.loc);
            nearest(cfg.cleaning_sites(), from)
        } else {
            None
        };
        let priority = cfg.call_types.get(s.call_type).map(|c| c.priority).unwrap_or(s.priority);
        out.push(EmergencyCall {
            id: s.id,
            t_c: s.t_c,
            loc: s.loc,
            call_type: s.call_type,
            priority,
            service_class: class,
            time_on_scene: on_scene,
            hospital,
            time_at_hospital: hospital.map(|_| at_hospital),
            cleaning_station,
            cleaning_time: cleaning_station.map(|_| cleaning),
            base_after: None,
        });
    }
    out.sort_by(|a, b| a.t_c.total_cmp(&b.t_c).then(a.id.cmp(&b.id)));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum EventKind {
    CallArrival(usize),
    ServiceComplete { amb: usize, version: u64 },
    ArrivedAtStation { amb: usize, version: u64 },
}

impl EventKind {
    fn rank(&self) -> u8 {
        match self {
            EventKind::CallArrival(_) => 0,
            EventKind::ServiceComplete { .. } => 1,
            EventKind::ArrivedAtStation { .. } => 2,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    kind: EventKind,
    /// Call id or ambulance index.
    key: u64,
    seq: u64,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Event {}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then(self.kind.rank().cmp(&other.kind.rank()))
            .then(self.key.cmp(&other.key))
            .then(self.seq.cmp(&other.seq))
    }
}

/// The fleet as the dispatcher saw it right before a dispatch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub now: f64,
    pub call: usize,
    pub amb: usize,
    pub after_service: bool,
    pub fleet_before: Vec<StateVector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOutput {
    pub scenario: u64,
    pub policy: PolicyId,
    pub start: f64,
    pub end: f64,
    pub speed_kmh: f64,
    pub ambulances: Vec<AmbulanceState>,
    /// Calls inside the window, in arrival order.
    pub calls: Vec<EmergencyCall>,
    /// One record per entry of `calls`.
    pub records: Vec<CallRecord>,
    #[serde(default)]
    pub audit: Vec<AuditEntry>,
    /// Set when the run aborted; the rest of the output is then partial.
    #[serde(default)]
    pub error: Option<String>,
}

impl SimOutput {
    pub fn label(&self) -> &'static str {
        self.policy.label()
    }
}

/// Extra switches for a run.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunOptions {
    /// Record the fleet state before every dispatch.
    pub audit: bool,
}

struct Engine<'a> {
    cfg: &'a SimConfig,
    calls: &'a [EmergencyCall],
    ctx: DispatchContext<'a>,
    policy: PolicyId,
    state: DispatchState,
    logs: Vec<TripLog>,
    versions: Vec<u64>,
    last_call: Vec<Option<usize>>,
    records: Vec<Option<CallRecord>>,
    heap: BinaryHeap<Reverse<Event>>,
    seq: u64,
    audit: Option<Vec<AuditEntry>>,
}

impl<'a> Engine<'a> {
    fn push(&mut self, time: f64, kind: EventKind, key: u64) {
        self.seq += 1;
        self.heap.push(Reverse(Event { time, kind, key, seq: self.seq }));
    }

    fn blank_record(&self, call: usize) -> CallRecord {
        let c = &self.calls[call];
        CallRecord {
            call_id: c.id,
            t_c: c.t_c,
            call_type: c.call_type,
            priority: c.priority,
            theta: self.cfg.cost.theta_of(c.call_type).unwrap_or(1.0),
            waiting_on_scene: f64::NAN,
            waiting_on_scene_penalized: f64::NAN,
            waiting_to_hospital: None,
            waiting_to_hospital_penalized: None,
            serving_ambulance: None,
            allocation_cost: f64::NAN,
            dispatch_time: f64::NAN,
            case: None,
            en_route_position: None,
            failure: None,
        }
    }

    fn fail(&mut self, call: usize, why: String) {
        let mut r = self.blank_record(call);
        r.failure = Some(why);
        self.records[call] = Some(r);
        self.state.queue.retain(|c| *c != call);
        self.state.reservations.retain(|_, c| *c != call);
    }

    fn assign(&mut self, amb: usize, call: usize, now: f64, after_service: bool) -> Result<(), SimError> {
        if let Some(log) = self.audit.as_mut() {
            log.push(AuditEntry { now, call, amb, after_service, fleet_before: self.state.fleet.clone() });
        }
        let c = &self.calls[call];
        let plan = match plan_assignment(&self.state.fleet[amb], c, now, self.ctx.router) {
            Ok(p) => p,
            Err(RouteError::Unreachable { from, to }) => {
                self.fail(call, format!("unreachable: no street path between nodes {from} and {to}"));
                return Ok(());
            }
            Err(e) => return Err(e.into()),
        };
        for seg in &plan.segments {
            self.logs[amb].push(seg.kind, seg.to, seg.at, seg.target);
        }
        apply_assignment(&mut self.state.fleet[amb], &plan);
        self.versions[amb] += 1;
        let version = self.versions[amb];
        self.push(plan.service_end, EventKind::ServiceComplete { amb, version }, amb as u64);

        let sv = &self.state.fleet[amb];
        let waiting = plan.estimate.arrival - c.t_c;
        let theta = self.cfg.cost.theta_of(c.call_type).unwrap_or(1.0);
        let record = CallRecord {
            call_id: c.id,
            t_c: c.t_c,
            call_type: c.call_type,
            priority: c.priority,
            theta,
            waiting_on_scene: waiting,
            waiting_on_scene_penalized: theta * waiting,
            waiting_to_hospital: plan.waiting_to_hospital,
            waiting_to_hospital_penalized: plan.waiting_to_hospital.map(|w| theta * w),
            serving_ambulance: Some(amb),
            allocation_cost: self.cfg.cost.allocation_cost(sv.amb_type, c.call_type, waiting)?,
            dispatch_time: now,
            case: Some(plan.estimate.case),
            en_route_position: plan.estimate.en_route_position,
            failure: None,
        };
        self.records[call] = Some(record);
        self.state.queue.retain(|q| *q != call);
        self.state.reservations.retain(|_, q| *q != call);
        self.last_call[amb] = Some(call);
        Ok(())
    }

    fn apply(&mut self, decisions: Vec<DispatchDecision>, now: f64) -> Result<(), SimError> {
        for d in decisions {
            match d {
                DispatchDecision::DispatchNow { amb, call } => self.assign(amb, call, now, false)?,
                DispatchDecision::DispatchAfterService { amb, call } => self.assign(amb, call, now, true)?,
                DispatchDecision::Reserve { amb, call } => {
                    self.state.reservations.insert(amb, call);
                }
                DispatchDecision::Queue { call } => {
                    if !self.state.queue.contains(&call) {
                        self.state.queue.push(call);
                    }
                }
                DispatchDecision::ToStation { amb, station } => {
                    let site = self.cfg.station(station).ok_or_else(|| {
                        SimError::InvalidConfig(format!("decision names unknown station {station}"))
                    })?;
                    send_to_station(&mut self.state.fleet[amb], site, now, self.ctx.router)?;
                    self.versions[amb] += 1;
                    let version = self.versions[amb];
                    let t_b = self.state.fleet[amb].t_b;
                    self.push(t_b, EventKind::ArrivedAtStation { amb, version }, amb as u64);
                }
                DispatchDecision::Fail { call } => {
                    self.fail(call, "no ambulance can reach the call".into());
                }
                DispatchDecision::Idle { .. } => {}
            }
        }
        Ok(())
    }

    fn run(&mut self) -> Result<(), SimError> {
        while let Some(Reverse(ev)) = self.heap.pop() {
            let now = ev.time;
            match ev.kind {
                EventKind::CallArrival(call) => {
                    let d = policy_on_call(self.policy, &self.ctx, &self.state, call, now)?;
                    self.apply(d, now)?;
                }
                EventKind::ServiceComplete { amb, version } => {
                    if version != self.versions[amb] {
                        continue;
                    }
                    let preferred = self.last_call[amb].and_then(|c| self.calls[c].base_after).map(|s| s.id);
                    let d = policy_on_free(self.policy, &self.ctx, &self.state, amb, now, preferred)?;
                    self.apply(d, now)?;
                }
                EventKind::ArrivedAtStation { .. } => {}
            }
        }
        Ok(())
    }

    /// Closes idle tails at the end of the window and drops segments that
    /// start at or after it.
    fn finalize(&mut self) -> Result<(), SimError> {
        let end = self.cfg.end;
        for (amb, log) in self.logs.iter_mut().enumerate() {
            let s = self.state.fleet[amb];
            let target = s.base.map(Target::Base).unwrap_or(Target::None);
            if s.t_b != FAR_FUTURE && s.t_f < end {
                if s.t_b <= end {
                    if s.t_b > s.t_f || s.loc_b != s.loc_f {
                        log.push(TripType::TO_STATION, s.loc_b, s.t_b, target);
                    }
                    log.push(TripType::AT_STATION, s.loc_b, end, target);
                } else {
                    let p = geo::position_between(s.loc_f, s.loc_b, s.t_f, end, self.cfg.speed_kmh)?;
                    log.push(TripType::TO_STATION, p, end, target);
                }
            }
            log.clip(end);
        }
        Ok(())
    }
}

/// Simulates one policy on fully specified calls.
pub fn run_scenario(
    cfg: &SimConfig,
    scenario: u64,
    calls: &[EmergencyCall],
    policy: PolicyId,
    router: &dyn Router,
    opts: RunOptions,
) -> Result<SimOutput, SimError> {
    cfg.validate()?;
    let mut windowed: Vec<EmergencyCall> =
        calls.iter().filter(|c| c.t_c >= cfg.start && c.t_c < cfg.end).cloned().collect();
    windowed.sort_by(|a, b| a.t_c.total_cmp(&b.t_c).then(a.id.cmp(&b.id)));
    for c in &windowed {
        c.validate().map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        if c.call_type >= cfg.call_types.len() {
            return Err(SimError::InvalidConfig(format!("call {} has unknown type {}", c.id, c.call_type)));
        }
    }

    let mut fleet = Vec::with_capacity(cfg.fleet.len());
    let mut logs = Vec::with_capacity(cfg.fleet.len());
    for (id, u) in cfg.fleet.iter().enumerate() {
        let site = cfg.station(u.station).expect("validated station");
        fleet.push(StateVector::at_base(id, u.amb_type, site, cfg.start, u.home_base));
        logs.push(TripLog::starting_at(site.loc, cfg.start));
    }
    let n_amb = fleet.len();
    let n_calls = windowed.len();

    let mut engine = Engine {
        cfg,
        calls: &windowed,
        ctx: DispatchContext {
            calls: &windowed,
            amb_types: &cfg.amb_types,
            cost: &cfg.cost,
            router,
            stations: &cfg.stations,
            use_home_base: cfg.use_home_base,
        },
        policy,
        state: DispatchState { fleet, ..Default::default() },
        logs,
        versions: vec![0; n_amb],
        last_call: vec![None; n_amb],
        records: vec![None; n_calls],
        heap: BinaryHeap::new(),
        seq: 0,
        audit: opts.audit.then(Vec::new),
    };
    for (i, c) in windowed.iter().enumerate() {
        engine.push(c.t_c, EventKind::CallArrival(i), c.id);
    }
    engine.run()?;
    engine.finalize()?;

    let records: Vec<CallRecord> = (0..n_calls)
        .map(|i| {
            engine.records[i].clone().unwrap_or_else(|| {
                let mut r = engine.blank_record(i);
                r.failure = Some("still queued when the run ended".into());
                r
            })
        })
        .collect();
    let ambulances = engine
        .state
        .fleet
        .iter()
        .zip(engine.logs)
        .map(|(v, log)| AmbulanceState { vector: *v, log })
        .collect();
    Ok(SimOutput {
        scenario,
        policy,
        start: cfg.start,
        end: cfg.end,
        speed_kmh: cfg.speed_kmh,
        ambulances,
        calls: windowed.clone(),
        records,
        audit: engine.audit.unwrap_or_default(),
        error: None,
    })
}

/// Materializes a scenario from its dedicated RNG stream and simulates it.
pub fn simulate(
    cfg: &SimConfig,
    scenario: &Scenario,
    policy: PolicyId,
    router: &dyn Router,
    opts: RunOptions,
) -> Result<SimOutput, SimError> {
    let mut rng = scenario_rng(cfg.seed, scenario.id);
    let calls = materialize_calls(cfg, &scenario.calls, &mut rng)?;
    run_scenario(cfg, scenario.id, &calls, policy, router, opts)
}

/// Every (scenario, policy) pair, scenario-major. Each scenario's calls are
/// materialized once so all policies see the same stream. Failures are
/// returned as flagged outputs.
pub fn run_batch(cfg: &SimConfig, scenarios: &[Scenario], policies: &[PolicyId], router: &dyn Router) -> Vec<SimOutput> {
    let materialized: Vec<Result<Vec<EmergencyCall>, SimError>> = scenarios
        .iter()
        .map(|s| materialize_calls(cfg, &s.calls, &mut scenario_rng(cfg.seed, s.id)))
        .collect();
    let pairs: Vec<(usize, PolicyId)> =
        (0..scenarios.len()).flat_map(|s| policies.iter().map(move |p| (s, *p))).collect();
    pairs
        .par_iter()
        .map(|&(si, policy)| {
            let id = scenarios[si].id;
            let result = match &materialized[si] {
                Ok(calls) => run_scenario(cfg, id, calls, policy, router, RunOptions::default()),
                Err(e) => Err(e.clone()),
            };
            result.unwrap_or_else(|e| SimOutput {
                scenario: id,
                policy,
                start: cfg.start,
                end: cfg.end,
                speed_kmh: cfg.speed_kmh,
                ambulances: Vec::new(),
                calls: Vec::new(),
                records: Vec::new(),
                audit: Vec::new(),
                error: Some(e.to_string()),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallPhase {
    /// No ambulance assigned yet.
    Waiting,
    /// An ambulance is assigned and not yet on scene.
    Assigned,
    OnScene,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmbulanceView {
    pub id: usize,
    pub ride_type: TripType,
    pub position: GeoPoint,
    pub destination: Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CallView {
    pub call_id: u64,
    pub loc: GeoPoint,
    pub priority: Priority,
    pub phase: CallPhase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub t: f64,
    pub ambulances: Vec<AmbulanceView>,
    pub calls: Vec<CallView>,
}

/// Index of the segment in effect at `t`: the last one starting at or
/// before `t`. `None` for an empty history or `t` before the first node.
pub fn segment_at(log: &TripLog, t: f64) -> Option<usize> {
    let n = log.types.len();
    if n == 0 || t < log.times[0] {
        return None;
    }
    let k = log.times[..n].partition_point(|&x| x <= t);
    Some(k - 1)
}

/// Position, ride type and destination of one ambulance at `t`.
pub fn ambulance_at(log: &TripLog, t: f64, speed_kmh: f64) -> Result<(GeoPoint, TripType, Target), GeoError> {
    match segment_at(log, t) {
        Some(k) if t < log.times[k + 1] || k + 1 < log.types.len() => {
            let p = geo::position_between(log.trips[k], log.trips[k + 1], log.times[k], t, speed_kmh)?;
            Ok((p, log.types[k], log.targets[k]))
        }
        Some(k) => Ok((log.trips[k + 1], log.types[k], log.targets[k])),
        None => Ok((log.trips.first().copied().unwrap_or(GeoPoint { lat: 0.0, lon: 0.0 }), TripType::AT_STATION, Target::None)),
    }
}

/// Scene arrival and departure of a served call.
pub fn scene_interval(call: &EmergencyCall, record: &CallRecord) -> Option<(f64, f64)> {
    record.served().then(|| {
        let arrival = record.t_c + record.waiting_on_scene;
        (arrival, arrival + call.time_on_scene)
    })
}

/// Whether the call is open at `t`: arrived and the ambulance has not left
/// the scene yet.
pub fn call_phase(call: &EmergencyCall, record: &CallRecord, t: f64) -> Option<CallPhase> {
    if t < call.t_c {
        return None;
    }
    match scene_interval(call, record) {
        None => Some(CallPhase::Waiting),
        Some((arrival, departure)) => {
            if t >= departure {
                None
            } else if t >= arrival {
                Some(CallPhase::OnScene)
            } else if t >= record.dispatch_time {
                Some(CallPhase::Assigned)
            } else {
                Some(CallPhase::Waiting)
            }
        }
    }
}

/// Fleet and open calls at `t`.
pub fn snapshot(out: &SimOutput, t: f64) -> Result<Snapshot, SimError> {
    if !(t >= out.start && t <= out.end) {
        return Err(SimError::OutOfRange { t, start: out.start, end: out.end });
    }
    let mut ambulances = Vec::with_capacity(out.ambulances.len());
    for (id, a) in out.ambulances.iter().enumerate() {
        let (position, ride_type, destination) = ambulance_at(&a.log, t, out.speed_kmh)?;
        ambulances.push(AmbulanceView { id, ride_type, position, destination });
    }
    let calls = out
        .calls
        .iter()
        .zip(&out.records)
        .filter_map(|(c, r)| {
            call_phase(c, r, t).map(|phase| CallView { call_id: c.id, loc: c.loc, priority: c.priority, phase })
        })
        .collect();
    Ok(Snapshot { t, ambulances, calls })
}
