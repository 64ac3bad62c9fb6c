//! Calls, ambulances, trips and the taxonomies shared by every module.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::GeoPoint;

/// Marker for "not heading to or waiting at a base".
pub const FAR_FUTURE: f64 = f64::MAX;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DomainError {
    #[error("unknown priority '{0}'")]
    UnknownPriority(String),
    #[error("unknown service class '{0}'")]
    UnknownServiceClass(String),
    #[error("trip type {0} outside 1..=8")]
    InvalidTripType(u8),
    #[error("call {call}: {reason}")]
    InvalidCall { call: u64, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Priority {
    Low,
    Intermediate,
    High,
}

impl Priority {
    pub const ALL: [Priority; 3] = [Priority::Low, Priority::Intermediate, Priority::High];

    /// Default urgency weight: 1, 2 and 4.
    pub fn default_theta(self) -> f64 {
        match self {
            Priority::Low => 1.0,
            Priority::Intermediate => 2.0,
            Priority::High => 4.0,
        }
    }

    pub fn level(self) -> u32 {
        self as u32
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Priority::Low => "low",
            Priority::Intermediate => "intermediate",
            Priority::High => "high",
        }
    }
}

impl fmt::Display for Priority {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Priority {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "low" | "0" => Ok(Priority::Low),
            "intermediate" | "1" => Ok(Priority::Intermediate),
            "high" | "2" => Ok(Priority::High),
            _ => Err(DomainError::UnknownPriority(s.to_string())),
        }
    }
}

/// An emergency type with its urgency weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallType {
    pub id: usize,
    pub label: String,
    pub priority: Priority,
    pub theta: f64,
}

impl CallType {
    pub fn new(id: usize, label: impl Into<String>, priority: Priority) -> Self {
        CallType { id, label: label.into(), priority, theta: priority.default_theta() }
    }

    /// One call type per priority level, ids 0..3, default weights.
    pub fn defaults() -> Vec<CallType> {
        Priority::ALL
            .iter()
            .enumerate()
            .map(|(i, p)| CallType::new(i, p.as_str(), *p))
            .collect()
    }
}

/// Ambulance capability class; higher rank means more advanced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AmbulanceType {
    pub id: usize,
    pub label: String,
    pub rank: u32,
}

impl AmbulanceType {
    /// BLS, ILS and ALS with ranks 0, 1, 2.
    pub fn defaults() -> Vec<AmbulanceType> {
        ["BLS", "ILS", "ALS"]
            .iter()
            .enumerate()
            .map(|(i, l)| AmbulanceType { id: i, label: l.to_string(), rank: i as u32 })
            .collect()
    }
}

/// Which of hospital transport and cleaning-station visit a call needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ServiceClass {
    C1,
    C2,
    C3,
    C4,
}

impl ServiceClass {
    pub const ALL: [ServiceClass; 4] = [ServiceClass::C1, ServiceClass::C2, ServiceClass::C3, ServiceClass::C4];

    pub fn needs_hospital(self) -> bool {
        matches!(self, ServiceClass::C1 | ServiceClass::C2)
    }

    pub fn needs_cleaning(self) -> bool {
        matches!(self, ServiceClass::C1 | ServiceClass::C3)
    }

    /// Trip types of a complete service, starting with the drive to the scene.
    pub fn trip_pattern(self) -> &'static [u8] {
        match self {
            ServiceClass::C1 => &[2, 3, 4, 5, 6, 7],
            ServiceClass::C2 => &[2, 3, 4, 5],
            ServiceClass::C3 => &[2, 3, 6, 7],
            ServiceClass::C4 => &[2, 3],
        }
    }
}

impl fmt::Display for ServiceClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for ServiceClass {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "C1" => Ok(ServiceClass::C1),
            "C2" => Ok(ServiceClass::C2),
            "C3" => Ok(ServiceClass::C3),
            "C4" => Ok(ServiceClass::C4),
            _ => Err(DomainError::UnknownServiceClass(s.to_string())),
        }
    }
}

/// A fixed location with an index into its list (station, hospital, ...).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Site {
    pub id: usize,
    pub loc: GeoPoint,
}

/// One emergency with everything needed to serve it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmergencyCall {
    pub id: u64,
    pub t_c: f64,
    pub loc: GeoPoint,
    pub call_type: usize,
    pub priority: Priority,
    pub service_class: ServiceClass,
    pub time_on_scene: f64,
    pub hospital: Option<Site>,
    pub time_at_hospital: Option<f64>,
    pub cleaning_station: Option<Site>,
    pub cleaning_time: Option<f64>,
    pub base_after: Option<Site>,
}

impl EmergencyCall {
    pub fn validate(&self) -> Result<(), DomainError> {
        let bad = |reason: &str| DomainError::InvalidCall { call: self.id, reason: reason.to_string() };
        if self.loc.validate().is_err() {
            return Err(bad("invalid location"));
        }
        let hosp = self.hospital.is_some() && self.time_at_hospital.is_some();
        let hosp_any = self.hospital.is_some() || self.time_at_hospital.is_some();
        if self.service_class.needs_hospital() != hosp || hosp != hosp_any {
            return Err(bad("hospital fields must be present exactly for C1 and C2"));
        }
        let clean = self.cleaning_station.is_some() && self.cleaning_time.is_some();
        let clean_any = self.cleaning_station.is_some() || self.cleaning_time.is_some();
        if self.service_class.needs_cleaning() != clean || clean != clean_any {
            return Err(bad("cleaning fields must be present exactly for C1 and C3"));
        }
        let durations = [Some(self.time_on_scene), self.time_at_hospital, self.cleaning_time];
        if durations.iter().flatten().any(|d| !(*d >= 0.0 && d.is_finite())) {
            return Err(bad("durations must be finite and nonnegative"));
        }
        Ok(())
    }
}

/// Activity code of a trip segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct TripType(u8);

impl TripType {
    pub const AT_STATION: TripType = TripType(1);
    pub const TO_SCENE: TripType = TripType(2);
    pub const ON_SCENE: TripType = TripType(3);
    pub const TO_HOSPITAL: TripType = TripType(4);
    pub const AT_HOSPITAL: TripType = TripType(5);
    pub const TO_CLEANING: TripType = TripType(6);
    pub const CLEANING: TripType = TripType(7);
    pub const TO_STATION: TripType = TripType(8);

    pub fn new(code: u8) -> Result<Self, DomainError> {
        if (1..=8).contains(&code) {
            Ok(TripType(code))
        } else {
            Err(DomainError::InvalidTripType(code))
        }
    }

    pub fn code(self) -> u8 {
        self.0
    }

    /// Whether the ambulance changes location during this trip.
    pub fn is_moving(self) -> bool {
        matches!(self.0, 2 | 4 | 6 | 8)
    }

    /// Whether a patient is on board.
    pub fn carries_patient(self) -> bool {
        self.0 == 4
    }
}

impl TryFrom<u8> for TripType {
    type Error = DomainError;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        TripType::new(v)
    }
}

impl From<TripType> for u8 {
    fn from(t: TripType) -> u8 {
        t.0
    }
}

/// Where a trip segment leads, used for reporting destinations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Target {
    None,
    Base(usize),
    Call(u64),
    Hospital(usize),
    Cleaning(usize),
}

impl Target {
    /// Numeric destination index as written to trajectory files.
    pub fn index(self) -> i64 {
        match self {
            Target::None => -1,
            Target::Base(i) | Target::Hospital(i) | Target::Cleaning(i) => i as i64,
            Target::Call(c) => c as i64,
        }
    }
}

/// The dispatcher-facing state vector of one ambulance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub id: usize,
    pub amb_type: usize,
    /// Completion time of the current service, or of the last one.
    pub t_f: f64,
    pub loc_f: GeoPoint,
    /// Arrival time at the base it waits at or drives to; [`FAR_FUTURE`] otherwise.
    pub t_b: f64,
    pub loc_b: GeoPoint,
    /// Base the ambulance is heading to or waiting at.
    pub base: Option<usize>,
    pub home_base: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Availability {
    AtStation,
    EnRouteToStation,
    Busy,
}

impl StateVector {
    /// A unit waiting at `base` since `since`.
    pub fn at_base(id: usize, amb_type: usize, base: Site, since: f64, home_base: Option<usize>) -> Self {
        StateVector {
            id,
            amb_type,
            t_f: since,
            loc_f: base.loc,
            t_b: since,
            loc_b: base.loc,
            base: Some(base.id),
            home_base,
        }
    }

    pub fn availability(&self, now: f64) -> Availability {
        if now < self.t_f {
            Availability::Busy
        } else if self.t_b <= now {
            Availability::AtStation
        } else {
            Availability::EnRouteToStation
        }
    }

    pub fn is_available(&self, now: f64) -> bool {
        self.availability(now) != Availability::Busy
    }
}

pub fn availability(s: &StateVector, now: f64) -> Availability {
    s.availability(now)
}

/// Node list of an ambulance's history: segment `k` runs from node `k` to
/// node `k + 1` with type `types[k]` and destination `targets[k]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TripLog {
    pub trips: Vec<GeoPoint>,
    pub times: Vec<f64>,
    pub types: Vec<TripType>,
    pub targets: Vec<Target>,
}

impl TripLog {
    pub fn starting_at(loc: GeoPoint, t: f64) -> Self {
        TripLog { trips: vec![loc], times: vec![t], types: Vec::new(), targets: Vec::new() }
    }

    pub fn last_node(&self) -> Option<(GeoPoint, f64)> {
        Some((*self.trips.last()?, *self.times.last()?))
    }

    pub fn push(&mut self, kind: TripType, to: GeoPoint, at: f64, target: Target) {
        self.types.push(kind);
        self.targets.push(target);
        self.trips.push(to);
        self.times.push(at);
    }

    pub fn segment_count(&self) -> usize {
        self.types.len()
    }

    /// Drops every segment that starts at or after `end`.
    pub fn clip(&mut self, end: f64) {
        let keep = self.times.iter().take(self.types.len()).take_while(|&&t| t < end).count();
        self.types.truncate(keep);
        self.targets.truncate(keep);
        self.trips.truncate(keep + 1);
        self.times.truncate(keep + 1);
    }
}

/// An ambulance: its state vector plus its recorded trips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbulanceState {
    pub vector: StateVector,
    pub log: TripLog,
}

impl AmbulanceState {
    pub fn availability(&self, now: f64) -> Availability {
        self.vector.availability(now)
    }
}

/// Outcome of serving one call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub call_id: u64,
    pub t_c: f64,
    pub call_type: usize,
    pub priority: Priority,
    pub theta: f64,
    #[serde(with = "nan_as_null")]
    pub waiting_on_scene: f64,
    #[serde(with = "nan_as_null")]
    pub waiting_on_scene_penalized: f64,
    pub waiting_to_hospital: Option<f64>,
    pub waiting_to_hospital_penalized: Option<f64>,
    pub serving_ambulance: Option<usize>,
    #[serde(with = "nan_as_null")]
    pub allocation_cost: f64,
    #[serde(with = "nan_as_null")]
    pub dispatch_time: f64,
    pub case: Option<ResponseCase>,
    pub en_route_position: Option<GeoPoint>,
    pub failure: Option<String>,
}

/// NaN (not applicable) is written as JSON `null` and read back as NaN.
mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else {
            s.serialize_some(v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

impl CallRecord {
    pub fn served(&self) -> bool {
        self.serving_ambulance.is_some()
    }
}

/// Situation of the ambulance when it was selected for a call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResponseCase {
    /// Waiting at a station.
    A,
    /// Driving back to a station after a service.
    B,
    /// Still busy with a previous service.
    C,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripViolation {
    pub index: usize,
    pub reason: String,
}

/// Checks array lengths, time ordering and the trip-type automaton.
///
/// A service runs 2,3 then one of the class tails (4,5,6,7 / 4,5 / 6,7 /
/// nothing). Between services the ambulance may wait (1) or drive to a
/// station (8), or go straight to its next scene (2). The history may stop
/// anywhere.
pub fn validate_trip_sequence(log: &TripLog) -> Vec<TripViolation> {
    let mut out = Vec::new();
    if log.trips.len() != log.times.len() {
        out.push(TripViolation { index: 0, reason: "trips and times differ in length".into() });
        return out;
    }
    if !log.trips.is_empty() && log.types.len() + 1 != log.trips.len() {
        out.push(TripViolation { index: 0, reason: "expected one type per segment".into() });
        return out;
    }
    if log.targets.len() != log.types.len() {
        out.push(TripViolation { index: 0, reason: "targets and types differ in length".into() });
        return out;
    }
    for (i, w) in log.times.windows(2).enumerate() {
        if !(w[0] <= w[1]) {
            out.push(TripViolation { index: i + 1, reason: format!("time decreases: {} -> {}", w[0], w[1]) });
        }
    }
    let mut prev: Option<u8> = None;
    for (i, t) in log.types.iter().enumerate() {
        let code = t.code();
        let ok = match prev {
            None => matches!(code, 1 | 2 | 8),
            Some(p) => allowed_after(p, code),
        };
        if !ok {
            out.push(TripViolation {
                index: i,
                reason: match prev {
                    Some(p) => format!("trip type {code} cannot follow {p}"),
                    None => format!("history cannot start with trip type {code}"),
                },
            });
        }
        prev = Some(code);
    }
    out
}

fn allowed_after(prev: u8, next: u8) -> bool {
    let between_services = matches!(next, 1 | 2 | 8);
    match prev {
        1 => next == 2,
        8 => matches!(next, 1 | 2),
        2 => next == 3,
        3 => matches!(next, 4 | 6) || between_services,
        4 => next == 5,
        5 => next == 6 || between_services,
        6 => next == 7,
        7 => between_services,
        _ => false,
    }
}

/// A call as listed in a scenario file, before service durations and
/// destinations are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallSpec {
    pub id: u64,
    pub t_c: f64,
    pub loc: GeoPoint,
    pub call_type: usize,
    pub priority: Priority,
    pub service_class: ServiceClass,
}

/// One sample path of emergencies.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: u64,
    pub calls: Vec<CallSpec>,
}
