//! EMS data templates: stations, hospitals, ambulances and historical calls.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{content_lines, field, parse_err, point, IoError};
use crate::domain::{Priority, Site};
use crate::forecast::ObservedCall;
use crate::geo::{central_angle, GeoPoint};
use crate::sim::FleetUnit;

/// `<id> <lat> <lon>` per line; used for stations and hospitals.
pub fn parse_sites(text: &str) -> Result<Vec<Site>, IoError> {
    const F: &str = "sites";
    let mut out: Vec<Site> = Vec::new();
    for (line, l) in content_lines(text) {
        let mut t = l.split_whitespace();
        let id: usize = field(t.next(), F, line, "id")?;
        let lat = field(t.next(), F, line, "latitude")?;
        let lon = field(t.next(), F, line, "longitude")?;
        if t.next().is_some() {
            return Err(parse_err(F, line, "trailing fields"));
        }
        if out.iter().any(|s| s.id == id) {
            return Err(parse_err(F, line, format!("duplicate id {id}")));
        }
        out.push(Site { id, loc: point(lat, lon, F, line)? });
    }
    Ok(out)
}

pub fn write_sites(sites: &[Site]) -> String {
    let mut s = String::new();
    for site in sites {
        let _ = writeln!(s, "{} {} {}", site.id, site.loc.lat, site.loc.lon);
    }
    s
}

/// `<id> <lat> <lon> <amb_type> [home_base]`: the starting location
/// (snapped to the nearest station), the ambulance type and an optional
/// fixed home base.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmbulanceEntry {
    pub id: usize,
    pub loc: GeoPoint,
    pub amb_type: usize,
    pub home_base: Option<usize>,
}

impl AmbulanceEntry {
    pub fn to_fleet_unit(&self, stations: &[Site]) -> Option<FleetUnit> {
        let start = stations.iter().min_by(|a, b| {
            central_angle(a.loc, self.loc).total_cmp(&central_angle(b.loc, self.loc)).then(a.id.cmp(&b.id))
        })?;
        Some(FleetUnit { amb_type: self.amb_type, station: start.id, home_base: self.home_base })
    }
}

pub fn parse_ambulances(text: &str) -> Result<Vec<AmbulanceEntry>, IoError> {
    const F: &str = "ambulances";
    let mut out: Vec<AmbulanceEntry> = Vec::new();
    for (line, l) in content_lines(text) {
        let mut t = l.split_whitespace();
        let id: usize = field(t.next(), F, line, "id")?;
        let lat = field(t.next(), F, line, "latitude")?;
        let lon = field(t.next(), F, line, "longitude")?;
        let amb_type = field(t.next(), F, line, "ambulance type")?;
        let home_base = match t.next() {
            Some(tok) => Some(field(Some(tok), F, line, "home base")?),
            None => None,
        };
        if t.next().is_some() {
            return Err(parse_err(F, line, "trailing fields"));
        }
        if out.iter().any(|a| a.id == id) {
            return Err(parse_err(F, line, format!("duplicate id {id}")));
        }
        out.push(AmbulanceEntry { id, loc: point(lat, lon, F, line)?, amb_type, home_base });
    }
    Ok(out)
}

pub fn write_ambulances(entries: &[AmbulanceEntry]) -> String {
    let mut s = String::new();
    for a in entries {
        let _ = write!(s, "{} {} {} {}", a.id, a.loc.lat, a.loc.lon, a.amb_type);
        if let Some(h) = a.home_base {
            let _ = write!(s, " {h}");
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Gender {
    F,
    M,
}

impl FromStr for Gender {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "F" => Ok(Gender::F),
            "M" => Ok(Gender::M),
            _ => Err(()),
        }
    }
}

/// A historical emergency call with the attributes the data charts filter on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoricalRecord {
    pub t: f64,
    pub loc: GeoPoint,
    pub call_type: usize,
    pub priority: Priority,
    pub age: Option<u32>,
    pub gender: Option<Gender>,
    pub hospital: Option<usize>,
    pub district: Option<usize>,
}

impl HistoricalRecord {
    pub fn observed(&self) -> ObservedCall {
        ObservedCall { t: self.t, loc: self.loc, call_type: self.call_type }
    }
}

fn optional<T: FromStr>(tok: Option<&str>, line: usize, what: &str) -> Result<Option<T>, IoError> {
    match tok {
        None => Err(parse_err("historical", line, format!("missing {what}"))),
        Some("-") => Ok(None),
        Some(s) => s.parse().map(Some).map_err(|_| parse_err("historical", line, format!("bad {what} '{s}'"))),
    }
}

fn dash<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "-".into())
}

/// `<epoch> <lat> <lon> <type> <priority> <age> <gender> <hospital>
/// <district>` with `-` for unknown attributes.
pub fn parse_historical(text: &str) -> Result<Vec<HistoricalRecord>, IoError> {
    const F: &str = "historical";
    content_lines(text)
        .map(|(line, l)| {
            let mut t = l.split_whitespace();
            let time: f64 = field(t.next(), F, line, "time")?;
            if !time.is_finite() {
                return Err(parse_err(F, line, "time must be finite"));
            }
            let lat = field(t.next(), F, line, "latitude")?;
            let lon = field(t.next(), F, line, "longitude")?;
            let r = HistoricalRecord {
                t: time,
                loc: point(lat, lon, F, line)?,
                call_type: field(t.next(), F, line, "type")?,
                priority: field(t.next(), F, line, "priority")?,
                age: optional(t.next(), line, "age")?,
                gender: optional(t.next(), line, "gender")?,
                hospital: optional(t.next(), line, "hospital")?,
                district: optional(t.next(), line, "district")?,
            };
            if t.next().is_some() {
                return Err(parse_err(F, line, "trailing fields"));
            }
            Ok(r)
        })
        .collect()
}

pub fn write_historical(records: &[HistoricalRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let gender = r.gender.map(|g| format!("{g:?}"));
        let _ = writeln!(
            s,
            "{} {} {} {} {} {} {} {} {}",
            r.t,
            r.loc.lat,
            r.loc.lon,
            r.call_type,
            r.priority,
            dash(r.age),
            dash(gender),
            dash(r.hospital),
            dash(r.district)
        );
    }
    s
}
