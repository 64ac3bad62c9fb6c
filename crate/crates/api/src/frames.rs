//! Playback frames: fleet positions on the fixed time grid, open calls and
//! the remaining route of every moving ambulance.

use emsim::domain::{Target, TripLog, TripType};
use emsim::geo::GeoPoint;
use emsim::sim::{call_phase, CallView, SimOutput};
use emsim::streets::Router;
use emsim::trace::discretize_log;
use serde::{Deserialize, Serialize};

use crate::error::ApiError;

pub const MAX_FRAMES: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameAmbulance {
    pub id: usize,
    pub ride_type: u8,
    pub position: GeoPoint,
    pub destination_kind: String,
    pub destination: i64,
    /// Remaining route to the end of the current trip; empty when parked.
    pub future_path: Vec<GeoPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub t: f64,
    pub ambulances: Vec<FrameAmbulance>,
    pub calls: Vec<CallView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramesPayload {
    pub scenario: u64,
    pub policy: String,
    pub t_step: f64,
    pub from: f64,
    pub to: f64,
    pub frames: Vec<Frame>,
}

fn kind(t: Target) -> &'static str {
    match t {
        Target::None => "none",
        Target::Base(_) => "base",
        Target::Call(_) => "call",
        Target::Hospital(_) => "hospital",
        Target::Cleaning(_) => "cleaning",
    }
}

fn moving(t: TripType) -> bool {
    matches!(t, TripType::TO_SCENE | TripType::TO_HOSPITAL | TripType::TO_CLEANING | TripType::TO_STATION)
}

/// Segment the discretization samples `t` in: the first one ending at or
/// after `t`.
fn bracketing_segment(log: &TripLog, t: f64) -> Option<usize> {
    let n = log.types.len();
    if n == 0 {
        return None;
    }
    Some(log.times[1..].partition_point(|&x| x < t).min(n - 1))
}

/// Grid instants `k * t_step` inside `[from, to]`, clipped to the run window.
pub fn grid(out: &SimOutput, t_step: f64, from: Option<f64>, to: Option<f64>) -> Result<(f64, f64, Vec<f64>), ApiError> {
    if !(t_step > 0.0 && t_step.is_finite()) {
        return Err(ApiError::BadRequest("t_step must be positive".into()));
    }
    let (from, to) = (from.unwrap_or(out.start), to.unwrap_or(out.end));
    if !(from.is_finite() && to.is_finite()) || from > to {
        return Err(ApiError::BadRequest("expected from <= to".into()));
    }
    let (lo, hi) = (from.max(out.start), to.min(out.end));
    if lo > hi {
        return Ok((from, to, Vec::new()));
    }
    let (k0, k1) = ((lo / t_step).ceil(), (hi / t_step).floor());
    let n = (k1 - k0 + 1.0).max(0.0);
    if n > MAX_FRAMES as f64 {
        return Err(ApiError::BadRequest(format!("more than {MAX_FRAMES} frames requested")));
    }
    Ok((from, to, (0..n as u64).map(|i| (k0 + i as f64) * t_step).collect()))
}

pub fn frames(out: &SimOutput, router: &dyn Router, t_step: f64, from: Option<f64>, to: Option<f64>) -> Result<FramesPayload, ApiError> {
    let (from, to, times) = grid(out, t_step, from, to)?;
    let mut rides = Vec::with_capacity(out.ambulances.len());
    for a in &out.ambulances {
        rides.push(discretize_log(&a.log, t_step, out.speed_kmh).map_err(|e| ApiError::Internal(e.to_string()))?);
    }
    let mut frames = Vec::with_capacity(times.len());
    for &t in &times {
        let mut ambulances = Vec::with_capacity(rides.len());
        for (id, (ride, a)) in rides.iter().zip(&out.ambulances).enumerate() {
            let Ok(j) = ride.times.binary_search_by(|x| x.total_cmp(&t)) else { continue };
            let (position, ride_type) = (ride.rides[j], ride.types[j]);
            let seg = bracketing_segment(&a.log, t);
            let target = seg.map_or(Target::None, |s| a.log.targets[s]);
            let mut future_path = Vec::new();
            if let Some(s) = seg.filter(|_| moving(ride_type)) {
                let end = a.log.trips[s + 1];
                if end != position {
                    future_path = match router.waypoints(position, end, t) {
                        Ok(w) => w.into_iter().map(|(p, _)| p).collect(),
                        Err(_) => vec![position, end],
                    };
                }
            }
            ambulances.push(FrameAmbulance {
                id,
                ride_type: ride_type.code(),
                position,
                destination_kind: kind(target).to_string(),
                destination: target.index(),
                future_path,
            });
        }
        let calls = out
            .calls
            .iter()
            .zip(&out.records)
            .filter_map(|(c, r)| call_phase(c, r, t).map(|phase| CallView { call_id: c.id, loc: c.loc, priority: c.priority, phase }))
            .collect();
        frames.push(Frame { t, ambulances, calls });
    }
    Ok(FramesPayload { scenario: out.scenario, policy: out.label().to_string(), t_step, from, to, frames })
}
