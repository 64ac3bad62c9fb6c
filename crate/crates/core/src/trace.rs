//! Fixed-step discretization of trip histories.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{TripLog, TripType};
use crate::geo::{self, GeoError, GeoPoint};
use crate::streets::{RouteError, Router};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TraceError {
    #[error("t_step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("malformed trip arrays: {0}")]
    Malformed(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Route(#[from] RouteError),
}

/// Samples of one ambulance every `t_step` seconds on the absolute grid.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiscretizedRide {
    pub rides: Vec<GeoPoint>,
    pub times: Vec<f64>,
    pub types: Vec<TripType>,
    pub t_step: f64,
}

impl DiscretizedRide {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

fn check(trips: &[GeoPoint], times: &[f64], types: &[TripType], t_step: f64) -> Result<(), TraceError> {
    if !(t_step > 0.0 && t_step.is_finite()) {
        return Err(TraceError::InvalidStep(t_step));
    }
    if trips.len() != times.len() {
        return Err(TraceError::Malformed("trips and times differ in length".into()));
    }
    if !trips.is_empty() && types.len() + 1 != trips.len() {
        return Err(TraceError::Malformed("expected one type per segment".into()));
    }
    if times.windows(2).any(|w| w[1] < w[0]) {
        return Err(TraceError::Malformed("times decrease".into()));
    }
    Ok(())
}

/// Positions every `t_step` seconds along a trip history.
///
/// Grid instants are absolute multiples of `t_step`. The first node is
/// sampled only when it sits on the grid; afterwards every grid instant up
/// to the last node is sampled inside the segment that brackets it (the
/// earlier one at shared nodes), moving at `speed_kmh` along the great
/// circle. Segments that fall entirely between two grid instants are
/// skipped.
pub fn discretize(
    trips: &[GeoPoint],
    times: &[f64],
    types: &[TripType],
    t_step: f64,
    speed_kmh: f64,
) -> Result<DiscretizedRide, TraceError> {
    check(trips, times, types, t_step)?;
    let mut out = DiscretizedRide { t_step, ..Default::default() };
    let n = trips.len();
    if n < 2 {
        return Ok(out);
    }
    let grid = |k: i64| k as f64 * t_step;
    let mut t_prev = times[0];
    let mut t_next = times[1];
    // Index of the grid instant last reached.
    let mut k = (t_prev / t_step).floor() as i64;
    if grid(k) == t_prev {
        out.rides.push(trips[0]);
        out.types.push(types[0]);
        out.times.push(t_prev);
    }
    let mut i = 0;
    while i < n - 1 {
        while grid(k + 1) <= t_next {
            let t = grid(k + 1);
            out.rides.push(geo::position_between(trips[i], trips[i + 1], t_prev, t, speed_kmh)?);
            out.times.push(t);
            out.types.push(types[i]);
            k += 1;
        }
        if i + 2 == n {
            i += 1;
        } else {
            loop {
                i += 1;
                if i + 1 >= n || grid(k + 1) <= times[i + 1] {
                    break;
                }
            }
            if i < n - 1 {
                t_prev = times[i];
                t_next = times[i + 1];
            }
        }
    }
    Ok(out)
}

/// [`discretize`] applied to a [`TripLog`].
pub fn discretize_log(log: &TripLog, t_step: f64, speed_kmh: f64) -> Result<DiscretizedRide, TraceError> {
    discretize(&log.trips, &log.times, &log.types, t_step, speed_kmh)
}

/// Replaces every moving segment by the street route the router follows,
/// so positions are interpolated between consecutive street nodes.
/// Intermediate node times come from the route; the segment end time is
/// kept as recorded.
pub fn expand_along_streets(log: &TripLog, router: &dyn Router) -> Result<TripLog, TraceError> {
    let Some((&first, &t0)) = log.trips.first().zip(log.times.first()) else {
        return Ok(log.clone());
    };
    let mut out = TripLog::starting_at(first, t0);
    for k in 0..log.types.len() {
        let (a, b) = (log.trips[k], log.trips[k + 1]);
        let (ta, tb) = (log.times[k], log.times[k + 1]);
        if log.types[k].is_moving() && a != b {
            let pts = router.waypoints(a, b, ta)?;
            for &(p, t) in pts.iter().skip(1).take(pts.len().saturating_sub(2)) {
                if t < tb && p != *out.trips.last().expect("nonempty") {
                    out.push(log.types[k], p, t.max(*out.times.last().expect("nonempty")), log.targets[k]);
                }
            }
        }
        out.push(log.types[k], b, tb, log.targets[k]);
    }
    Ok(out)
}
