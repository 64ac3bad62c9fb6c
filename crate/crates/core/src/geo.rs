//! Spherical geometry on a sphere of radius 6371 km.
//!
//! Points are exchanged as (latitude, longitude) in degrees; all internal
//! computations run on Cartesian kilometres and radians. Timestamps and
//! durations are seconds, speeds are km/h.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean earth radius, km.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

/// Relative tolerance for accepting a Cartesian point as lying on the sphere.
pub const ON_SPHERE_TOLERANCE: f64 = 1e-6;

/// Below this value of `sin(alpha)` a geodesic is considered degenerate.
pub const DEGENERATE_SIN: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum GeoError {
    #[error("latitude {0} outside [-90, 90]")]
    InvalidLatitude(f64),
    #[error("longitude {0} outside (-180, 180]")]
    InvalidLongitude(f64),
    #[error("point is off the sphere (relative radius error {0:e})")]
    OffSphere(f64),
    #[error("speed must be positive, got {0}")]
    InvalidSpeed(f64),
    #[error("endpoints are antipodal; the great circle is not unique")]
    AmbiguousGeodesic,
}

/// A location given by latitude and longitude in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        let p = GeoPoint { lat, lon };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        if !(-90.0..=90.0).contains(&self.lat) {
            return Err(GeoError::InvalidLatitude(self.lat));
        }
        if !(self.lon > -180.0 && self.lon <= 180.0) {
            return Err(GeoError::InvalidLongitude(self.lon));
        }
        Ok(())
    }

    pub fn to_cartesian(self) -> Point3 {
        to_cartesian(self)
    }
}

/// Cartesian coordinates in km, origin at the centre of the earth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    fn sub(self, o: Point3) -> Point3 {
        Point3 { x: self.x - o.x, y: self.y - o.y, z: self.z - o.z }
    }

    fn scaled_sum(a: f64, p: Point3, b: f64, q: Point3) -> Point3 {
        Point3 { x: a * p.x + b * q.x, y: a * p.y + b * q.y, z: a * p.z + b * q.z }
    }
}

/// Physical constants used by the travel model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarthConstants {
    pub radius_km: f64,
    pub speed_kmh: f64,
}

impl EarthConstants {
    pub fn with_speed(speed_kmh: f64) -> Result<Self, GeoError> {
        check_speed(speed_kmh)?;
        Ok(EarthConstants { radius_km: EARTH_RADIUS_KM, speed_kmh })
    }
}

fn check_speed(v: f64) -> Result<(), GeoError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(GeoError::InvalidSpeed(v))
    }
}

pub fn to_cartesian(p: GeoPoint) -> Point3 {
    let lat = p.lat.to_radians();
    let lon = p.lon.to_radians();
    Point3 {
        x: EARTH_RADIUS_KM * lat.cos() * lon.cos(),
        y: EARTH_RADIUS_KM * lat.cos() * lon.sin(),
        z: EARTH_RADIUS_KM * lat.sin(),
    }
}

/// Converts a point on the sphere back to latitude/longitude.
///
/// Uses the two-argument arctangent, which coincides with
/// `asin(z/R)` and `±acos(x/sqrt(R²-z²))` (sign of `y`) on the sphere but
/// stays accurate near the poles and the prime meridian. At a pole the
/// longitude is reported as 0.
pub fn from_cartesian(p: Point3) -> Result<GeoPoint, GeoError> {
    let norm = p.norm();
    let rel = (norm - EARTH_RADIUS_KM).abs() / EARTH_RADIUS_KM;
    if !(rel <= ON_SPHERE_TOLERANCE) {
        return Err(GeoError::OffSphere(rel));
    }
    let horizontal = (p.x * p.x + p.y * p.y).sqrt();
    let lat = p.z.atan2(horizontal).to_degrees();
    if (p.z.abs() - norm).abs() <= 1e-9 * norm || horizontal == 0.0 {
        return Ok(GeoPoint { lat: lat.clamp(-90.0, 90.0), lon: 0.0 });
    }
    let mut lon = p.y.atan2(p.x).to_degrees();
    if lon <= -180.0 {
        lon = 180.0;
    }
    Ok(GeoPoint { lat: lat.clamp(-90.0, 90.0), lon })
}

/// Angle between the two position vectors, radians in `[0, pi]`.
pub fn central_angle(a: GeoPoint, b: GeoPoint) -> f64 {
    chord_angle(to_cartesian(a), to_cartesian(b))
}

fn chord_angle(p1: Point3, p2: Point3) -> f64 {
    let ratio = (p2.sub(p1).norm() / (2.0 * EARTH_RADIUS_KM)).min(1.0);
    2.0 * ratio.asin()
}

/// Great-circle distance in km.
pub fn distance_km(a: GeoPoint, b: GeoPoint) -> f64 {
    EARTH_RADIUS_KM * central_angle(a, b)
}

/// Seconds needed to cover the great circle from `a` to `b` at `speed_kmh`.
///
/// `_t0` is the departure time; the default travel model is time invariant.
pub fn travel_time_gc(a: GeoPoint, b: GeoPoint, _t0: f64, speed_kmh: f64) -> Result<f64, GeoError> {
    check_speed(speed_kmh)?;
    Ok(distance_km(a, b) / speed_kmh * 3600.0)
}

/// Position at time `t` of a vehicle that leaves `a` at `t0` and follows the
/// great circle towards `b` at constant `speed_kmh`.
///
/// The swept angle is clamped to `[0, alpha]`, so any `t` at or past the
/// arrival instant yields `b` and any `t <= t0` yields `a`.
pub fn position_between(
    a: GeoPoint,
    b: GeoPoint,
    t0: f64,
    t: f64,
    speed_kmh: f64,
) -> Result<GeoPoint, GeoError> {
    check_speed(speed_kmh)?;
    let p1 = to_cartesian(a);
    let p2 = to_cartesian(b);
    let alpha = chord_angle(p1, p2);
    if alpha == 0.0 {
        return Ok(a);
    }
    let sin_alpha = alpha.sin();
    if sin_alpha <= DEGENERATE_SIN && alpha > std::f64::consts::FRAC_PI_2 {
        return Err(GeoError::AmbiguousGeodesic);
    }
    let swept = (speed_kmh / 3600.0) * (t - t0) / EARTH_RADIUS_KM;
    let alpha0 = swept.clamp(0.0, alpha);
    if alpha0 <= 0.0 {
        return Ok(a);
    }
    if alpha0 >= alpha {
        return Ok(b);
    }
    if sin_alpha <= DEGENERATE_SIN {
        // Coincident within rounding; no meaningful interior point.
        return Ok(if alpha0 < alpha / 2.0 { a } else { b });
    }
    let op = interpolate_on_arc(p1, p2, alpha, alpha0);
    from_cartesian(op)
}

/// `(sin(alpha - alpha0) * P1 + sin(alpha0) * P2) / sin(alpha)`.
pub fn interpolate_on_arc(p1: Point3, p2: Point3, alpha: f64, alpha0: f64) -> Point3 {
    let s = alpha.sin();
    Point3::scaled_sum((alpha - alpha0).sin() / s, p1, alpha0.sin() / s, p2)
}

/// Point at fraction `s` of the geodesic from `a` to `b` (by angle).
pub fn fraction_along(a: GeoPoint, b: GeoPoint, s: f64) -> Result<GeoPoint, GeoError> {
    let p1 = to_cartesian(a);
    let p2 = to_cartesian(b);
    let alpha = chord_angle(p1, p2);
    if alpha == 0.0 {
        return Ok(a);
    }
    if alpha.sin() <= DEGENERATE_SIN {
        if alpha > std::f64::consts::FRAC_PI_2 {
            return Err(GeoError::AmbiguousGeodesic);
        }
        return Ok(if s < 0.5 { a } else { b });
    }
    let s = s.clamp(0.0, 1.0);
    if s == 0.0 {
        return Ok(a);
    }
    if s == 1.0 {
        return Ok(b);
    }
    from_cartesian(interpolate_on_arc(p1, p2, alpha, s * alpha))
}
