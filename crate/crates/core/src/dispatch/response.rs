use serde::{Deserialize, Serialize};

use crate::domain::{EmergencyCall, ResponseCase, Site, StateVector, Target, TripType, FAR_FUTURE};
use crate::geo::{self, GeoPoint};
use crate::streets::{RouteError, Router};

/// Where and when an ambulance would start driving to a call.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponseEstimate {
    pub case: ResponseCase,
    pub depart_time: f64,
    pub depart_loc: GeoPoint,
    /// Current position of an ambulance caught on its way to a station.
    pub en_route_position: Option<GeoPoint>,
    pub arrival: f64,
    /// Seconds from the decision instant to arrival on scene.
    pub response: f64,
}

/// Response time of ambulance `s` to `call` if selected at `now`.
///
/// * at a station: travel from the station, leaving now;
/// * driving back to a station: travel from the current great-circle
///   position, leaving now;
/// * busy: remaining service time plus travel from where the service ends.
pub fn response_time_estimate(
    s: &StateVector,
    call: &EmergencyCall,
    now: f64,
    router: &dyn Router,
) -> Result<ResponseEstimate, RouteError> {
    let (case, depart_time, depart_loc, en_route_position) = if now < s.t_f || s.t_b == FAR_FUTURE {
        (ResponseCase::C, s.t_f.max(now), s.loc_f, None)
    } else if s.t_b <= now {
        (ResponseCase::A, now, s.loc_b, None)
    } else {
        let p = geo::position_between(s.loc_f, s.loc_b, s.t_f, now, router.speed_kmh())?;
        (ResponseCase::B, now, p, Some(p))
    };
    let arrival = depart_time + router.travel_time(depart_loc, call.loc, depart_time)?;
    Ok(ResponseEstimate { case, depart_time, depart_loc, en_route_position, arrival, response: arrival - now })
}

/// One appended trip: type, end location, end time, destination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: TripType,
    pub to: GeoPoint,
    pub at: f64,
    pub target: Target,
}

/// Full effect of selecting an ambulance for a call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub estimate: ResponseEstimate,
    /// Closing idle or return-drive segments, then the service itself.
    pub segments: Vec<Segment>,
    pub waiting_to_hospital: Option<f64>,
    pub service_end: f64,
    pub service_end_loc: GeoPoint,
}

/// Builds the trips an ambulance performs when it is selected for `call`
/// at `now`, following the class-of-service pattern of the call.
pub fn plan_assignment(
    s: &StateVector,
    call: &EmergencyCall,
    now: f64,
    router: &dyn Router,
) -> Result<Assignment, RouteError> {
    let estimate = response_time_estimate(s, call, now, router)?;
    let base_target = s.base.map(Target::Base).unwrap_or(Target::None);
    let mut segments = Vec::with_capacity(9);
    match estimate.case {
        ResponseCase::A => {
            if s.t_b > s.t_f || s.loc_b != s.loc_f {
                segments.push(Segment { kind: TripType::TO_STATION, to: s.loc_b, at: s.t_b, target: base_target });
            }
            segments.push(Segment { kind: TripType::AT_STATION, to: s.loc_b, at: now, target: base_target });
        }
        ResponseCase::B => {
            let p = estimate.en_route_position.expect("case B carries a position");
            segments.push(Segment { kind: TripType::TO_STATION, to: p, at: now, target: base_target });
        }
        ResponseCase::C => {}
    }
    let here = Target::Call(call.id);
    let mut t = estimate.arrival;
    segments.push(Segment { kind: TripType::TO_SCENE, to: call.loc, at: t, target: here });
    t += call.time_on_scene;
    segments.push(Segment { kind: TripType::ON_SCENE, to: call.loc, at: t, target: here });
    let mut loc = call.loc;
    let mut waiting_to_hospital = None;
    if let (Some(h), Some(stay)) = (call.hospital, call.time_at_hospital) {
        let drive = router.travel_time(loc, h.loc, t)?;
        waiting_to_hospital = Some(call.time_on_scene + drive);
        t += drive;
        segments.push(Segment { kind: TripType::TO_HOSPITAL, to: h.loc, at: t, target: Target::Hospital(h.id) });
        t += stay;
        segments.push(Segment { kind: TripType::AT_HOSPITAL, to: h.loc, at: t, target: Target::Hospital(h.id) });
        loc = h.loc;
    }
    if let (Some(cs), Some(clean)) = (call.cleaning_station, call.cleaning_time) {
        let drive = router.travel_time(loc, cs.loc, t)?;
        t += drive;
        segments.push(Segment { kind: TripType::TO_CLEANING, to: cs.loc, at: t, target: Target::Cleaning(cs.id) });
        t += clean;
        segments.push(Segment { kind: TripType::CLEANING, to: cs.loc, at: t, target: Target::Cleaning(cs.id) });
        loc = cs.loc;
    }
    Ok(Assignment { estimate, segments, waiting_to_hospital, service_end: t, service_end_loc: loc })
}

/// Updates the state vector once the assignment is committed.
pub fn apply_assignment(s: &mut StateVector, a: &Assignment) {
    s.t_f = a.service_end;
    s.loc_f = a.service_end_loc;
    s.t_b = FAR_FUTURE;
    s.base = None;
}

/// Sends a freed ambulance from its current location to `station`.
pub fn send_to_station(s: &mut StateVector, station: Site, now: f64, router: &dyn Router) -> Result<(), RouteError> {
    let drive = router.travel_time(s.loc_f, station.loc, now)?;
    s.t_b = now + drive;
    s.loc_b = station.loc;
    s.base = Some(station.id);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Priority, ServiceClass};
    use crate::streets::TravelModel;

    fn gc() -> TravelModel {
        TravelModel::great_circle(60.0).unwrap()
    }

    /// Longitude offset on the equator giving `km` of great-circle distance.
    fn east_km(km: f64) -> GeoPoint {
        GeoPoint { lat: 0.0, lon: (km / crate::geo::EARTH_RADIUS_KM).to_degrees() }
    }

    fn call_at(loc: GeoPoint, t_c: f64) -> EmergencyCall {
        EmergencyCall {
            id: 1,
            t_c,
            loc,
            call_type: 0,
            priority: Priority::Low,
            service_class: ServiceClass::C4,
            time_on_scene: 300.0,
            hospital: None,
            time_at_hospital: None,
            cleaning_station: None,
            cleaning_time: None,
            base_after: None,
        }
    }

    fn base() -> Site {
        Site { id: 0, loc: GeoPoint { lat: 0.0, lon: 0.0 } }
    }

    #[test]
    fn case_a_ten_km_is_ten_minutes() {
        let s = StateVector::at_base(0, 0, base(), 0.0, None);
        let est = response_time_estimate(&s, &call_at(east_km(10.0), 500.0), 500.0, &gc()).unwrap();
        assert_eq!(est.case, ResponseCase::A);
        assert!((est.response - 600.0).abs() < 1e-9);
    }

    #[test]
    fn case_b_at_release_instant_departs_from_release_point() {
        let release = east_km(3.0);
        let mut s = StateVector::at_base(0, 0, base(), 0.0, None);
        s.t_f = 1000.0;
        s.loc_f = release;
        send_to_station(&mut s, base(), 1000.0, &gc()).unwrap();
        let call = call_at(east_km(8.0), 1000.0);
        let est = response_time_estimate(&s, &call, 1000.0, &gc()).unwrap();
        assert_eq!(est.case, ResponseCase::B);
        assert_eq!(est.en_route_position, Some(release));
        let direct = gc().travel_time(release, call.loc, 1000.0).unwrap();
        assert!((est.response - direct).abs() < 1e-9);
    }

    #[test]
    fn case_c_adds_remaining_service() {
        let mut s = StateVector::at_base(0, 0, base(), 0.0, None);
        s.t_f = 1300.0;
        s.t_b = FAR_FUTURE;
        let est = response_time_estimate(&s, &call_at(east_km(10.0), 1000.0), 1000.0, &gc()).unwrap();
        assert_eq!(est.case, ResponseCase::C);
        assert!((est.response - 900.0).abs() < 1e-9);
    }

    #[test]
    fn plan_follows_class_patterns() {
        let h = Site { id: 2, loc: east_km(5.0) };
        let cs = Site { id: 1, loc: east_km(2.0) };
        for class in ServiceClass::ALL {
            let mut call = call_at(east_km(1.0), 100.0);
            call.service_class = class;
            if class.needs_hospital() {
                call.hospital = Some(h);
                call.time_at_hospital = Some(600.0);
            }
            if class.needs_cleaning() {
                call.cleaning_station = Some(cs);
                call.cleaning_time = Some(900.0);
            }
            let s = StateVector::at_base(0, 0, base(), 0.0, None);
            let plan = plan_assignment(&s, &call, 100.0, &gc()).unwrap();
            let kinds: Vec<u8> = plan.segments.iter().map(|g| g.kind.code()).collect();
            let mut expected = vec![1u8];
            expected.extend_from_slice(class.trip_pattern());
            assert_eq!(kinds, expected, "{class:?}");
            assert_eq!(plan.waiting_to_hospital.is_some(), class.needs_hospital());
            assert_eq!(plan.service_end, plan.segments.last().unwrap().at);
        }
    }

    #[test]
    fn return_drive_closed_before_station_wait() {
        let mut s = StateVector::at_base(0, 0, base(), 0.0, None);
        s.t_f = 100.0;
        s.loc_f = east_km(1.0);
        send_to_station(&mut s, base(), 100.0, &gc()).unwrap();
        let plan = plan_assignment(&s, &call_at(east_km(4.0), 1000.0), 1000.0, &gc()).unwrap();
        let kinds: Vec<u8> = plan.segments.iter().map(|g| g.kind.code()).collect();
        assert_eq!(kinds, vec![8, 1, 2, 3]);
        assert!((plan.segments[0].at - 160.0).abs() < 1e-9);
    }
}
