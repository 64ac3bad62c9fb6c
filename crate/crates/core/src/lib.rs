//! Discrete-event simulation of ambulance fleets.

pub mod dispatch;
pub mod domain;
pub mod forecast;
pub mod geo;
pub mod io;
pub mod metrics;
pub mod sim;
pub mod streets;
pub mod trace;
