//! Allocation costs, response-time estimation and dispatch policies.

mod policies;
mod response;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{AmbulanceType, CallType, EmergencyCall, Site, StateVector};
use crate::streets::{RouteError, Router};

pub use policies::{ghp1_order, policy_on_call, policy_on_free};
pub use response::{
    apply_assignment, plan_assignment, response_time_estimate, send_to_station, Assignment, ResponseEstimate,
    Segment,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DispatchError {
    #[error("duration must be nonnegative, got {0}")]
    InvalidDuration(f64),
    #[error("no cost entry for ambulance type {amb_type} and call type {call_type}")]
    UnknownTypePair { amb_type: usize, call_type: usize },
    #[error("the fleet is empty")]
    EmptyFleet,
    #[error("invalid cost model: {0}")]
    InvalidCostModel(String),
    #[error("unknown policy '{0}'")]
    UnknownPolicy(String),
    #[error(transparent)]
    Route(#[from] RouteError),
}

/// Linear urgency penalty `theta * t`.
pub fn penalization(t: f64, c: &CallType) -> Result<f64, DispatchError> {
    if !(t >= 0.0) {
        return Err(DispatchError::InvalidDuration(t));
    }
    Ok(c.theta * t)
}

/// Urgency weights per call type and mismatch penalties per
/// (ambulance type, call type).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub theta: Vec<f64>,
    /// `mismatch[a][c]`, penalty units.
    pub mismatch: Vec<Vec<f64>>,
}

/// Mismatch penalty applied when an ambulance is less capable than a call needs.
pub const DEFAULT_MISMATCH_PENALTY: f64 = 1e4;

impl CostModel {
    pub fn new(theta: Vec<f64>, mismatch: Vec<Vec<f64>>) -> Result<Self, DispatchError> {
        if theta.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(DispatchError::InvalidCostModel("theta must be positive".into()));
        }
        for row in &mismatch {
            if row.len() != theta.len() {
                return Err(DispatchError::InvalidCostModel(
                    "every mismatch row needs one entry per call type".into(),
                ));
            }
            if row.iter().any(|m| !(*m >= 0.0 && m.is_finite())) {
                return Err(DispatchError::InvalidCostModel("mismatch entries must be finite and >= 0".into()));
            }
        }
        Ok(CostModel { theta, mismatch })
    }

    /// Zero mismatch when the ambulance rank reaches the rank a call's
    /// priority requires, `penalty` otherwise. Priority levels map onto the
    /// sorted distinct ranks (low -> most basic, high -> most advanced).
    pub fn from_types(call_types: &[CallType], amb_types: &[AmbulanceType], penalty: f64) -> Self {
        let mut ranks: Vec<u32> = amb_types.iter().map(|a| a.rank).collect();
        ranks.sort_unstable();
        ranks.dedup();
        let required = |c: &CallType| {
            let lvl = (c.priority.level() as usize).min(ranks.len().saturating_sub(1));
            ranks.get(lvl).copied().unwrap_or(0)
        };
        let mismatch = amb_types
            .iter()
            .map(|a| {
                call_types
                    .iter()
                    .map(|c| if a.rank >= required(c) { 0.0 } else { penalty })
                    .collect()
            })
            .collect();
        CostModel { theta: call_types.iter().map(|c| c.theta).collect(), mismatch }
    }

    pub fn without_mismatch(call_types: &[CallType], n_amb_types: usize) -> Self {
        CostModel {
            theta: call_types.iter().map(|c| c.theta).collect(),
            mismatch: vec![vec![0.0; call_types.len()]; n_amb_types],
        }
    }

    pub fn theta_of(&self, call_type: usize) -> Option<f64> {
        self.theta.get(call_type).copied()
    }

    pub fn penalization(&self, t: f64, call_type: usize) -> Result<f64, DispatchError> {
        if !(t >= 0.0) {
            return Err(DispatchError::InvalidDuration(t));
        }
        let theta = self
            .theta_of(call_type)
            .ok_or(DispatchError::UnknownTypePair { amb_type: usize::MAX, call_type })?;
        Ok(theta * t)
    }

    /// `penalization(t, c) + M[a][c]`.
    pub fn allocation_cost(&self, amb_type: usize, call_type: usize, t: f64) -> Result<f64, DispatchError> {
        let m = self
            .mismatch
            .get(amb_type)
            .and_then(|row| row.get(call_type))
            .ok_or(DispatchError::UnknownTypePair { amb_type, call_type })?;
        Ok(self.penalization(t, call_type)? + m)
    }

    /// Multiplies every weight and penalty by `k > 0`.
    pub fn scaled(&self, k: f64) -> Self {
        CostModel {
            theta: self.theta.iter().map(|t| t * k).collect(),
            mismatch: self.mismatch.iter().map(|r| r.iter().map(|m| m * k).collect()).collect(),
        }
    }
}

/// Free function form of [`CostModel::allocation_cost`].
pub fn allocation_cost(a: &AmbulanceType, c: &CallType, t: f64, m: &CostModel) -> Result<f64, DispatchError> {
    m.allocation_cost(a.id, c.id, t)
}

/// The dispatch heuristics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PolicyId {
    /// Closest available.
    CA,
    /// Best myopic.
    BM,
    /// Non-myopic with a look-ahead window, seconds.
    NM { window: f64 },
    GHP1,
    GHP2,
}

/// Default look-ahead of the non-myopic policy, seconds.
pub const DEFAULT_NM_WINDOW: f64 = 3600.0;

impl PolicyId {
    pub fn all() -> Vec<PolicyId> {
        vec![
            PolicyId::CA,
            PolicyId::BM,
            PolicyId::NM { window: DEFAULT_NM_WINDOW },
            PolicyId::GHP1,
            PolicyId::GHP2,
        ]
    }

    pub fn label(&self) -> &'static str {
        match self {
            PolicyId::CA => "CA",
            PolicyId::BM => "BM",
            PolicyId::NM { .. } => "NM",
            PolicyId::GHP1 => "GHP1",
            PolicyId::GHP2 => "GHP2",
        }
    }
}

impl fmt::Display for PolicyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for PolicyId {
    type Err = DispatchError;

    /// `CA`, `BM`, `GHP1`, `GHP2`, `NM` or `NM:<window seconds>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let upper = s.trim().to_ascii_uppercase();
        match upper.as_str() {
            "CA" => Ok(PolicyId::CA),
            "BM" => Ok(PolicyId::BM),
            "GHP1" => Ok(PolicyId::GHP1),
            "GHP2" => Ok(PolicyId::GHP2),
            "NM" => Ok(PolicyId::NM { window: DEFAULT_NM_WINDOW }),
            other => {
                let window = other
                    .strip_prefix("NM:")
                    .and_then(|w| w.parse::<f64>().ok())
                    .filter(|w| *w > 0.0 && w.is_finite())
                    .ok_or_else(|| DispatchError::UnknownPolicy(s.to_string()))?;
                Ok(PolicyId::NM { window })
            }
        }
    }
}

/// What the dispatcher wants done. Call references are indices into
/// [`DispatchContext::calls`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DispatchDecision {
    DispatchNow { amb: usize, call: usize },
    /// The ambulance is busy; it drives to the call once its service ends.
    DispatchAfterService { amb: usize, call: usize },
    /// Hold the ambulance for a call that has not arrived yet.
    Reserve { amb: usize, call: usize },
    Queue { call: usize },
    ToStation { amb: usize, station: usize },
    /// No ambulance can reach the call.
    Fail { call: usize },
    Idle { amb: usize },
}

/// Read-only inputs shared by every decision of a run.
pub struct DispatchContext<'a> {
    pub calls: &'a [EmergencyCall],
    pub amb_types: &'a [AmbulanceType],
    pub cost: &'a CostModel,
    pub router: &'a dyn Router,
    pub stations: &'a [Site],
    pub use_home_base: bool,
}

/// Mutable dispatcher state: fleet vectors, queued calls (arrival order)
/// and look-ahead reservations (ambulance -> call).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DispatchState {
    pub fleet: Vec<StateVector>,
    pub queue: Vec<usize>,
    pub reservations: BTreeMap<usize, usize>,
}

/// Relative tolerance under which two costs count as tied.
pub const COST_TIE_TOLERANCE: f64 = 1e-9;

pub(crate) fn costs_tie(a: f64, b: f64) -> bool {
    (a - b).abs() <= COST_TIE_TOLERANCE * a.abs().max(b.abs())
}
