use std::cmp::Ordering;
use std::collections::BTreeMap;

use super::response::{apply_assignment, plan_assignment, response_time_estimate};
use super::{costs_tie, DispatchContext, DispatchDecision, DispatchError, DispatchState, PolicyId};
use crate::domain::StateVector;
use crate::streets::RouteError;

#[derive(Debug, Clone, Copy)]
struct Candidate {
    amb: usize,
    cost: f64,
    response: f64,
    available: bool,
    rank: u32,
}

/// Scratch copy of the dispatcher state that decisions are applied to as
/// they are made, so later choices in the same round see earlier ones.
struct Working<'c, 'a> {
    ctx: &'c DispatchContext<'a>,
    fleet: Vec<StateVector>,
    reservations: BTreeMap<usize, usize>,
    decisions: Vec<DispatchDecision>,
    now: f64,
}

impl<'c, 'a> Working<'c, 'a> {
    fn new(ctx: &'c DispatchContext<'a>, state: &DispatchState, now: f64) -> Self {
        Working {
            ctx,
            fleet: state.fleet.clone(),
            reservations: state.reservations.clone(),
            decisions: Vec::new(),
            now,
        }
    }

    fn rank(&self, amb: usize) -> u32 {
        self.ctx.amb_types.get(self.fleet[amb].amb_type).map(|a| a.rank).unwrap_or(0)
    }

    /// Candidates for `call` evaluated at `at`, with costs measured from
    /// `cost_from`. Ambulances that cannot reach the call are skipped.
    fn evaluate(
        &self,
        call: usize,
        at: f64,
        cost_from: f64,
        include: impl Fn(usize) -> bool,
    ) -> Result<Vec<Candidate>, DispatchError> {
        let c = &self.ctx.calls[call];
        let mut out = Vec::new();
        for (amb, s) in self.fleet.iter().enumerate() {
            if !include(amb) {
                continue;
            }
            let est = match response_time_estimate(s, c, at, self.ctx.router) {
                Ok(e) => e,
                Err(RouteError::Unreachable { .. }) => continue,
                Err(e) => return Err(e.into()),
            };
            let cost = self.ctx.cost.allocation_cost(s.amb_type, c.call_type, (est.arrival - cost_from).max(0.0))?;
            out.push(Candidate { amb, cost, response: est.response, available: s.is_available(at), rank: self.rank(amb) });
        }
        Ok(out)
    }

    fn commit(&mut self, amb: usize, call: usize, after_service: bool) -> Result<(), DispatchError> {
        let plan = match plan_assignment(&self.fleet[amb], &self.ctx.calls[call], self.now, self.ctx.router) {
            Ok(p) => p,
            Err(RouteError::Unreachable { .. }) => {
                self.decisions.push(DispatchDecision::Fail { call });
                return Ok(());
            }
            Err(e) => return Err(e.into()),
        };
        apply_assignment(&mut self.fleet[amb], &plan);
        self.reservations.retain(|_, c| *c != call);
        self.decisions.push(if after_service {
            DispatchDecision::DispatchAfterService { amb, call }
        } else {
            DispatchDecision::DispatchNow { amb, call }
        });
        Ok(())
    }

    fn used(&self, amb: usize) -> bool {
        self.decisions.iter().any(|d| match d {
            DispatchDecision::DispatchNow { amb: a, .. } | DispatchDecision::DispatchAfterService { amb: a, .. } => {
                *a == amb
            }
            _ => false,
        })
    }

    /// Sends `amb` to a station unless a decision already took it.
    fn park_if_unused(&mut self, amb: usize, preferred: Option<usize>) -> Result<(), DispatchError> {
        if self.used(amb) {
            return Ok(());
        }
        let d = match choose_station(self.ctx, &self.fleet[amb], self.now, preferred)? {
            Some(station) => DispatchDecision::ToStation { amb, station },
            None => DispatchDecision::Idle { amb },
        };
        self.decisions.push(d);
        Ok(())
    }
}

fn by_basic(a: &Candidate, b: &Candidate) -> Ordering {
    a.rank.cmp(&b.rank).then(a.amb.cmp(&b.amb))
}

/// Candidates whose cost ties the minimum.
fn cheapest(cands: &[Candidate]) -> Vec<Candidate> {
    let Some(min) = cands.iter().map(|c| c.cost).min_by(f64::total_cmp) else {
        return Vec::new();
    };
    cands.iter().filter(|c| costs_tie(c.cost, min)).copied().collect()
}

fn most_basic_available(cands: &[Candidate]) -> Option<Candidate> {
    cands.iter().filter(|c| c.available).min_by(|a, b| by_basic(a, b)).copied()
}

/// Station for an ambulance that just became free: the preferred one if
/// given, its home base when configured, else the closest by travel time.
fn choose_station(
    ctx: &DispatchContext<'_>,
    s: &StateVector,
    now: f64,
    preferred: Option<usize>,
) -> Result<Option<usize>, DispatchError> {
    let by_id = |id: usize| ctx.stations.iter().position(|st| st.id == id);
    if let Some(i) = preferred.and_then(by_id) {
        return Ok(Some(ctx.stations[i].id));
    }
    if ctx.use_home_base {
        if let Some(i) = s.home_base.and_then(by_id) {
            return Ok(Some(ctx.stations[i].id));
        }
    }
    let mut best: Option<(f64, usize)> = None;
    for st in ctx.stations {
        let t = match ctx.router.travel_time(s.loc_f, st.loc, now) {
            Ok(t) => t,
            Err(RouteError::Unreachable { .. }) => continue,
            Err(e) => return Err(e.into()),
        };
        if best.is_none_or(|(bt, bid)| t < bt || (t == bt && st.id < bid)) {
            best = Some((t, st.id));
        }
    }
    Ok(best.map(|(_, id)| id))
}

/// Queue order used by GHP1: decreasing `theta * (now - t_c)`, then
/// earlier arrival, then lower call id.
pub fn ghp1_order(ctx: &DispatchContext<'_>, queue: &[usize], now: f64) -> Vec<usize> {
    let urgency = |i: usize| {
        let c = &ctx.calls[i];
        ctx.cost.theta_of(c.call_type).unwrap_or(1.0) * (now - c.t_c).max(0.0)
    };
    let mut out = queue.to_vec();
    out.sort_by(|&a, &b| {
        urgency(b)
            .total_cmp(&urgency(a))
            .then(ctx.calls[a].t_c.total_cmp(&ctx.calls[b].t_c))
            .then(ctx.calls[a].id.cmp(&ctx.calls[b].id))
    });
    out
}

fn arrival_order(ctx: &DispatchContext<'_>, calls: &mut [usize]) {
    calls.sort_by(|&a, &b| {
        ctx.calls[a].t_c.total_cmp(&ctx.calls[b].t_c).then(ctx.calls[a].id.cmp(&ctx.calls[b].id))
    });
}

/// Decisions taken when call `call` arrives at `now`.
pub fn policy_on_call(
    policy: PolicyId,
    ctx: &DispatchContext<'_>,
    state: &DispatchState,
    call: usize,
    now: f64,
) -> Result<Vec<DispatchDecision>, DispatchError> {
    if state.fleet.is_empty() {
        return Err(DispatchError::EmptyFleet);
    }
    let mut w = Working::new(ctx, state, now);
    match policy {
        PolicyId::CA => {
            let cands = w.evaluate(call, now, ctx.calls[call].t_c, |_| true)?;
            let free: Vec<Candidate> = cands.iter().filter(|c| c.available).copied().collect();
            let fastest = free.iter().map(|c| c.response).min_by(f64::total_cmp);
            let best = fastest.and_then(|r| {
                free.iter().filter(|c| costs_tie(c.response, r)).min_by(|a, b| by_basic(a, b)).copied()
            });
            if cands.is_empty() {
                w.decisions.push(DispatchDecision::Fail { call });
            } else if let Some(best) = best {
                w.commit(best.amb, call, false)?;
            } else {
                w.decisions.push(DispatchDecision::Queue { call });
            }
        }
        PolicyId::BM => {
            let cands = w.evaluate(call, now, ctx.calls[call].t_c, |_| true)?;
            let best = cheapest(&cands);
            if let Some(c) = most_basic_available(&best) {
                w.commit(c.amb, call, false)?;
            } else if let Some(c) = best.iter().min_by(|a, b| by_basic(a, b)) {
                w.commit(c.amb, call, true)?;
            } else {
                w.decisions.push(DispatchDecision::Fail { call });
            }
        }
        PolicyId::NM { window } => {
            let mut pending = state.queue.clone();
            pending.push(call);
            nm_round(&mut w, pending, window)?;
        }
        PolicyId::GHP1 => {
            let mut pending = state.queue.clone();
            pending.push(call);
            ghp1_round(&mut w, &pending)?;
        }
        PolicyId::GHP2 => {
            let mut pending = state.queue.clone();
            pending.push(call);
            ghp2_round(&mut w, pending)?;
        }
    }
    Ok(w.decisions)
}

/// Decisions taken when ambulance `amb` finishes its service at `now`.
/// `preferred_station` overrides the station choice (e.g. a base named by
/// the call just served).
pub fn policy_on_free(
    policy: PolicyId,
    ctx: &DispatchContext<'_>,
    state: &DispatchState,
    amb: usize,
    now: f64,
    preferred_station: Option<usize>,
) -> Result<Vec<DispatchDecision>, DispatchError> {
    if state.fleet.is_empty() {
        return Err(DispatchError::EmptyFleet);
    }
    let mut w = Working::new(ctx, state, now);
    match policy {
        PolicyId::CA | PolicyId::BM => {
            let mut queue = state.queue.clone();
            arrival_order(ctx, &mut queue);
            for call in queue {
                match response_time_estimate(&w.fleet[amb], &ctx.calls[call], now, ctx.router) {
                    Ok(_) => {
                        w.commit(amb, call, false)?;
                        break;
                    }
                    Err(RouteError::Unreachable { .. }) => continue,
                    Err(e) => return Err(e.into()),
                }
            }
        }
        PolicyId::NM { window } => nm_round(&mut w, state.queue.clone(), window)?,
        PolicyId::GHP1 => ghp1_round(&mut w, &state.queue)?,
        PolicyId::GHP2 => ghp2_round(&mut w, state.queue.clone())?,
    }
    w.park_if_unused(amb, preferred_station)?;
    Ok(w.decisions)
}

/// Keeps `call` waiting. Queue decisions are idempotent for the engine.
fn keep_queued(w: &mut Working<'_, '_>, call: usize) {
    w.decisions.push(DispatchDecision::Queue { call });
}

fn nm_round(w: &mut Working<'_, '_>, mut pending: Vec<usize>, window: f64) -> Result<(), DispatchError> {
    let ctx = w.ctx;
    let now = w.now;
    arrival_order(ctx, &mut pending);

    for i in pending {
        let reserved_for = w.reservations.iter().find(|(_, c)| **c == i).map(|(a, _)| *a);
        if let Some(j) = reserved_for {
            if w.fleet[j].is_available(now) {
                w.commit(j, i, false)?;
            } else {
                keep_queued(w, i);
            }
            continue;
        }
        let t_c = ctx.calls[i].t_c;
        let reserved: Vec<usize> = w.reservations.keys().copied().collect();
        let cands = w.evaluate(i, now, t_c, |a| !reserved.contains(&a))?;
        if cands.is_empty() {
            let any = w.evaluate(i, now, t_c, |_| true)?;
            if any.is_empty() {
                w.decisions.push(DispatchDecision::Fail { call: i });
            } else {
                keep_queued(w, i);
            }
            continue;
        }
        let s = cheapest(&cands);
        if let Some(c) = most_basic_available(&s) {
            w.commit(c.amb, i, false)?;
            continue;
        }
        // Every best ambulance is busy: look at calls arriving before each
        // one frees up, within the window.
        let horizon_end = now + window;
        let mut best_sets: BTreeMap<usize, Vec<Candidate>> = BTreeMap::new();
        let mut t_of: Vec<(Candidate, Vec<(usize, f64)>)> = Vec::new();
        for j in &s {
            let limit = w.fleet[j.amb].t_f.min(horizon_end);
            let mut tj = Vec::new();
            for (k, call) in ctx.calls.iter().enumerate() {
                if !(call.t_c > now && call.t_c <= limit) {
                    continue;
                }
                if let std::collections::btree_map::Entry::Vacant(e) = best_sets.entry(k) {
                    let ck = w.evaluate(k, call.t_c, call.t_c, |a| !reserved.contains(&a))?;
                    e.insert(cheapest(&ck));
                }
                if let Some(m) = best_sets[&k].iter().find(|m| m.amb == j.amb) {
                    tj.push((k, m.cost));
                }
            }
            t_of.push((*j, tj));
        }
        // j is good when no call in T(j) would cost it less than call i.
        let good = t_of
            .iter()
            .filter(|(j, tj)| tj.iter().all(|(_, ck)| j.cost <= *ck || costs_tie(j.cost, *ck)))
            .map(|(j, _)| *j)
            .min_by(by_basic);
        if let Some(j) = good {
            w.commit(j.amb, i, true)?;
        } else {
            for (j, tj) in &t_of {
                let k = tj
                    .iter()
                    .min_by(|a, b| {
                        a.1.total_cmp(&b.1)
                            .then(ctx.calls[a.0].t_c.total_cmp(&ctx.calls[b.0].t_c))
                            .then(ctx.calls[a.0].id.cmp(&ctx.calls[b.0].id))
                    })
                    .map(|(k, _)| *k)
                    .expect("non-good ambulance has a future call");
                w.reservations.insert(j.amb, k);
                w.decisions.push(DispatchDecision::Reserve { amb: j.amb, call: k });
            }
            keep_queued(w, i);
        }
    }
    Ok(())
}

fn ghp1_round(w: &mut Working<'_, '_>, pending: &[usize]) -> Result<(), DispatchError> {
    let ctx = w.ctx;
    let order = ghp1_order(ctx, pending, w.now);
    for i in order {
        let cands = w.evaluate(i, w.now, ctx.calls[i].t_c, |_| true)?;
        if cands.is_empty() {
            w.decisions.push(DispatchDecision::Fail { call: i });
            continue;
        }
        match most_basic_available(&cheapest(&cands)) {
            Some(c) => w.commit(c.amb, i, false)?,
            None => keep_queued(w, i),
        }
    }
    Ok(())
}

fn ghp2_round(w: &mut Working<'_, '_>, mut pending: Vec<usize>) -> Result<(), DispatchError> {
    let ctx = w.ctx;
    let now = w.now;
    let mut deferred = Vec::new();
    while !pending.is_empty() {
        let mut scored = Vec::with_capacity(pending.len());
        let mut failed = Vec::new();
        for &i in &pending {
            let best = cheapest(&w.evaluate(i, now, now, |_| true)?);
            match best.first() {
                Some(b) => scored.push((i, b.cost, best)),
                None => failed.push(i),
            }
        }
        for i in failed {
            w.decisions.push(DispatchDecision::Fail { call: i });
            pending.retain(|c| *c != i);
        }
        let Some(top) = scored.iter().map(|s| s.1).max_by(f64::total_cmp) else {
            continue;
        };
        let mut heads: Vec<&(usize, f64, Vec<Candidate>)> =
            scored.iter().filter(|s| costs_tie(s.1, top)).collect();
        heads.sort_by_key(|s| ctx.calls[s.0].id);
        let servable = heads.iter().find_map(|s| most_basic_available(&s.2).map(|c| (s.0, c)));
        match servable {
            Some((i, c)) => {
                w.commit(c.amb, i, false)?;
                pending.retain(|x| *x != i);
            }
            None => {
                let i = heads[0].0;
                deferred.push(i);
                pending.retain(|x| *x != i);
            }
        }
    }
    for i in deferred {
        keep_queued(w, i);
    }
    Ok(())
}
