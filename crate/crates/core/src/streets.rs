//! Street graph, shortest paths and the travel-time oracle.
//!
//! Graph file format, one record per line, whitespace separated:
//!
//! ```text
//! # comment
//! N <id> <lat> <lon>
//! E <from> <to> <length_km> [speed_kmh]    directed edge
//! U <a> <b> <length_km> [speed_kmh]        undirected edge, stored both ways
//! ```

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::geo::{self, GeoError, GeoPoint};

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid graph: {0}")]
    Validation(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum RouteError {
    #[error("no street path between nodes {from} and {to}")]
    Unreachable { from: u64, to: u64 },
    #[error("street graph is empty")]
    EmptyGraph,
    #[error(transparent)]
    Geo(#[from] GeoError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub to: usize,
    pub length_km: f64,
    pub speed_kmh: Option<f64>,
}

/// Directed street graph. Node indices are dense; external ids are kept
/// for reporting and for tie-breaking during endpoint snapping.
#[derive(Debug, Clone, Default)]
pub struct StreetGraph {
    ids: Vec<u64>,
    points: Vec<GeoPoint>,
    index: BTreeMap<u64, usize>,
    adjacency: Vec<Vec<Edge>>,
}

impl StreetGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, id: u64, p: GeoPoint) -> Result<usize, GraphError> {
        p.validate().map_err(|e| GraphError::Validation(format!("node {id}: {e}")))?;
        if self.index.contains_key(&id) {
            return Err(GraphError::Validation(format!("duplicate node id {id}")));
        }
        let idx = self.ids.len();
        self.ids.push(id);
        self.points.push(p);
        self.index.insert(id, idx);
        self.adjacency.push(Vec::new());
        Ok(idx)
    }

    pub fn add_edge(
        &mut self,
        from: u64,
        to: u64,
        length_km: f64,
        speed_kmh: Option<f64>,
    ) -> Result<(), GraphError> {
        let (&a, &b) = match (self.index.get(&from), self.index.get(&to)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(GraphError::Validation(format!(
                    "edge {from}->{to} references an unknown node"
                )))
            }
        };
        if !(length_km > 0.0 && length_km.is_finite()) {
            return Err(GraphError::Validation(format!("edge {from}->{to}: length must be > 0")));
        }
        if let Some(s) = speed_kmh {
            if !(s > 0.0 && s.is_finite()) {
                return Err(GraphError::Validation(format!("edge {from}->{to}: speed must be > 0")));
            }
        }
        let direct = geo::distance_km(self.points[a], self.points[b]);
        if length_km < direct * (1.0 - 1e-6) {
            return Err(GraphError::Validation(format!(
                "edge {from}->{to}: length {length_km} km shorter than great-circle {direct} km"
            )));
        }
        self.adjacency[a].push(Edge { to: b, length_km, speed_kmh });
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.ids.len()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn node_id(&self, idx: usize) -> u64 {
        self.ids[idx]
    }

    pub fn node_point(&self, idx: usize) -> GeoPoint {
        self.points[idx]
    }

    pub fn node_index(&self, id: u64) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn edges(&self, idx: usize) -> &[Edge] {
        &self.adjacency[idx]
    }

    /// Nearest node by great-circle distance; ties go to the lowest id.
    pub fn snap(&self, p: GeoPoint) -> Option<usize> {
        let mut best: Option<(f64, usize)> = None;
        for &idx in self.index.values() {
            let d = geo::central_angle(p, self.points[idx]);
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, idx));
            }
        }
        best.map(|(_, idx)| idx)
    }

    /// Serializes the graph in the canonical text format (directed edges).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (&id, &idx) in &self.index {
            let p = self.points[idx];
            out.push_str(&format!("N {id} {} {}\n", p.lat, p.lon));
        }
        for (&id, &idx) in &self.index {
            for e in &self.adjacency[idx] {
                out.push_str(&format!("E {id} {} {}", self.ids[e.to], e.length_km));
                if let Some(s) = e.speed_kmh {
                    out.push_str(&format!(" {s}"));
                }
                out.push('\n');
            }
        }
        out
    }
}

fn parse_f64(tok: &str, line: usize, what: &str) -> Result<f64, GraphError> {
    tok.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| GraphError::Parse { line, msg: format!("invalid {what} '{tok}'") })
}

fn parse_id(tok: &str, line: usize) -> Result<u64, GraphError> {
    tok.parse::<u64>()
        .map_err(|_| GraphError::Parse { line, msg: format!("invalid node id '{tok}'") })
}

/// Parses a graph file. Nodes may appear after the edges that use them.
pub fn parse_graph(text: &str) -> Result<StreetGraph, GraphError> {
    let mut graph = StreetGraph::new();
    let mut edges = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let toks: Vec<&str> = content.split_whitespace().collect();
        match toks[0] {
            "N" => {
                if toks.len() != 4 {
                    return Err(GraphError::Parse { line, msg: "expected N <id> <lat> <lon>".into() });
                }
                let id = parse_id(toks[1], line)?;
                let lat = parse_f64(toks[2], line, "latitude")?;
                let lon = parse_f64(toks[3], line, "longitude")?;
                let p = GeoPoint::new(lat, lon)
                    .map_err(|e| GraphError::Parse { line, msg: e.to_string() })?;
                graph.add_node(id, p)?;
            }
            kind @ ("E" | "U") => {
                if toks.len() != 4 && toks.len() != 5 {
                    return Err(GraphError::Parse {
                        line,
                        msg: format!("expected {kind} <id1> <id2> <length_km> [speed_kmh]"),
                    });
                }
                let a = parse_id(toks[1], line)?;
                let b = parse_id(toks[2], line)?;
                let len = parse_f64(toks[3], line, "length")?;
                let speed = match toks.get(4) {
                    Some(t) => Some(parse_f64(t, line, "speed")?),
                    None => None,
                };
                edges.push((a, b, len, speed));
                if kind == "U" {
                    edges.push((b, a, len, speed));
                }
            }
            other => {
                return Err(GraphError::Parse { line, msg: format!("unknown record '{other}'") })
            }
        }
    }
    for (a, b, len, speed) in edges {
        graph.add_edge(a, b, len, speed)?;
    }
    Ok(graph)
}

pub fn load_graph(path: &std::path::Path) -> Result<StreetGraph, crate::io::IoError> {
    let text = std::fs::read_to_string(path)?;
    Ok(parse_graph(&text)?)
}

/// A time-minimal node sequence between two snapped endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutePlan {
    pub node_sequence: Vec<u64>,
    pub arrival_times: Vec<f64>,
    pub total_time: f64,
}

#[derive(Clone, Copy, PartialEq)]
struct Frontier {
    cost: f64,
    node: usize,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        other.cost.total_cmp(&self.cost).then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn edge_seconds(e: &Edge, speed_kmh: f64) -> f64 {
    e.length_km / e.speed_kmh.unwrap_or(speed_kmh) * 3600.0
}

/// Dijkstra between node indices; returns (node indices, cumulative seconds).
fn dijkstra(g: &StreetGraph, src: usize, dst: usize, speed_kmh: f64) -> Option<(Vec<usize>, Vec<f64>)> {
    let n = g.node_count();
    let mut dist = vec![f64::INFINITY; n];
    let mut prev = vec![usize::MAX; n];
    let mut heap = BinaryHeap::new();
    dist[src] = 0.0;
    heap.push(Frontier { cost: 0.0, node: src });
    while let Some(Frontier { cost, node }) = heap.pop() {
        if node == dst {
            break;
        }
        if cost > dist[node] {
            continue;
        }
        for e in &g.adjacency[node] {
            let next = cost + edge_seconds(e, speed_kmh);
            if next < dist[e.to] {
                dist[e.to] = next;
                prev[e.to] = node;
                heap.push(Frontier { cost: next, node: e.to });
            }
        }
    }
    if !dist[dst].is_finite() {
        return None;
    }
    let mut path = vec![dst];
    let mut cur = dst;
    while cur != src {
        cur = prev[cur];
        path.push(cur);
    }
    path.reverse();
    let times = path.iter().map(|&i| dist[i]).collect();
    Some((path, times))
}

/// Time-minimal street route from `origin` to `dest`, endpoints snapped to
/// their nearest nodes. Edge traversal time is length over the edge speed,
/// or over `speed_kmh` when the edge has none.
pub fn shortest_path(
    g: &StreetGraph,
    origin: GeoPoint,
    dest: GeoPoint,
    t0: f64,
    speed_kmh: f64,
) -> Result<RoutePlan, RouteError> {
    if !(speed_kmh > 0.0) {
        return Err(GeoError::InvalidSpeed(speed_kmh).into());
    }
    let src = g.snap(origin).ok_or(RouteError::EmptyGraph)?;
    let dst = g.snap(dest).ok_or(RouteError::EmptyGraph)?;
    let (path, offsets) = dijkstra(g, src, dst, speed_kmh)
        .ok_or(RouteError::Unreachable { from: g.node_id(src), to: g.node_id(dst) })?;
    let total_time = *offsets.last().unwrap_or(&0.0);
    Ok(RoutePlan {
        node_sequence: path.iter().map(|&i| g.node_id(i)).collect(),
        arrival_times: offsets.iter().map(|o| t0 + o).collect(),
        total_time,
    })
}

/// Travel time on the street graph when one is given and nonempty,
/// otherwise along the great circle.
pub fn travel_time(
    g: Option<&StreetGraph>,
    a: GeoPoint,
    b: GeoPoint,
    t0: f64,
    speed_kmh: f64,
) -> Result<f64, RouteError> {
    match g {
        Some(graph) if !graph.is_empty() => {
            Ok(shortest_path(graph, a, b, t0, speed_kmh)?.total_time)
        }
        _ => Ok(geo::travel_time_gc(a, b, t0, speed_kmh)?),
    }
}

/// The travel oracle used by the dispatcher and the simulator.
pub trait Router: Send + Sync {
    /// Seconds to travel from `a` to `b` departing at `t0`.
    fn travel_time(&self, a: GeoPoint, b: GeoPoint, t0: f64) -> Result<f64, RouteError>;

    /// Cruise speed used for great-circle interpolation of positions.
    fn speed_kmh(&self) -> f64;

    /// Waypoints `(location, time)` of the trip, first = `a` at `t0`, last = `b`.
    fn waypoints(&self, a: GeoPoint, b: GeoPoint, t0: f64) -> Result<Vec<(GeoPoint, f64)>, RouteError> {
        let dt = self.travel_time(a, b, t0)?;
        Ok(vec![(a, t0), (b, t0 + dt)])
    }
}

type RouteKey = (usize, usize);

/// Street-or-great-circle travel model with a route cache keyed by snapped
/// node pairs (speeds are time invariant).
pub struct TravelModel {
    graph: Option<Arc<StreetGraph>>,
    speed_kmh: f64,
    cache: Mutex<HashMap<RouteKey, Option<Arc<(Vec<usize>, Vec<f64>)>>>>,
}

impl Clone for TravelModel {
    /// Shares the graph; the route cache starts empty.
    fn clone(&self) -> Self {
        TravelModel { graph: self.graph.clone(), speed_kmh: self.speed_kmh, cache: Mutex::new(HashMap::new()) }
    }
}

impl std::fmt::Debug for TravelModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TravelModel")
            .field("graph_nodes", &self.graph.as_ref().map(|g| g.node_count()))
            .field("speed_kmh", &self.speed_kmh)
            .finish()
    }
}

impl TravelModel {
    pub fn great_circle(speed_kmh: f64) -> Result<Self, GeoError> {
        Self::new(None, speed_kmh)
    }

    pub fn new(graph: Option<Arc<StreetGraph>>, speed_kmh: f64) -> Result<Self, GeoError> {
        if !(speed_kmh > 0.0 && speed_kmh.is_finite()) {
            return Err(GeoError::InvalidSpeed(speed_kmh));
        }
        let graph = graph.filter(|g| !g.is_empty());
        Ok(TravelModel { graph, speed_kmh, cache: Mutex::new(HashMap::new()) })
    }

    pub fn graph(&self) -> Option<&StreetGraph> {
        self.graph.as_deref()
    }

    fn route(&self, g: &StreetGraph, a: GeoPoint, b: GeoPoint) -> Result<Arc<(Vec<usize>, Vec<f64>)>, RouteError> {
        let src = g.snap(a).ok_or(RouteError::EmptyGraph)?;
        let dst = g.snap(b).ok_or(RouteError::EmptyGraph)?;
        if let Some(hit) = self.cache.lock().expect("route cache poisoned").get(&(src, dst)) {
            return hit
                .clone()
                .ok_or(RouteError::Unreachable { from: g.node_id(src), to: g.node_id(dst) });
        }
        let found = dijkstra(g, src, dst, self.speed_kmh).map(Arc::new);
        self.cache
            .lock()
            .expect("route cache poisoned")
            .insert((src, dst), found.clone());
        found.ok_or(RouteError::Unreachable { from: g.node_id(src), to: g.node_id(dst) })
    }
}

impl Router for TravelModel {
    fn travel_time(&self, a: GeoPoint, b: GeoPoint, t0: f64) -> Result<f64, RouteError> {
        match &self.graph {
            Some(g) => Ok(*self.route(g, a, b)?.1.last().unwrap_or(&0.0)),
            None => Ok(geo::travel_time_gc(a, b, t0, self.speed_kmh)?),
        }
    }

    fn speed_kmh(&self) -> f64 {
        self.speed_kmh
    }

    fn waypoints(&self, a: GeoPoint, b: GeoPoint, t0: f64) -> Result<Vec<(GeoPoint, f64)>, RouteError> {
        match &self.graph {
            Some(g) => {
                let route = self.route(g, a, b)?;
                let total = *route.1.last().unwrap_or(&0.0);
                let mut pts = Vec::with_capacity(route.0.len() + 2);
                pts.push((a, t0));
                for (&node, &off) in route.0.iter().zip(&route.1) {
                    pts.push((g.node_point(node), t0 + off));
                }
                pts.push((b, t0 + total));
                Ok(pts)
            }
            None => {
                let dt = geo::travel_time_gc(a, b, t0, self.speed_kmh)?;
                Ok(vec![(a, t0), (b, t0 + dt)])
            }
        }
    }
}
