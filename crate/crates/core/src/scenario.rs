//! Scenario loading, saving and synthetic grid generation.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::{
    build_network, lane_name, Direction, IntersectionSpec, LaneId, LaneSpec, MovementSpec, NetworkError,
    NetworkSpec, PhaseLayout, RoadNetwork, RoadSpec, RouteError, Turn,
};

/// Horizon over which generated demand is spread, in seconds.
pub const GENERATED_HORIZON: u32 = 3600;
/// Turning fractions at the first intersection: (left, through, right).
pub const TURN_FRACTIONS: (f64, f64, f64) = (0.2, 0.6, 0.2);

/// One scheduled trip: entry second and lane route.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trip {
    pub t: u32,
    pub route: Vec<LaneId>,
}

pub type FlowSpec = Vec<Trip>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowEntry {
    pub t: u32,
    pub route: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub network: RoadNetwork,
    pub flow: FlowSpec,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: invalid JSON at line {line}, column {column}: {message}")]
    Parse { path: String, line: usize, column: usize, message: String },
    #[error("{path}: field `{field}`: {message}")]
    Field { path: String, field: String, message: String },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("trip {index}: {source}")]
    Route { index: usize, source: RouteError },
    #[error("grid must have at least one row and column")]
    EmptyGrid,
}

impl Scenario {
    /// Validates every trip route and sorts the flow by entry time.
    pub fn new(network: RoadNetwork, mut flow: FlowSpec) -> Result<Self, ScenarioError> {
        for (index, trip) in flow.iter().enumerate() {
            network.validate_route(&trip.route).map_err(|source| ScenarioError::Route { index, source })?;
        }
        flow.sort_by_key(|t| t.t);
        Ok(Scenario { network, flow })
    }

    pub fn from_parts(spec: &NetworkSpec, entries: &[FlowEntry], layout: PhaseLayout) -> Result<Self, ScenarioError> {
        let network = build_network(spec, layout)?;
        let flow = entries
            .iter()
            .enumerate()
            .map(|(index, e)| {
                network
                    .resolve_route(&e.route)
                    .map(|route| Trip { t: e.t, route })
                    .map_err(|source| ScenarioError::Route { index, source })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Scenario::new(network, flow)
    }

    pub fn flow_entries(&self) -> Vec<FlowEntry> {
        self.flow
            .iter()
            .map(|trip| FlowEntry {
                t: trip.t,
                route: trip.route.iter().map(|&l| self.network.lane(l).name.clone()).collect(),
            })
            .collect()
    }

    pub fn roadnet_json(&self) -> String {
        serde_json::to_string_pretty(&self.network.to_spec()).expect("roadnet serializes")
    }

    pub fn flow_json(&self) -> String {
        serde_json::to_string_pretty(&self.flow_entries()).expect("flow serializes")
    }

    pub fn save(&self, roadnet: &Path, flow: &Path) -> Result<(), ScenarioError> {
        write_file(roadnet, &self.roadnet_json())?;
        write_file(flow, &self.flow_json())
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), ScenarioError> {
    fs::write(path, contents).map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })
}

fn read_file(path: &Path) -> Result<String, ScenarioError> {
    fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })
}

fn parse_with_context<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T, ScenarioError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|err| {
        let field = err.path().to_string();
        let inner = err.into_inner();
        if inner.is_syntax() || inner.is_eof() {
            ScenarioError::Parse {
                path: path.display().to_string(),
                line: inner.line(),
                column: inner.column(),
                message: inner.to_string(),
            }
        } else {
            ScenarioError::Field { path: path.display().to_string(), field, message: inner.to_string() }
        }
    })
}

/// Loads a roadnet/flow pair. Both the native schema and CityFlow-style
/// files are accepted; the format is detected per file.
pub fn load_scenario(roadnet: &Path, flow: &Path, layout: PhaseLayout) -> Result<Scenario, ScenarioError> {
    let roadnet_text = read_file(roadnet)?;
    let value: serde_json::Value = serde_json::from_str(&roadnet_text).map_err(|err| ScenarioError::Parse {
        path: roadnet.display().to_string(),
        line: err.line(),
        column: err.column(),
        message: err.to_string(),
    })?;
    let spec = if cityflow::is_cityflow_roadnet(&value) {
        let cf: cityflow::Roadnet = parse_with_context(roadnet, &roadnet_text)?;
        cityflow::to_network_spec(&cf)
    } else {
        parse_with_context::<NetworkSpec>(roadnet, &roadnet_text)?
    };
    let network = build_network(&spec, layout)?;

    let flow_text = read_file(flow)?;
    let flow_value: serde_json::Value = serde_json::from_str(&flow_text).map_err(|err| ScenarioError::Parse {
        path: flow.display().to_string(),
        line: err.line(),
        column: err.column(),
        message: err.to_string(),
    })?;
    let entries: Vec<FlowEntry> = if cityflow::is_cityflow_flow(&flow_value) {
        let cf: Vec<cityflow::FlowItem> = parse_with_context(flow, &flow_text)?;
        cityflow::expand_flow(&network, &cf)
    } else {
        parse_with_context(flow, &flow_text)?
    };
    let trips = entries
        .iter()
        .enumerate()
        .map(|(index, e)| {
            network
                .resolve_route(&e.route)
                .map(|route| Trip { t: e.t, route })
                .map_err(|source| ScenarioError::Route { index, source })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Scenario::new(network, trips)
}

// ---------------------------------------------------------------------------
// Synthetic grids
// ---------------------------------------------------------------------------

fn inter_name(r: usize, c: usize) -> String {
    format!("i_{r}_{c}")
}

fn boundary_name(r: usize, c: usize, side: Direction) -> String {
    let s = match side {
        Direction::North => 'n',
        Direction::East => 'e',
        Direction::South => 's',
        Direction::West => 'w',
    };
    format!("b_{r}_{c}_{s}")
}

fn road_name(from: &str, to: &str) -> String {
    format!("road_{from}_{to}")
}

/// Node adjacent to grid cell `(r, c)` on `side`: another intersection or a
/// boundary node. Row index grows northwards.
fn adjacent(rows: usize, cols: usize, r: usize, c: usize, side: Direction) -> (String, bool) {
    let (dr, dc): (isize, isize) = match side {
        Direction::North => (1, 0),
        Direction::East => (0, 1),
        Direction::South => (-1, 0),
        Direction::West => (0, -1),
    };
    let (nr, nc) = (r as isize + dr, c as isize + dc);
    if nr < 0 || nc < 0 || nr >= rows as isize || nc >= cols as isize {
        (boundary_name(r, c, side), false)
    } else {
        (inter_name(nr as usize, nc as usize), true)
    }
}

/// Roadnet for a `rows x cols` grid with `link_length` spacing. Roads into a
/// signalized node carry left/through/right lanes (indices 0/1/2); roads to
/// the boundary carry a single lane.
pub fn grid_network_spec(rows: usize, cols: usize, link_length: f64) -> NetworkSpec {
    let mut intersections = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            intersections.push(IntersectionSpec {
                id: inter_name(r, c),
                x: c as f64 * link_length,
                y: r as f64 * link_length,
                phases: Vec::new(),
                is_virtual: false,
            });
        }
    }
    for r in 0..rows {
        for c in 0..cols {
            for side in Direction::ALL {
                let (name, internal) = adjacent(rows, cols, r, c, side);
                if internal {
                    continue;
                }
                let (dx, dy) = match side {
                    Direction::North => (0.0, 1.0),
                    Direction::East => (1.0, 0.0),
                    Direction::South => (0.0, -1.0),
                    Direction::West => (-1.0, 0.0),
                };
                intersections.push(IntersectionSpec {
                    id: name,
                    x: (c as f64 + dx) * link_length,
                    y: (r as f64 + dy) * link_length,
                    phases: Vec::new(),
                    is_virtual: true,
                });
            }
        }
    }

    let mut roads = Vec::new();
    let mut movements = Vec::new();
    let lane = LaneSpec { length: link_length };
    for r in 0..rows {
        for c in 0..cols {
            let me = inter_name(r, c);
            for side in Direction::ALL {
                let (other, internal) = adjacent(rows, cols, r, c, side);
                // entry road from `other` into `me`; internal roads are added
                // once per direction from the receiving side
                roads.push(RoadSpec { id: road_name(&other, &me), from: other.clone(), to: me.clone(), lanes: vec![lane.clone(); 3] });
                if !internal {
                    roads.push(RoadSpec { id: road_name(&me, &other), from: me.clone(), to: other.clone(), lanes: vec![lane.clone()] });
                }
            }
        }
    }
    for r in 0..rows {
        for c in 0..cols {
            let me = inter_name(r, c);
            for approach in Direction::ALL {
                let (from, _) = adjacent(rows, cols, r, c, approach);
                let entry = road_name(&from, &me);
                for turn in Turn::ALL {
                    let (to, internal) = adjacent(rows, cols, r, c, turn.exit_side(approach));
                    let exit = road_name(&me, &to);
                    let targets = if internal { 3 } else { 1 };
                    for j in 0..targets {
                        movements.push(MovementSpec {
                            from_lane: lane_name(&entry, turn.index()),
                            to_lane: lane_name(&exit, j),
                            turn,
                        });
                    }
                }
            }
        }
    }

    let mut spec = NetworkSpec { intersections, roads, movements };
    // write the default phases explicitly so the file is self-describing
    let net = build_network(&spec, PhaseLayout::ThroughLeft).expect("generated grid is valid");
    let full = net.to_spec();
    for (dst, src) in spec.intersections.iter_mut().zip(full.intersections) {
        dst.phases = src.phases;
    }
    spec
}

/// Synthetic grid scenario with Poisson arrivals on every boundary entry road.
///
/// `demand` is the total arrival rate over all origins in vehicles per hour.
/// Each vehicle turns once at its first intersection (left/through/right
/// with [`TURN_FRACTIONS`]) and then travels straight to the boundary.
pub fn generate_grid(rows: usize, cols: usize, link_length: f64, demand: f64, seed: u64) -> Result<Scenario, ScenarioError> {
    if rows == 0 || cols == 0 {
        return Err(ScenarioError::EmptyGrid);
    }
    let spec = grid_network_spec(rows, cols, link_length);
    let network = build_network(&spec, PhaseLayout::ThroughLeft)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // boundary origins: (intersection cell, approach side)
    let mut origins = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            for side in Direction::ALL {
                if !adjacent(rows, cols, r, c, side).1 {
                    origins.push((r, c, side));
                }
            }
        }
    }
    let mut flow = Vec::new();
    if demand > 0.0 {
        let rate = demand / 3600.0 / origins.len() as f64;
        let exp = Exp::new(rate).expect("positive rate");
        for &(r, c, approach) in &origins {
            let mut t = 0.0;
            loop {
                t += exp.sample(&mut rng);
                let second = t.round();
                if second >= GENERATED_HORIZON as f64 {
                    break;
                }
                let u: f64 = rng.random();
                let turn = if u < TURN_FRACTIONS.0 {
                    Turn::Left
                } else if u < TURN_FRACTIONS.0 + TURN_FRACTIONS.1 {
                    Turn::Through
                } else {
                    Turn::Right
                };
                let route = axis_route(&network, rows, cols, r, c, approach, turn);
                flow.push(Trip { t: second as u32, route });
            }
        }
    }
    Scenario::new(network, flow)
}

fn axis_route(net: &RoadNetwork, rows: usize, cols: usize, r: usize, c: usize, approach: Direction, turn: Turn) -> Vec<LaneId> {
    let lane = |road: &str, idx: usize| net.lane_by_name(&lane_name(road, idx)).expect("generated lane exists");
    let (mut r, mut c) = (r, c);
    let mut me = inter_name(r, c);
    let (from, _) = adjacent(rows, cols, r, c, approach);
    let mut route = vec![lane(&road_name(&from, &me), turn.index())];
    let heading = turn.exit_side(approach);
    loop {
        let (next, internal) = adjacent(rows, cols, r, c, heading);
        let road = road_name(&me, &next);
        if !internal {
            route.push(lane(&road, 0));
            return route;
        }
        route.push(lane(&road, Turn::Through.index()));
        match heading {
            Direction::North => r += 1,
            Direction::South => r -= 1,
            Direction::East => c += 1,
            Direction::West => c -= 1,
        }
        me = next;
    }
}

// ---------------------------------------------------------------------------
// CityFlow-style inputs (best effort)
// ---------------------------------------------------------------------------

mod cityflow {
    use super::*;

    #[derive(Debug, Deserialize)]
    pub struct Roadnet {
        pub intersections: Vec<Intersection>,
        pub roads: Vec<Road>,
    }

    #[derive(Debug, Deserialize)]
    pub struct Point {
        pub x: f64,
        pub y: f64,
    }

    #[derive(Debug, Deserialize)]
    #[serde(rename_all = "camelCase")]
    pub struct Intersection {
        pub id: String,
        pub point: Point,
        #[serde(default, rename = "virtual")]
        pub is_virtual: bool,
        #[serde(default)]
        pub road_links: Vec<RoadLink>,
        #[serde(default)]
        pub traffic_light: Option<TrafficLight>,
    }

    #[derive(Debug, Deserialize)]
    #[serde(rename_all = "camelCase")]
    pub struct RoadLink {
        #[serde(rename = "type")]
        pub kind: String,
        pub start_road: String,
        pub end_road: String,
        #[serde(default)]
        pub lane_links: Vec<LaneLink>,
    }

    #[derive(Debug, Deserialize)]
    #[serde(rename_all = "camelCase")]
    pub struct LaneLink {
        pub start_lane_index: usize,
        pub end_lane_index: usize,
    }

    #[derive(Debug, Deserialize)]
    pub struct TrafficLight {
        #[serde(default)]
        pub lightphases: Vec<LightPhase>,
    }

    #[derive(Debug, Deserialize)]
    #[serde(rename_all = "camelCase")]
    pub struct LightPhase {
        #[serde(default)]
        pub available_road_links: Vec<usize>,
    }

    #[derive(Debug, Deserialize)]
    #[serde(rename_all = "camelCase")]
    pub struct Road {
        pub id: String,
        pub start_intersection: String,
        pub end_intersection: String,
        #[serde(default)]
        pub points: Vec<Point>,
        pub lanes: Vec<serde_json::Value>,
    }

    #[derive(Debug, Deserialize)]
    #[serde(rename_all = "camelCase")]
    pub struct FlowItem {
        pub route: Vec<String>,
        #[serde(default)]
        pub interval: Option<f64>,
        pub start_time: f64,
        #[serde(default)]
        pub end_time: Option<f64>,
    }

    pub fn is_cityflow_roadnet(v: &serde_json::Value) -> bool {
        v.get("intersections")
            .and_then(|i| i.as_array())
            .and_then(|a| a.first())
            .map(|first| first.get("roadLinks").is_some() || first.get("point").is_some())
            .unwrap_or(false)
    }

    pub fn is_cityflow_flow(v: &serde_json::Value) -> bool {
        v.as_array()
            .and_then(|a| a.first())
            .map(|first| first.get("startTime").is_some())
            .unwrap_or(false)
    }

    fn turn_of(kind: &str) -> Option<Turn> {
        match kind {
            "turn_left" => Some(Turn::Left),
            "go_straight" => Some(Turn::Through),
            "turn_right" => Some(Turn::Right),
            _ => None,
        }
    }

    pub fn to_network_spec(cf: &Roadnet) -> NetworkSpec {
        let positions: HashMap<&str, (f64, f64)> =
            cf.intersections.iter().map(|i| (i.id.as_str(), (i.point.x, i.point.y))).collect();
        let roads: Vec<RoadSpec> = cf
            .roads
            .iter()
            .map(|r| {
                let length = if r.points.len() >= 2 {
                    r.points.windows(2).map(|w| ((w[1].x - w[0].x).powi(2) + (w[1].y - w[0].y).powi(2)).sqrt()).sum()
                } else {
                    let a = positions.get(r.start_intersection.as_str()).copied().unwrap_or((0.0, 0.0));
                    let b = positions.get(r.end_intersection.as_str()).copied().unwrap_or((0.0, 0.0));
                    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
                };
                RoadSpec {
                    id: r.id.clone(),
                    from: r.start_intersection.clone(),
                    to: r.end_intersection.clone(),
                    lanes: vec![LaneSpec { length }; r.lanes.len()],
                }
            })
            .collect();

        let mut movements = Vec::new();
        let mut intersections = Vec::new();
        for inter in &cf.intersections {
            // movement indices created for each roadLink of this intersection
            let mut link_movements: Vec<Vec<usize>> = Vec::with_capacity(inter.road_links.len());
            for link in &inter.road_links {
                let mut ids = Vec::new();
                let Some(turn) = turn_of(&link.kind) else {
                    warn!("intersection {}: unsupported roadLink type `{}` ignored", inter.id, link.kind);
                    link_movements.push(ids);
                    continue;
                };
                for ll in &link.lane_links {
                    ids.push(movements.len());
                    movements.push(MovementSpec {
                        from_lane: lane_name(&link.start_road, ll.start_lane_index),
                        to_lane: lane_name(&link.end_road, ll.end_lane_index),
                        turn,
                    });
                }
                link_movements.push(ids);
            }
            let mut phases = Vec::new();
            if let Some(light) = &inter.traffic_light {
                for (p, phase) in light.lightphases.iter().enumerate() {
                    let ids: Vec<usize> = phase
                        .available_road_links
                        .iter()
                        .filter(|&&l| l < inter.road_links.len() && turn_of(&inter.road_links[l].kind) != Some(Turn::Right))
                        .flat_map(|&l| link_movements[l].iter().copied())
                        .collect();
                    if ids.is_empty() {
                        warn!("intersection {}: light phase {p} serves no signalized movement, dropped", inter.id);
                    } else {
                        phases.push(ids);
                    }
                }
            }
            intersections.push(IntersectionSpec {
                id: inter.id.clone(),
                x: inter.point.x,
                y: inter.point.y,
                phases,
                is_virtual: inter.is_virtual,
            });
        }
        NetworkSpec { intersections, roads, movements }
    }

    /// Expands CityFlow flow items into trips, inferring lanes from the road
    /// route so that each consecutive pair is joined by a movement.
    pub fn expand_flow(net: &RoadNetwork, items: &[FlowItem]) -> Vec<FlowEntry> {
        let roads: HashMap<&str, &crate::net::Road> = net.roads.iter().map(|r| (r.name.as_str(), r)).collect();
        let mut out = Vec::new();
        for (i, item) in items.iter().enumerate() {
            let Some(route) = lanes_for(net, &roads, &item.route) else {
                warn!("flow item {i}: no lane-level route for roads {:?}, skipped", item.route);
                continue;
            };
            let interval = item.interval.filter(|v| *v > 0.0).unwrap_or(f64::INFINITY);
            let end = item.end_time.unwrap_or(item.start_time).max(item.start_time);
            let mut t = item.start_time;
            while t <= end {
                out.push(FlowEntry { t: t.round().max(0.0) as u32, route: route.clone() });
                if !interval.is_finite() {
                    break;
                }
                t += interval;
            }
        }
        out
    }

    fn lanes_for(net: &RoadNetwork, roads: &HashMap<&str, &crate::net::Road>, route: &[String]) -> Option<Vec<String>> {
        let road_list: Vec<&crate::net::Road> = route.iter().map(|r| roads.get(r.as_str()).copied()).collect::<Option<_>>()?;
        let last = road_list.last()?;
        // backward pass: lanes of road i from which the rest is reachable
        let mut reachable: Vec<Vec<LaneId>> = vec![Vec::new(); road_list.len()];
        reachable[road_list.len() - 1] = last.lanes.clone();
        for i in (0..road_list.len() - 1).rev() {
            let next = reachable[i + 1].clone();
            reachable[i] = road_list[i]
                .lanes
                .iter()
                .copied()
                .filter(|&l| next.iter().any(|&n| net.link(l, n).is_some() || net.continues(l, n)))
                .collect();
            if reachable[i].is_empty() {
                return None;
            }
        }
        let mut lanes = vec![reachable[0][0]];
        for set in reachable.iter().skip(1) {
            let prev = *lanes.last()?;
            let next = set.iter().copied().find(|&n| net.link(prev, n).is_some() || net.continues(prev, n))?;
            lanes.push(next);
        }
        Some(lanes.into_iter().map(|l| net.lane(l).name.clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_by_one_demand_matches_poisson_count() {
        let sc = generate_grid(1, 1, 300.0, 600.0, 7).unwrap();
        let n = sc.flow.len() as f64;
        // Poisson with mean 600: +-3 sigma
        assert!((n - 600.0).abs() <= 3.0 * 600f64.sqrt(), "{n}");
    }

    #[test]
    fn generation_is_seeded() {
        let a = generate_grid(2, 2, 300.0, 900.0, 11).unwrap();
        let b = generate_grid(2, 2, 300.0, 900.0, 11).unwrap();
        assert_eq!(a.flow_json(), b.flow_json());
        let c = generate_grid(2, 2, 300.0, 900.0, 12).unwrap();
        assert_ne!(a.flow_json(), c.flow_json());
    }

    #[test]
    fn two_by_two_has_24_boundary_entry_lanes() {
        let sc = generate_grid(2, 2, 300.0, 600.0, 1).unwrap();
        let net = &sc.network;
        assert_eq!(net.intersections.len(), 4);
        let boundary_entries = net
            .lanes
            .iter()
            .filter(|l| l.intersection_end.is_some() && net.nodes[net.road(l.road).from.0].signal.is_none())
            .count();
        assert_eq!(boundary_entries, 24);
        for trip in &sc.flow {
            assert!(net.validate_route(&trip.route).is_ok());
        }
    }

    #[test]
    fn zero_demand_gives_empty_flow() {
        assert!(generate_grid(1, 1, 300.0, 0.0, 3).unwrap().flow.is_empty());
    }

    #[test]
    fn save_load_round_trip_is_byte_equal() {
        let dir = tempfile::tempdir().unwrap();
        let sc = generate_grid(2, 2, 300.0, 400.0, 5).unwrap();
        let (rn, fl) = (dir.path().join("roadnet.json"), dir.path().join("flow.json"));
        sc.save(&rn, &fl).unwrap();
        let loaded = load_scenario(&rn, &fl, PhaseLayout::ThroughLeft).unwrap();
        assert_eq!(loaded.roadnet_json(), fs::read_to_string(&rn).unwrap());
        assert_eq!(loaded.flow_json(), fs::read_to_string(&fl).unwrap());
        assert_eq!(loaded, sc);
    }

    #[test]
    fn malformed_json_names_field() {
        let dir = tempfile::tempdir().unwrap();
        let sc = generate_grid(1, 1, 300.0, 100.0, 5).unwrap();
        let (rn, fl) = (dir.path().join("roadnet.json"), dir.path().join("flow.json"));
        sc.save(&rn, &fl).unwrap();
        fs::write(&fl, r#"[{"t": 3, "rute": ["x"]}]"#).unwrap();
        let err = load_scenario(&rn, &fl, PhaseLayout::ThroughLeft).unwrap_err();
        assert!(err.to_string().contains("route"), "{err}");
        fs::write(&fl, r#"[{"t": 3, "route": ["x"]"#).unwrap();
        assert!(matches!(load_scenario(&rn, &fl, PhaseLayout::ThroughLeft).unwrap_err(), ScenarioError::Parse { .. }));
        fs::write(&fl, r#"[{"t": 3, "route": ["no_such_lane"]}]"#).unwrap();
        assert!(matches!(load_scenario(&rn, &fl, PhaseLayout::ThroughLeft).unwrap_err(), ScenarioError::Route { index: 0, .. }));
    }

    #[test]
    fn cityflow_files_are_mapped() {
        let dir = tempfile::tempdir().unwrap();
        let roadnet = r#"{
          "intersections": [
            {"id": "c", "point": {"x": 0, "y": 0}, "virtual": false,
             "roadLinks": [
               {"type": "go_straight", "startRoad": "w_in", "endRoad": "e_out", "laneLinks": [{"startLaneIndex": 0, "endLaneIndex": 0}]},
               {"type": "go_straight", "startRoad": "n_in", "endRoad": "s_out", "laneLinks": [{"startLaneIndex": 0, "endLaneIndex": 0}]},
               {"type": "turn_right", "startRoad": "w_in", "endRoad": "s_out", "laneLinks": [{"startLaneIndex": 1, "endLaneIndex": 0}]}
             ],
             "trafficLight": {"lightphases": [
               {"time": 5, "availableRoadLinks": [2]},
               {"time": 30, "availableRoadLinks": [0, 2]},
               {"time": 30, "availableRoadLinks": [1, 2]}
             ]}},
            {"id": "w", "point": {"x": -300, "y": 0}, "virtual": true},
            {"id": "e", "point": {"x": 300, "y": 0}, "virtual": true},
            {"id": "n", "point": {"x": 0, "y": 300}, "virtual": true},
            {"id": "s", "point": {"x": 0, "y": -300}, "virtual": true}
          ],
          "roads": [
            {"id": "w_in", "startIntersection": "w", "endIntersection": "c", "points": [{"x": -300, "y": 0}, {"x": 0, "y": 0}], "lanes": [{}, {}]},
            {"id": "n_in", "startIntersection": "n", "endIntersection": "c", "lanes": [{}]},
            {"id": "e_out", "startIntersection": "c", "endIntersection": "e", "lanes": [{}]},
            {"id": "s_out", "startIntersection": "c", "endIntersection": "s", "lanes": [{}]}
          ]
        }"#;
        let flow = r#"[{"vehicle": {}, "route": ["w_in", "e_out"], "interval": 10, "startTime": 0, "endTime": 25}]"#;
        let (rn, fl) = (dir.path().join("roadnet.json"), dir.path().join("flow.json"));
        fs::write(&rn, roadnet).unwrap();
        fs::write(&fl, flow).unwrap();
        let sc = load_scenario(&rn, &fl, PhaseLayout::ThroughLeft).unwrap();
        assert_eq!(sc.network.intersections.len(), 1);
        assert_eq!(sc.network.intersections[0].num_phases(), 2);
        assert_eq!(sc.flow.len(), 3);
        assert!((sc.network.lanes[0].length - 300.0).abs() < 1e-9);
    }
}
