//! Oracles shared by the property and acceptance suites.
#![allow(dead_code)]

use std::collections::HashMap;

use phlight::agent::{Agent, AgentConfig, PhaseMembership};
use phlight::net::{IntersectionId, LaneId, Turn};
use phlight::scenario::Scenario;
use phlight::sim::{DurationBounds, EpisodeLog, Mode, SimConfig, SimState, StepObserver};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Counts every vehicle independently of the simulator's own counters and
/// checks that signalized discharges only happen on green.
#[derive(Default)]
pub struct Audit {
    pub steps: usize,
    pub green: Vec<(bool, usize)>,
    pub violations: Vec<String>,
}

impl StepObserver for Audit {
    fn before_step(&mut self, s: &SimState<'_>) {
        self.green = s.signals.iter().map(|g| (g.is_green(), g.active_phase)).collect();
    }

    fn after_step(&mut self, s: &SimState<'_>) {
        self.steps += 1;
        let on_lanes: usize = (0..s.network.lanes.len()).map(|l| s.lane_total(LaneId(l))).sum();
        let arrived = s.vehicles.iter().filter(|v| v.mode == Mode::Arrived).count();
        if arrived != s.arrived() || s.vehicles.len() != on_lanes + arrived + s.deferred() || !s.conservation_holds() {
            self.violations.push(format!("t={} created {} lanes {on_lanes} arrived {arrived} deferred {}", s.clock, s.vehicles.len(), s.deferred()));
        }
        for d in &s.last_discharges {
            let (Some(i), Some(turn)) = (d.intersection, d.turn) else { continue };
            if turn == Turn::Right {
                continue;
            }
            let (green, k) = self.green[i.0];
            let served = s.network.intersection(i).phase_set.phases[k].movements.iter().any(|&m| s.network.movement(m).from_lane == d.from_lane);
            if !green || !served {
                self.violations.push(format!("t={} discharge from {:?} while green={green} phase={k}", s.clock, d.from_lane));
            }
        }
    }
}

pub fn small_agent(sc: &Scenario, seed: u64) -> Agent {
    let m = PhaseMembership::from_network(&sc.network, IntersectionId(0));
    Agent::new(AgentConfig { embed_dim: 8, head_width: 8, seed, ..AgentConfig::default() }, m, DurationBounds::default())
}

/// Recomputes travel metrics from the serialized log text alone.
pub fn replay(text: &str) -> (f64, f64, f64) {
    let mut horizon = 0u64;
    let mut rows: Vec<(u64, Option<u64>)> = Vec::new();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        match v["type"].as_str().unwrap() {
            "header" => horizon = v["horizon"].as_u64().unwrap(),
            "vehicle" => rows.push((v["entry_time"].as_u64().unwrap(), v["arrival_time"].as_u64())),
            _ => {}
        }
    }
    let total: u64 = rows.iter().map(|(e, a)| a.unwrap_or(horizon) - e).sum();
    let att = if rows.is_empty() { 0.0 } else { total as f64 / rows.len() as f64 };
    let done: Vec<u64> = rows.iter().filter_map(|(e, a)| a.map(|a| a - e)).collect();
    let datt = if done.is_empty() { f64::NAN } else { done.iter().sum::<u64>() as f64 / done.len() as f64 };
    let entered = rows.iter().filter(|(e, _)| *e <= 3600).count();
    let inside = rows.iter().filter(|(_, a)| a.is_some_and(|a| a <= 3600)).count();
    let dar = if entered == 0 { 1.0 } else { inside as f64 / entered as f64 };
    (att, datt, dar)
}

pub fn same(a: f64, b: f64) -> bool {
    a == b || (a.is_nan() && b.is_nan())
}

/// Pairs (intersection, previous phase, next phase) that are neither a hold
/// nor a single cycle step. Signals start in the first phase of the cycle,
/// so the first decision may keep it or advance once.
pub fn cycle_violations(sc: &Scenario, log: &EpisodeLog) -> Vec<(usize, usize, usize)> {
    let mut last: HashMap<usize, usize> = HashMap::new();
    let mut bad = Vec::new();
    for d in &log.decisions {
        let phases = &sc.network.intersection(IntersectionId(d.intersection)).phase_set;
        match last.get(&d.intersection) {
            None => {
                let first = phases.cycle_order[0];
                if d.phase != first && d.phase != phases.successor(first) {
                    bad.push((d.intersection, first, d.phase));
                }
            }
            Some(&p) if d.phase != p && d.phase != phases.successor(p) => bad.push((d.intersection, p, d.phase)),
            _ => {}
        }
        last.insert(d.intersection, d.phase);
    }
    bad
}

pub fn max_step(log: &EpisodeLog) -> f64 {
    let mut last: HashMap<usize, f64> = HashMap::new();
    let mut worst: f64 = 0.0;
    for d in &log.decisions {
        if let Some(p) = last.insert(d.intersection, d.duration) {
            worst = worst.max((d.duration - p).abs());
        }
    }
    worst
}

pub fn random_state(sc: &Scenario, seed: u64) -> SimState<'_> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = SimState::new(sc, SimConfig::default());
    for m in &sc.network.movements {
        for _ in 0..rng.random_range(0..4) {
            state.place_vehicle(vec![m.from_lane, m.to_lane], 0.0, true);
        }
    }
    state
}

pub fn brute_pressure(state: &SimState<'_>, id: IntersectionId, k: usize) -> i64 {
    let net = state.network;
    let mut p = 0i64;
    for &m in &net.intersection(id).phase_set.phases[k].movements {
        let mv = net.movement(m);
        p += state.lane_vehicles(mv.from_lane).count() as i64;
        p -= state.lane_vehicles(mv.to_lane).count() as i64;
    }
    p
}
