//! Per-intersection observations and queue rewards.

use serde::{Deserialize, Serialize};

use crate::net::{Direction, IntersectionId, LaneId, ENTRY_SLOTS, SEGMENT_COUNT, SEGMENT_LENGTH};
use crate::sim::SimState;

/// Features per entry lane: queued, moving, four segment counts.
pub const LANE_FEATURES: usize = 2 + SEGMENT_COUNT;
/// Width of the lane block of an observation.
pub const LANE_BLOCK: usize = ENTRY_SLOTS * LANE_FEATURES;

/// (q, m, v1..v4) for one lane.
pub fn lane_observation(state: &SimState<'_>, lane: LaneId) -> [f64; LANE_FEATURES] {
    let (q, m) = state.lane_counts(lane);
    let mut out = [0.0; LANE_FEATURES];
    out[0] = q as f64;
    out[1] = m as f64;
    for v in state.lane_vehicles(lane) {
        let seg = (v.distance_to_stopline / SEGMENT_LENGTH).floor();
        if seg >= 0.0 && (seg as usize) < SEGMENT_COUNT {
            out[2 + seg as usize] += 1.0;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborObs {
    pub lanes: Vec<f64>,
    /// The neighbor's most recent duration vector.
    pub x_nb: Vec<f64>,
    pub direction: Direction,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    /// `LANE_BLOCK` values in (approach, turn) slot order.
    pub lanes: Vec<f64>,
    pub phase: usize,
    pub num_phases: usize,
    pub elapsed: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub neighbors: Vec<NeighborObs>,
}

impl Observation {
    pub fn empty(num_phases: usize) -> Self {
        Observation { lanes: vec![0.0; LANE_BLOCK], phase: 0, num_phases, elapsed: 0.0, neighbors: Vec::new() }
    }

    pub fn lane(&self, slot: usize) -> &[f64] {
        &self.lanes[slot * LANE_FEATURES..(slot + 1) * LANE_FEATURES]
    }

    /// Lane block, phase one-hot and elapsed green, `12*6 + K + 1` values.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(LANE_BLOCK + self.num_phases + 1);
        v.extend_from_slice(&self.lanes);
        v.extend((0..self.num_phases).map(|k| if k == self.phase { 1.0 } else { 0.0 }));
        v.push(self.elapsed);
        v
    }

    /// Inverse of [`Observation::to_vector`]; `None` on a length mismatch or
    /// a one-hot block without a single set entry.
    pub fn from_vector(v: &[f64], num_phases: usize) -> Option<Observation> {
        if v.len() != LANE_BLOCK + num_phases + 1 {
            return None;
        }
        let hot = &v[LANE_BLOCK..LANE_BLOCK + num_phases];
        let phase = hot.iter().position(|&h| h == 1.0)?;
        if hot.iter().filter(|&&h| h != 0.0).count() != 1 {
            return None;
        }
        Some(Observation { lanes: v[..LANE_BLOCK].to_vec(), phase, num_phases, elapsed: v[v.len() - 1], neighbors: Vec::new() })
    }

    pub fn total_queue(&self) -> f64 {
        (0..ENTRY_SLOTS).map(|s| self.lane(s)[0]).sum()
    }

    /// Negative total queue over the entry lanes.
    pub fn reward(&self) -> f64 {
        -self.total_queue()
    }
}

fn lane_block(state: &SimState<'_>, id: IntersectionId) -> Vec<f64> {
    let inter = state.network.intersection(id);
    let mut lanes = vec![0.0; LANE_BLOCK];
    for (slot, lane) in inter.entry_lanes.iter().enumerate() {
        if let Some(lane) = lane {
            lanes[slot * LANE_FEATURES..(slot + 1) * LANE_FEATURES].copy_from_slice(&lane_observation(state, *lane));
        }
    }
    lanes
}

pub fn intersection_observation(state: &SimState<'_>, id: IntersectionId) -> Observation {
    let inter = state.network.intersection(id);
    let signal = state.signal(id);
    let neighbors = if state.config.observe_neighbors {
        inter
            .neighbors
            .iter()
            .map(|nb| {
                let k = state.network.intersection(nb.intersection).num_phases();
                let x_nb = state
                    .signal(nb.intersection)
                    .last_params
                    .clone()
                    .filter(|p| p.len() == k)
                    .unwrap_or_else(|| vec![state.config.bounds.midpoint(); k]);
                NeighborObs { lanes: lane_block(state, nb.intersection), x_nb, direction: nb.direction, distance: nb.distance }
            })
            .collect()
    } else {
        Vec::new()
    };
    Observation {
        lanes: lane_block(state, id),
        phase: signal.active_phase,
        num_phases: inter.num_phases(),
        elapsed: signal.phase_elapsed as f64,
        neighbors,
    }
}

pub fn reward(state: &SimState<'_>, id: IntersectionId) -> f64 {
    let inter = state.network.intersection(id);
    -inter.entry_lanes.iter().flatten().map(|&l| state.lane_counts(l).0 as f64).sum::<f64>()
}
