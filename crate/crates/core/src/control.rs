//! Signal controllers: fixed-time and max-pressure baselines, the random
//! data-collection policy, and the learned policy with its deployment variants.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::agent::{argmax, Agent};
use crate::net::IntersectionId;
use crate::sim::{Command, Controller, DecisionContext, DurationBounds, SimState};

/// Largest change of duration between consecutive decisions of the
/// conservative variants, seconds.
pub const CONSERVATIVE_MARGIN: f64 = 5.0;

/// Green length used by [`FixedTime`] unless a plan is given.
pub const FIXED_TIME_GREEN: f64 = 30.0;
/// Green length used by [`MaxPressure`].
pub const MAX_PRESSURE_GREEN: f64 = 20.0;

/// Cycles through the phase order with a fixed green per phase.
#[derive(Clone, Debug)]
pub struct FixedTime {
    /// Green per phase index; phases beyond the plan use the last entry.
    pub plan: Vec<f64>,
}

impl FixedTime {
    pub fn new(plan: Vec<f64>) -> Self {
        assert!(!plan.is_empty(), "fixed-time plan needs at least one duration");
        FixedTime { plan }
    }

    pub fn uniform(green: f64) -> Self {
        FixedTime { plan: vec![green] }
    }

    fn green(&self, k: usize) -> f64 {
        self.plan[k.min(self.plan.len() - 1)]
    }
}

impl Default for FixedTime {
    fn default() -> Self {
        FixedTime::uniform(FIXED_TIME_GREEN)
    }
}

impl Controller for FixedTime {
    fn decide(&mut self, ctx: &DecisionContext<'_, '_>) -> Command {
        let phases = &ctx.state.network.intersection(ctx.intersection).phase_set;
        let signal = ctx.signal();
        let k = if signal.prev_duration.is_none() { phases.cycle_order[0] } else { phases.successor(signal.active_phase) };
        Command::new(k, self.green(k))
    }
}

/// Upstream minus downstream vehicle count summed over the phase's movements.
pub fn pressure(state: &SimState<'_>, id: IntersectionId, k: usize) -> i64 {
    let net = state.network;
    net.intersection(id).phase_set.phases[k]
        .movements
        .iter()
        .map(|&m| {
            let mv = net.movement(m);
            state.lane_total(mv.from_lane) as i64 - state.lane_total(mv.to_lane) as i64
        })
        .sum()
}

/// Greedy phase choice by pressure, fixed green.
#[derive(Clone, Debug)]
pub struct MaxPressure {
    pub green: f64,
}

impl Default for MaxPressure {
    fn default() -> Self {
        MaxPressure { green: MAX_PRESSURE_GREEN }
    }
}

impl MaxPressure {
    /// Highest-pressure phase, lowest index on ties.
    pub fn choose(state: &SimState<'_>, id: IntersectionId) -> usize {
        let k = state.network.intersection(id).num_phases();
        let mut best = 0;
        let mut best_p = i64::MIN;
        for j in 0..k {
            let p = pressure(state, id, j);
            if p > best_p {
                best = j;
                best_p = p;
            }
        }
        best
    }
}

impl Controller for MaxPressure {
    fn decide(&mut self, ctx: &DecisionContext<'_, '_>) -> Command {
        Command::new(MaxPressure::choose(ctx.state, ctx.intersection), self.green)
    }
}

/// Uniform phase and uniform duration vector, used to fill offline buffers.
#[derive(Clone, Debug)]
pub struct RandomPolicy {
    bounds: DurationBounds,
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(bounds: DurationBounds, seed: u64) -> Self {
        RandomPolicy { bounds, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl Controller for RandomPolicy {
    fn decide(&mut self, ctx: &DecisionContext<'_, '_>) -> Command {
        let k = ctx.state.network.intersection(ctx.intersection).num_phases();
        let x: Vec<f64> = (0..k).map(|_| self.rng.random_range(self.bounds.min..=self.bounds.max)).collect();
        let phase = self.rng.random_range(0..k);
        Command { phase, duration: x[phase], params: Some(x) }
    }
}

/// Keep the current phase unless the next one in the cycle scores higher.
pub fn cycle_select(q: &[f64], current: usize, successor: usize) -> usize {
    if q[current] >= q[successor] {
        current
    } else {
        successor
    }
}

/// Limits the change from `prev` to the conservative margin, then to the bounds.
pub fn conservative_clamp(x_new: f64, prev: f64, bounds: &DurationBounds) -> f64 {
    clamp_within(x_new, prev, CONSERVATIVE_MARGIN, bounds)
}

pub fn clamp_within(x_new: f64, prev: f64, margin: f64, bounds: &DurationBounds) -> f64 {
    bounds.clamp(x_new.clamp(prev - margin, prev + margin))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Argmax phase, actor duration.
    #[default]
    Full,
    /// Phase restricted to the current one or its cycle successor.
    Cycle,
    /// Duration kept within the margin of the previous one.
    Conservative,
    #[value(name = "conservative_cycle")]
    ConservativeCycle,
    /// Full selection with the neighbor summary in the state.
    Nb,
}

impl Variant {
    pub fn uses_cycle(self) -> bool {
        matches!(self, Variant::Cycle | Variant::ConservativeCycle)
    }

    pub fn is_conservative(self) -> bool {
        matches!(self, Variant::Conservative | Variant::ConservativeCycle)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Cycle => "cycle",
            Variant::Conservative => "conservative",
            Variant::ConservativeCycle => "conservative_cycle",
            Variant::Nb => "nb",
        }
    }
}

/// The learned policy as a controller. With `explore` set, executed
/// durations get Gaussian jitter (clamped to the bounds).
pub struct PolicyController<'a> {
    agent: &'a Agent,
    variant: Variant,
    explore: Option<(Normal<f64>, ChaCha8Rng)>,
    pub margin: f64,
    /// Last executed duration per intersection, for the conservative variants.
    prev: Vec<Option<f64>>,
}

impl<'a> PolicyController<'a> {
    pub fn new(agent: &'a Agent, variant: Variant) -> Self {
        PolicyController { agent, variant, explore: None, margin: CONSERVATIVE_MARGIN, prev: Vec::new() }
    }

    pub fn exploring(agent: &'a Agent, variant: Variant, sigma: f64, seed: u64) -> Self {
        let normal = Normal::new(0.0, sigma.max(0.0)).expect("finite jitter");
        PolicyController { agent, variant, explore: Some((normal, ChaCha8Rng::seed_from_u64(seed))), margin: CONSERVATIVE_MARGIN, prev: Vec::new() }
    }

    pub fn with_margin(mut self, margin: f64) -> Self {
        self.margin = margin;
        self
    }
}

impl Controller for PolicyController<'_> {
    fn decide(&mut self, ctx: &DecisionContext<'_, '_>) -> Command {
        let agent = self.agent;
        let obs = ctx.observation;
        let x = agent.policy(obs).expect("actor forward");
        let q = agent.q_values(obs, &x).expect("critic forward");
        let phases = &ctx.state.network.intersection(ctx.intersection).phase_set;
        let signal = ctx.signal();
        let phase = if self.variant.uses_cycle() {
            let current = if signal.prev_duration.is_none() { phases.cycle_order[0] } else { signal.active_phase };
            cycle_select(&q, current, phases.successor(current))
        } else {
            argmax(&q)
        };
        let mut duration = x[phase];
        if let Some((normal, rng)) = &mut self.explore {
            duration = agent.bounds.clamp(duration + normal.sample(rng));
        }
        let i = ctx.intersection.0;
        if self.prev.len() <= i {
            self.prev.resize(i + 1, None);
        }
        if self.variant.is_conservative() {
            if let Some(prev) = self.prev[i] {
                duration = clamp_within(duration, prev, self.margin, &agent.bounds);
            }
        }
        self.prev[i] = Some(agent.bounds.clamp(duration));
        Command { phase, duration, params: Some(x) }
    }

    fn reset(&mut self) {
        self.prev.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_network, slot_index, Direction, PhaseLayout, Turn};
    use crate::scenario::{generate_grid, grid_network_spec, Scenario};
    use crate::sim::{run_episode, SimConfig};

    fn empty_1x1() -> Scenario {
        let net = build_network(&grid_network_spec(1, 1, 300.0), PhaseLayout::ThroughLeft).unwrap();
        Scenario::new(net, Vec::new()).unwrap()
    }

    #[test]
    fn fixed_time_cycles_in_order() {
        let sc = empty_1x1();
        let log = run_episode(&sc, &mut FixedTime::default(), 3600, SimConfig::default()).unwrap();
        let phases: Vec<usize> = log.decisions.iter().map(|d| d.phase).collect();
        for (i, &p) in phases.iter().enumerate() {
            assert_eq!(p, i % 4);
        }
        assert!(log.decisions.iter().all(|d| d.duration == 30.0));
        // one decision per 30 s green plus 5 s of clearance
        let expected = 3600 / 35;
        assert!((phases.len() as i64 - expected as i64).abs() <= 1, "{}", phases.len());
    }

    #[test]
    fn max_pressure_empty_picks_phase_zero() {
        let sc = empty_1x1();
        let state = SimState::new(&sc, SimConfig::default());
        assert_eq!(MaxPressure::choose(&state, IntersectionId(0)), 0);
    }

    #[test]
    fn max_pressure_prefers_loaded_through() {
        let sc = empty_1x1();
        let mut state = SimState::new(&sc, SimConfig::default());
        let inter = sc.network.intersection(IntersectionId(0)).clone();
        let lane = |a, t| inter.entry_lanes[slot_index(a, t)].unwrap();
        let mut place = |a: Direction, t: Turn, n: usize| {
            let l = lane(a, t);
            let exit = sc.network.movements.iter().find(|m| m.from_lane == l).unwrap().to_lane;
            for _ in 0..n {
                state.place_vehicle(vec![l, exit], 0.0, true);
            }
        };
        place(Direction::North, Turn::Through, 5);
        place(Direction::South, Turn::Through, 5);
        place(Direction::East, Turn::Through, 1);
        place(Direction::West, Turn::Through, 1);
        assert_eq!(pressure(&state, IntersectionId(0), 0), 10);
        assert_eq!(pressure(&state, IntersectionId(0), 2), 2);
        assert_eq!(MaxPressure::choose(&state, IntersectionId(0)), 0);
    }

    #[test]
    fn random_policy_stays_in_bounds_and_is_seeded() {
        let sc = generate_grid(1, 1, 300.0, 600.0, 3).unwrap();
        let b = DurationBounds::default();
        let a = run_episode(&sc, &mut RandomPolicy::new(b, 9), 1200, SimConfig::default()).unwrap();
        let c = run_episode(&sc, &mut RandomPolicy::new(b, 9), 1200, SimConfig::default()).unwrap();
        assert_eq!(a, c);
        for d in &a.decisions {
            assert!(b.contains(d.duration));
            assert_eq!(d.params.as_ref().unwrap()[d.phase], d.duration);
        }
    }

    #[test]
    fn cycle_select_ties_keep_current() {
        assert_eq!(cycle_select(&[-1.0, -1.0, 0.0, 0.0], 0, 1), 0);
        assert_eq!(cycle_select(&[-2.0, -1.0, 5.0, 0.0], 0, 1), 1);
        assert_eq!(cycle_select(&[0.0, 0.0, 0.0, 3.0], 3, 0), 3);
    }

    #[test]
    fn conservative_clamp_examples() {
        let b = DurationBounds::default();
        assert_eq!(conservative_clamp(40.0, 20.0, &b), 25.0);
        assert_eq!(conservative_clamp(22.0, 20.0, &b), 22.0);
        assert_eq!(conservative_clamp(5.0, 12.0, &b), 10.0);
    }
}
