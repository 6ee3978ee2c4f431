//! Offline and online training drivers, evaluation runs and diagnostics.
//!
//! One agent is shared by all intersections of a scenario and trained on
//! their pooled transitions.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{transitions_from_log, Agent, AgentError, PhaseMembership, ReplayBuffer, Transition};
use crate::config::Config;
use crate::control::{FixedTime, MaxPressure, PolicyController, RandomPolicy, Variant};
use crate::metrics::{self, contribution_matrix, Contribution, MetricsRow};
use crate::net::IntersectionId;
use crate::observe::Observation;
use crate::scenario::Scenario;
use crate::sim::{run_episode, Controller, EpisodeLog, SimError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("training diverged in episode {episode}: {cause}")]
    Diverged { episode: usize, cause: String, checkpoint: Option<PathBuf> },
    #[error("intersections do not share one phase structure, parameter sharing impossible")]
    MixedPhases,
    #[error("scenario has no intersections")]
    NoIntersections,
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// Fresh agent for `scenario` under `cfg`.
pub fn new_agent(cfg: &Config, scenario: &Scenario) -> Result<Agent, TrainError> {
    let net = &scenario.network;
    if net.intersections.is_empty() {
        return Err(TrainError::NoIntersections);
    }
    let membership = PhaseMembership::from_network(net, IntersectionId(0));
    for i in 1..net.intersections.len() {
        if PhaseMembership::from_network(net, IntersectionId(i)) != membership {
            return Err(TrainError::MixedPhases);
        }
    }
    Ok(Agent::new(cfg.agent.clone(), membership, cfg.sim.bounds))
}

pub fn episode_row(log: &EpisodeLog, episode: usize, seed: u64, window: u32) -> MetricsRow {
    MetricsRow {
        episode,
        seed,
        att: metrics::att(log),
        datt: metrics::datt(log),
        dar: metrics::dar(log, window),
        mean_diag: f64::NAN,
    }
}

/// Baseline controllers selectable by name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    FixedTime,
    MaxPressure,
    Random,
}

impl Baseline {
    pub fn controller(self, cfg: &Config, seed: u64) -> Box<dyn Controller> {
        match self {
            Baseline::FixedTime => Box::new(FixedTime::uniform(cfg.variant.fixed_time_green)),
            Baseline::MaxPressure => Box::new(MaxPressure { green: cfg.variant.max_pressure_green }),
            Baseline::Random => Box::new(RandomPolicy::new(cfg.sim.bounds, seed)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Baseline::FixedTime => "fixed_time",
            Baseline::MaxPressure => "max_pressure",
            Baseline::Random => "random",
        }
    }
}

/// Frozen-policy episode with the configured variant.
pub fn evaluate_agent(agent: &Agent, scenario: &Scenario, cfg: &Config) -> Result<EpisodeLog, SimError> {
    let mut ctrl = PolicyController::new(agent, cfg.variant.variant).with_margin(cfg.variant.conservative_margin);
    run_episode(scenario, &mut ctrl, cfg.train.horizon, cfg.sim)
}

/// Transitions of `episodes` runs of the random policy, seeded per episode.
/// Returns them with the number of decisions taken.
pub fn collect_random(scenario: &Scenario, cfg: &Config, episodes: usize) -> Result<(Vec<Transition>, usize), SimError> {
    let mut out = Vec::new();
    let mut decisions = 0;
    for e in 0..episodes {
        let mut ctrl = RandomPolicy::new(cfg.sim.bounds, cfg.train.seed.wrapping_add(e as u64));
        let log = run_episode(scenario, &mut ctrl, cfg.train.horizon, cfg.sim)?;
        decisions += log.decisions.len();
        out.extend(transitions_from_log(&log));
    }
    Ok((out, decisions))
}

/// Evenly spaced states from the buffer for the contribution matrix.
fn probe_states(buffer: &ReplayBuffer<Transition>, n: usize) -> Vec<Observation> {
    let all: Vec<&Transition> = buffer.iter().collect();
    if all.is_empty() || n == 0 {
        return Vec::new();
    }
    let n = n.min(all.len());
    (0..n).map(|i| all[i * all.len() / n].s.clone()).collect()
}

pub fn diagnose(agent: &Agent, states: &[Observation]) -> Result<Contribution, AgentError> {
    let refs: Vec<&Observation> = states.iter().collect();
    let jac = agent.critic_jacobians(&refs)?;
    Ok(contribution_matrix(&jac))
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub rows: Vec<MetricsRow>,
    /// Mean critic loss per episode, NaN when no step ran.
    pub losses: Vec<f64>,
    /// Per-episode contribution matrices when `diagnose_samples > 0`.
    pub contributions: Vec<Contribution>,
    pub checkpoints: Vec<PathBuf>,
    /// Environment decisions taken while gradient steps were running.
    pub interactions_during_training: usize,
    pub agent: Agent,
    /// Agent of the episode with the lowest evaluation att.
    pub best_agent: Agent,
}

impl TrainReport {
    pub fn best(&self) -> Option<&MetricsRow> {
        self.rows.iter().min_by(|a, b| a.att.total_cmp(&b.att))
    }

    /// Mean att over the last `n` rows.
    pub fn last_mean_att(&self, n: usize) -> f64 {
        let tail: Vec<f64> = self.rows.iter().rev().take(n).map(|r| r.att).collect();
        metrics::mean_std(&tail).0
    }
}

struct Recorder<'a> {
    cfg: &'a Config,
    out: Option<&'a Path>,
    report: TrainReport,
    best_att: f64,
    probes: Vec<Observation>,
}

impl<'a> Recorder<'a> {
    fn new(cfg: &'a Config, out: Option<&'a Path>, agent: &Agent) -> Result<Self, TrainError> {
        if let Some(dir) = out {
            std::fs::create_dir_all(dir)?;
        }
        Ok(Recorder {
            cfg,
            out,
            report: TrainReport {
                rows: Vec::new(),
                losses: Vec::new(),
                contributions: Vec::new(),
                checkpoints: Vec::new(),
                interactions_during_training: 0,
                agent: agent.clone(),
                best_agent: agent.clone(),
            },
            best_att: f64::INFINITY,
            probes: Vec::new(),
        })
    }

    /// Runs `steps` gradient steps; returns the mean critic loss.
    fn steps(&self, agent: &mut Agent, buffer: &ReplayBuffer<Transition>, steps: usize, episode: usize) -> Result<f64, TrainError> {
        if buffer.len() < agent.config.batch_size {
            return Ok(f64::NAN);
        }
        let mut total = 0.0;
        for _ in 0..steps {
            match agent.train_step(buffer) {
                Ok(s) => total += s.critic_loss,
                Err(AgentError::NonFinite(what)) => return Err(self.diverged(agent, episode, what)),
                Err(e) => return Err(e.into()),
            }
        }
        if !agent.is_finite() {
            return Err(self.diverged(agent, episode, "parameters"));
        }
        Ok(if steps == 0 { f64::NAN } else { total / steps as f64 })
    }

    fn diverged(&self, agent: &Agent, episode: usize, what: &str) -> TrainError {
        let checkpoint = self.out.map(|d| d.join("diverged.ckpt"));
        if let Some(p) = &checkpoint {
            if let Err(e) = agent.save(p, &self.cfg.hash()) {
                log::error!("could not dump checkpoint: {e}");
            }
        }
        TrainError::Diverged { episode, cause: format!("non-finite {what}"), checkpoint }
    }

    /// Checkpoint, frozen evaluation and diagnostics for one episode.
    fn finish_episode(&mut self, agent: &Agent, scenario: &Scenario, episode: usize, loss: f64) -> Result<(), TrainError> {
        let cfg = self.cfg;
        if let Some(dir) = self.out {
            let p = dir.join(format!("episode_{episode:03}.ckpt"));
            agent.save(&p, &cfg.hash())?;
            self.report.checkpoints.push(p);
        }
        let log = evaluate_agent(agent, scenario, cfg)?;
        let mut row = episode_row(&log, episode, cfg.train.seed, cfg.train.dar_window);
        if !self.probes.is_empty() {
            let c = diagnose(agent, &self.probes)?;
            row.mean_diag = c.mean_diagonal();
            self.report.contributions.push(c);
        }
        log::info!("episode {episode}: att {:.1} datt {:.1} dar {:.3} loss {loss:.4}", row.att, row.datt, row.dar);
        if row.att < self.best_att {
            self.best_att = row.att;
            self.report.best_agent = agent.clone();
        }
        self.report.rows.push(row);
        self.report.losses.push(loss);
        Ok(())
    }

    fn done(mut self, agent: Agent) -> Result<TrainReport, TrainError> {
        if let Some(dir) = self.out {
            std::fs::write(dir.join("metrics.csv"), metrics::to_csv(&self.report.rows, &self.cfg.hash()))?;
            if !self.report.contributions.is_empty() {
                let json = serde_json::to_string_pretty(&self.report.contributions).expect("serializable");
                std::fs::write(dir.join("contributions.json"), json)?;
            }
            agent.save(&dir.join("final.ckpt"), &self.cfg.hash())?;
        }
        self.report.agent = agent;
        Ok(self.report)
    }
}

/// Gradient-only training on a fixed dataset, one checkpoint and one
/// evaluation episode per training episode.
pub fn train_offline(scenario: &Scenario, cfg: &Config, dataset: Vec<Transition>, out: Option<&Path>) -> Result<TrainReport, TrainError> {
    let mut agent = new_agent(cfg, scenario)?;
    let mut buffer = ReplayBuffer::new(cfg.agent.replay_capacity);
    dataset.into_iter().for_each(|t| buffer.push(t));
    if buffer.len() < cfg.agent.batch_size {
        return Err(AgentError::Underfull(crate::agent::UnderfullBuffer { size: buffer.len(), requested: cfg.agent.batch_size }).into());
    }
    let mut rec = Recorder::new(cfg, out, &agent)?;
    rec.probes = probe_states(&buffer, cfg.train.diagnose_samples);
    for episode in 1..=cfg.train.train_episodes {
        let loss = rec.steps(&mut agent, &buffer, cfg.train.steps_per_episode, episode)?;
        rec.finish_episode(&agent, scenario, episode, loss)?;
    }
    rec.done(agent)
}

/// Offline training on freshly collected random-policy data.
pub fn train_offline_random(scenario: &Scenario, cfg: &Config, out: Option<&Path>) -> Result<TrainReport, TrainError> {
    let (data, _) = collect_random(scenario, cfg, cfg.train.collect_episodes)?;
    train_offline(scenario, cfg, data, out)
}

/// Seeds the buffer with random-policy episodes, then alternates one
/// exploring interaction episode with a block of gradient steps; every
/// episode ends with a frozen evaluation.
pub fn train_online(scenario: &Scenario, cfg: &Config, out: Option<&Path>) -> Result<TrainReport, TrainError> {
    let mut agent = new_agent(cfg, scenario)?;
    let mut buffer = ReplayBuffer::new(cfg.agent.replay_capacity);
    let (warmup, _) = collect_random(scenario, cfg, cfg.train.warmup_episodes)?;
    warmup.into_iter().for_each(|t| buffer.push(t));
    let mut rec = Recorder::new(cfg, out, &agent)?;
    let variant = cfg.variant.variant;
    for episode in 1..=cfg.train.online_episodes {
        let seed = cfg.train.seed.wrapping_mul(1_000_003).wrapping_add(episode as u64);
        let log = {
            let mut ctrl =
                PolicyController::exploring(&agent, variant, cfg.agent.jitter_sigma, seed).with_margin(cfg.variant.conservative_margin);
            run_episode(scenario, &mut ctrl, cfg.train.horizon, cfg.sim)?
        };
        rec.report.interactions_during_training += log.decisions.len();
        let mut fresh = transitions_from_log(&log);
        if cfg.train.interactions_per_episode > 0 {
            fresh.truncate(cfg.train.interactions_per_episode);
        }
        fresh.into_iter().for_each(|t| buffer.push(t));
        if episode == 1 && cfg.train.diagnose_samples > 0 {
            rec.probes = probe_states(&buffer, cfg.train.diagnose_samples);
        }
        let loss = rec.steps(&mut agent, &buffer, cfg.train.steps_per_episode, episode)?;
        rec.finish_episode(&agent, scenario, episode, loss)?;
    }
    rec.done(agent)
}

/// Mean and std of att, datt and dar over several runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub name: String,
    pub rows: Vec<MetricsRow>,
    pub att: (f64, f64),
    pub datt: (f64, f64),
    pub dar: (f64, f64),
    /// Some run had no vehicles at all.
    pub empty: bool,
}

impl EvalSummary {
    pub fn from_logs(name: &str, runs: &[(u64, EpisodeLog)], window: u32) -> Self {
        let rows: Vec<MetricsRow> = runs.iter().enumerate().map(|(i, (seed, log))| episode_row(log, i + 1, *seed, window)).collect();
        let col = |f: fn(&MetricsRow) -> f64| metrics::mean_std(&rows.iter().map(f).collect::<Vec<_>>());
        EvalSummary {
            name: name.to_string(),
            att: col(|r| r.att),
            datt: col(|r| r.datt),
            dar: col(|r| r.dar),
            empty: runs.iter().any(|(_, l)| l.vehicles.is_empty()),
            rows,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{:<20} att {:>8.2} ± {:<7.2} datt {:>8.2} ± {:<7.2} dar {:.3} ± {:.3}{}",
            self.name,
            self.att.0,
            self.att.1,
            self.datt.0,
            self.datt.1,
            self.dar.0,
            self.dar.1,
            if self.empty { "  (empty)" } else { "" }
        )
    }
}

/// What to evaluate: a trained agent or a baseline.
pub enum Subject<'a> {
    Agent(&'a Agent),
    Baseline(Baseline),
}

impl Subject<'_> {
    pub fn name(&self, variant: Variant) -> String {
        match self {
            Subject::Agent(_) => format!("ph-ddpg/{}", variant.name()),
            Subject::Baseline(b) => b.name().to_string(),
        }
    }
}

/// One frozen run per `(seed, scenario)` pair.
pub fn evaluate(subject: &Subject<'_>, runs: &[(u64, Scenario)], cfg: &Config) -> Result<EvalSummary, SimError> {
    let mut logs = Vec::with_capacity(runs.len());
    for (seed, sc) in runs {
        let log = match subject {
            Subject::Agent(a) => evaluate_agent(a, sc, cfg)?,
            Subject::Baseline(b) => run_episode(sc, b.controller(cfg, *seed).as_mut(), cfg.train.horizon, cfg.sim)?,
        };
        logs.push((*seed, log));
    }
    Ok(EvalSummary::from_logs(&subject.name(cfg.variant.variant), &logs, cfg.train.dar_window))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::generate_grid;

    fn tiny_cfg() -> Config {
        let mut c = Config::default();
        c.agent.embed_dim = 8;
        c.agent.head_width = 8;
        c.agent.batch_size = 16;
        c.train.horizon = 600;
        c.train.collect_episodes = 2;
        c.train.train_episodes = 3;
        c.train.steps_per_episode = 4;
        c.train.online_episodes = 3;
        c.train.diagnose_samples = 4;
        c
    }

    #[test]
    fn offline_counts_and_no_interaction() {
        let sc = generate_grid(1, 1, 300.0, 600.0, 1).unwrap();
        let cfg = tiny_cfg();
        let dir = tempfile::tempdir().unwrap();
        let rep = train_offline_random(&sc, &cfg, Some(dir.path())).unwrap();
        assert_eq!(rep.rows.len(), 3);
        assert_eq!(rep.checkpoints.len(), 3);
        assert_eq!(rep.contributions.len(), 3);
        assert_eq!(rep.interactions_during_training, 0);
        let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().nth(1).unwrap().ends_with(&cfg.hash()));
    }

    #[test]
    fn online_is_reproducible() {
        let sc = generate_grid(1, 1, 300.0, 600.0, 2).unwrap();
        let cfg = tiny_cfg();
        let a = train_online(&sc, &cfg, None).unwrap();
        let b = train_online(&sc, &cfg, None).unwrap();
        assert_eq!(a.rows.len(), 3);
        assert_eq!(a.agent.actor, b.agent.actor);
        assert_eq!(format!("{:?}", a.rows), format!("{:?}", b.rows));
    }

    #[test]
    fn warmup_fills_the_online_buffer_before_the_first_block() {
        let sc = generate_grid(1, 1, 300.0, 1200.0, 5).unwrap();
        let mut cfg = tiny_cfg();
        cfg.agent.batch_size = 64;
        cfg.train.online_episodes = 1;
        cfg.train.warmup_episodes = 0;
        let cold = train_online(&sc, &cfg, None).unwrap();
        assert!(cold.losses[0].is_nan());
        cfg.train.warmup_episodes = 6;
        let warm = train_online(&sc, &cfg, None).unwrap();
        assert!(warm.losses[0].is_finite());
        assert_eq!(warm.interactions_during_training, cold.interactions_during_training);
    }

    #[test]
    fn empty_flow_evaluates_to_zero_with_flag() {
        let sc = generate_grid(1, 1, 300.0, 0.0, 3).unwrap();
        let cfg = Config::default();
        let s = evaluate(&Subject::Baseline(Baseline::FixedTime), &[(3, sc)], &cfg).unwrap();
        assert_eq!(s.att.0, 0.0);
        assert!(s.empty);
    }

    #[test]
    fn underfull_dataset_is_rejected() {
        let sc = generate_grid(1, 1, 300.0, 600.0, 4).unwrap();
        let err = train_offline(&sc, &tiny_cfg(), Vec::new(), None).unwrap_err();
        assert!(matches!(err, TrainError::Agent(AgentError::Underfull(_))));
    }
}
