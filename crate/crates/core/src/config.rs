//! Experiment configuration: one TOML file with `[sim]`, `[agent]`, `[train]`
//! and `[variant]` tables. Missing keys take their defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agent::AgentConfig;
use crate::control::{Variant, CONSERVATIVE_MARGIN, FIXED_TIME_GREEN, MAX_PRESSURE_GREEN};
use crate::metrics::DAR_WINDOW;
use crate::net::PhaseLayout;
use crate::sim::SimConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Episode length in simulated seconds.
    pub horizon: u32,
    /// Offline: random-policy episodes used to fill the buffer.
    pub collect_episodes: usize,
    /// Offline: gradient-only episodes, one checkpoint each.
    pub train_episodes: usize,
    /// Gradient steps per training episode.
    pub steps_per_episode: usize,
    /// Online: interaction episodes.
    pub online_episodes: usize,
    /// Online: random-policy episodes that seed the buffer before the first interaction.
    pub warmup_episodes: usize,
    /// Transitions kept per interaction episode, 0 keeps all.
    pub interactions_per_episode: usize,
    /// Trailing episodes averaged in the online report.
    pub report_last: usize,
    /// States sampled for the contribution matrix, 0 skips it.
    pub diagnose_samples: usize,
    pub dar_window: u32,
    pub phase_layout: PhaseLayout,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            horizon: 3600,
            collect_episodes: 30,
            train_episodes: 40,
            steps_per_episode: 360,
            online_episodes: 100,
            warmup_episodes: 5,
            interactions_per_episode: 0,
            report_last: 10,
            diagnose_samples: 0,
            dar_window: DAR_WINDOW,
            phase_layout: PhaseLayout::ThroughLeft,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariantConfig {
    pub variant: Variant,
    pub conservative_margin: f64,
    pub fixed_time_green: f64,
    pub max_pressure_green: f64,
}

impl Default for VariantConfig {
    fn default() -> Self {
        VariantConfig {
            variant: Variant::Full,
            conservative_margin: CONSERVATIVE_MARGIN,
            fixed_time_green: FIXED_TIME_GREEN,
            max_pressure_green: MAX_PRESSURE_GREEN,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub sim: SimConfig,
    pub agent: AgentConfig,
    pub train: TrainConfig,
    pub variant: VariantConfig,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Config, ConfigError> {
        let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::Parse { path: "<config>".into(), message: e.to_string() })?;
        let cfg: Config = serde_path_to_error::deserialize(de)
            .map_err(|e| ConfigError::Parse { path: e.path().to_string(), message: e.inner().to_string() })?;
        cfg.validate()?;
        Ok(cfg.resolved())
    }

    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Parse { path: path.display().to_string(), message: e.to_string() })?;
        Config::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Couples settings that must agree: the neighbor variant needs neighbor
    /// observations and the neighbor embedding, and the agent's duration range
    /// follows the simulator's.
    pub fn resolved(mut self) -> Config {
        let nb = self.variant.variant == Variant::Nb;
        self.agent.neighbors |= nb;
        self.sim.observe_neighbors |= self.agent.neighbors;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        let b = self.sim.bounds;
        if !(b.min.is_finite() && b.max.is_finite() && 0.0 < b.min && b.min < b.max) {
            return bad("sim.bounds needs 0 < min < max");
        }
        if self.sim.free_flow_speed <= 0.0 || !self.sim.free_flow_speed.is_finite() {
            return bad("sim.free_flow_speed must be positive");
        }
        if self.sim.saturation_headway == 0 {
            return bad("sim.saturation_headway must be at least 1");
        }
        let a = &self.agent;
        if a.embed_dim == 0 || a.head_width == 0 || a.batch_size == 0 || a.replay_capacity == 0 {
            return bad("agent sizes must be positive");
        }
        if a.batch_size > a.replay_capacity {
            return bad("agent.batch_size exceeds agent.replay_capacity");
        }
        if !(0.0..1.0).contains(&a.gamma) {
            return bad("agent.gamma must lie in [0, 1)");
        }
        if !(0.0 < a.tau && a.tau <= 1.0) {
            return bad("agent.tau must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&a.alpha) {
            return bad("agent.alpha must lie in [0, 1]");
        }
        if a.actor_lr <= 0.0 || a.critic_lr <= 0.0 || a.jitter_sigma < 0.0 || a.grad_clip < 0.0 {
            return bad("agent learning rates must be positive, jitter and clip non-negative");
        }
        if self.train.horizon == 0 {
            return bad("train.horizon must be positive");
        }
        if self.train.report_last == 0 {
            return bad("train.report_last must be positive");
        }
        let v = &self.variant;
        if v.conservative_margin < 0.0 {
            return bad("variant.conservative_margin must be non-negative");
        }
        if !b.contains(v.fixed_time_green) || !b.contains(v.max_pressure_green) {
            return bad("baseline greens must lie within sim.bounds");
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical serialization, first 16 digits.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canon.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
