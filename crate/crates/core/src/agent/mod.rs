//! Parallel hybrid-action actor-critic: a vector critic over all phases, an
//! actor producing one duration per phase, and masked critic training.

pub mod mask;
pub mod nets;
pub mod replay;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    batch_jacobians, clip_grad_norm, gradient_check, Adam, Bound, FormatError, GradCheckError, GradCheckReport, Graph, Objective, ParamSet, Real,
    ShapeError, Tensor, Var,
};
use crate::observe::Observation;
use crate::sim::DurationBounds;

pub use mask::{BatchStats, MaskStrategy};
pub use nets::{ActorNet, CriticNet, NetShape, ObsBatch, PhaseMembership};
pub use replay::{transitions_from_log, ReplayBuffer, Transition, UnderfullBuffer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub embed_dim: usize,
    pub head_width: usize,
    /// Residual weight of the attention blocks.
    pub alpha: f64,
    pub gamma: f64,
    pub tau: f64,
    /// Critic steps per actor and target update.
    pub actor_delay: u64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Std-dev of the duration jitter used while interacting online.
    pub jitter_sigma: f64,
    /// Rewards are multiplied by this before entering the critic targets.
    pub reward_scale: f64,
    /// Global gradient-norm cap, 0 disables.
    pub grad_clip: f64,
    pub mask: MaskStrategy,
    pub neighbors: bool,
    pub seed: u64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            embed_dim: 32,
            head_width: 32,
            alpha: 0.5,
            gamma: 0.8,
            tau: 0.005,
            actor_delay: 2,
            batch_size: 80,
            replay_capacity: 100_000,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            jitter_sigma: 2.0,
            reward_scale: 0.1,
            grad_clip: 0.0,
            mask: MaskStrategy::Gaussian,
            neighbors: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Underfull(#[from] UnderfullBuffer),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("checkpoint: {0}")]
    Format(#[from] FormatError),
    #[error("checkpoint metadata: {0}")]
    Meta(String),
}

/// Result of greedy action selection.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub phase: usize,
    pub duration: f64,
    /// Full actor output.
    pub params: Vec<f64>,
    pub q: Vec<f64>,
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_objective: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: AgentConfig,
    bounds: DurationBounds,
    membership: PhaseMembership,
    config_hash: String,
    critic_steps: u64,
    actor_adam_t: u64,
    critic_adam_t: u64,
    rng_seed: Vec<u8>,
    rng_stream: u64,
    rng_word_pos: String,
}

#[derive(Clone, Debug)]
pub struct Agent {
    pub config: AgentConfig,
    pub bounds: DurationBounds,
    pub membership: PhaseMembership,
    actor_net: ActorNet,
    critic_net: CriticNet,
    pub actor: ParamSet,
    pub critic: ParamSet,
    pub actor_target: ParamSet,
    pub critic_target: ParamSet,
    actor_opt: Adam,
    critic_opt: Adam,
    rng: ChaCha8Rng,
    pub critic_steps: u64,
}

impl Agent {
    pub fn new(config: AgentConfig, membership: PhaseMembership, bounds: DurationBounds) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let shape = NetShape {
            num_phases: membership.num_phases(),
            embed_dim: config.embed_dim,
            head_width: config.head_width,
            alpha: config.alpha,
            neighbors: config.neighbors,
        };
        let (actor_net, actor) = ActorNet::new(shape, &membership, bounds, &mut rng);
        let (critic_net, critic) = CriticNet::new(shape, &membership, bounds, &mut rng);
        Agent {
            actor_opt: Adam::new(&actor, config.actor_lr),
            critic_opt: Adam::new(&critic, config.critic_lr),
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            actor_net,
            critic_net,
            actor,
            critic,
            rng,
            critic_steps: 0,
            config,
            bounds,
            membership,
        }
    }

    pub fn num_phases(&self) -> usize {
        self.membership.num_phases()
    }

    pub fn critic_net(&self) -> &CriticNet {
        &self.critic_net
    }

    pub fn actor_net(&self) -> &ActorNet {
        &self.actor_net
    }

    pub fn batch(&self, obs: &[&Observation]) -> ObsBatch {
        ObsBatch::new(obs, self.num_phases(), &self.bounds, self.config.neighbors)
    }

    /// Actor output `(B, K, 1)` under `params`.
    pub fn actor_values(&self, params: &ParamSet, obs: &[&Observation]) -> Result<Tensor, ShapeError> {
        let batch = self.batch(obs);
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let x = self.actor_net.forward(&mut g, &b, &batch)?;
        Ok(g.value(x).clone())
    }

    /// Critic output `(B, K, 1)` under `params` at durations `x`.
    pub fn critic_values(&self, params: &ParamSet, obs: &[&Observation], x: &Tensor) -> Result<Tensor, ShapeError> {
        let batch = self.batch(obs);
        let mut g = Graph::new();
        let b = params.bind(&mut g);
        let xv = g.input(x.clone());
        let q = self.critic_net.forward(&mut g, &b, &batch, xv)?;
        Ok(g.value(q).clone())
    }

    pub fn policy(&self, obs: &Observation) -> Result<Vec<f64>, ShapeError> {
        Ok(self.actor_values(&self.actor, &[obs])?.data)
    }

    pub fn q_values(&self, obs: &Observation, x: &[f64]) -> Result<Vec<f64>, ShapeError> {
        let xt = Tensor::from_vec([1, x.len(), 1], x.to_vec())?;
        Ok(self.critic_values(&self.critic, &[obs], &xt)?.data)
    }

    /// Actor durations, critic values at them, and the argmax phase.
    pub fn select_action(&self, obs: &Observation) -> Result<Selection, ShapeError> {
        let params = self.policy(obs)?;
        let q = self.q_values(obs, &params)?;
        let phase = argmax(&q);
        Ok(Selection { phase, duration: params[phase], params, q })
    }

    /// Greedy selection against an arbitrary critic function of the durations.
    pub fn select_action_with(&self, obs: &Observation, critic: impl Fn(&[f64]) -> Vec<f64>) -> Result<Selection, ShapeError> {
        let params = self.policy(obs)?;
        let q = critic(&params);
        let phase = argmax(&q);
        Ok(Selection { phase, duration: params[phase], params, q })
    }

    /// Bootstrap targets `r·scale + γ·max_j Q'(s', π'(s'))_j`.
    pub fn critic_targets(&self, batch: &[&Transition]) -> Result<Vec<f64>, ShapeError> {
        let next: Vec<&Observation> = batch.iter().map(|t| &t.s_next).collect();
        let x2 = self.actor_values(&self.actor_target, &next)?;
        let q2 = self.critic_values(&self.critic_target, &next, &x2)?;
        let k = self.num_phases();
        Ok(batch
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let best = q2.data[i * k..(i + 1) * k].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                t.r * self.config.reward_scale + self.config.gamma * best
            })
            .collect())
    }

    /// Critic inputs with the unexecuted components filled per the mask strategy.
    pub fn masked_inputs(&mut self, batch: &[&Transition]) -> Result<Tensor, ShapeError> {
        let k = self.num_phases();
        let actions: Vec<(usize, f64)> = batch.iter().map(|t| (t.k, t.x)).collect();
        let stats = BatchStats::from_batch(&actions, k);
        let actor_out = if self.config.mask == MaskStrategy::None {
            let states: Vec<&Observation> = batch.iter().map(|t| &t.s).collect();
            Some(self.actor_values(&self.actor, &states)?)
        } else {
            None
        };
        let mut x = Tensor::zeros([batch.len(), k, 1]);
        for (i, t) in batch.iter().enumerate() {
            let fill_from = actor_out.as_ref().map(|a| &a.data[i * k..(i + 1) * k]);
            let row = mask::fill(self.config.mask, t.k, t.x, &stats, &self.bounds, fill_from, &mut self.rng);
            x.data[i * k..(i + 1) * k].copy_from_slice(&row);
        }
        Ok(x)
    }

    /// One critic step: squared error on the executed component only.
    pub fn critic_update(&mut self, batch: &[&Transition]) -> Result<f64, AgentError> {
        let targets = self.critic_targets(batch)?;
        let x = self.masked_inputs(batch)?;
        let (loss, grads) = self.critic_loss_grads(batch, &x, &targets)?;
        self.apply(false, grads)?;
        Ok(loss)
    }

    /// Loss value and critic gradients for fixed inputs and targets.
    pub fn critic_loss_grads(&self, batch: &[&Transition], x: &Tensor, targets: &[f64]) -> Result<(f64, Vec<Tensor>), AgentError> {
        let k = self.num_phases();
        let states: Vec<&Observation> = batch.iter().map(|t| &t.s).collect();
        let sb = self.batch(&states);
        let mut g = Graph::new();
        let b = self.critic.bind(&mut g);
        let xv = g.input(x.clone());
        let q = self.critic_net.forward(&mut g, &b, &sb, xv)?;
        let loss = executed_component_loss(&mut g, q, batch, targets, k)?;
        let value = g.value(loss).data[0];
        if !value.is_finite() {
            return Err(AgentError::NonFinite("critic loss"));
        }
        g.backward(loss, None)?;
        Ok((value, b.grads(&g)))
    }

    fn apply(&mut self, actor: bool, mut grads: Vec<Tensor>) -> Result<(), AgentError> {
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(AgentError::NonFinite(if actor { "actor gradient" } else { "critic gradient" }));
        }
        if self.config.grad_clip > 0.0 {
            clip_grad_norm(&mut grads, self.config.grad_clip);
        }
        if actor {
            self.actor_opt.step(&mut self.actor, &grads);
        } else {
            self.critic_opt.step(&mut self.critic, &grads);
        }
        Ok(())
    }

    /// Objective `mean_b Σ_j q(s_b, π(s_b))_j` and its actor gradient (of the negation).
    pub fn actor_grads<F>(&self, states: &[&Observation], critic: F) -> Result<(f64, Vec<Tensor>), AgentError>
    where
        F: FnOnce(&mut Graph, &ObsBatch, Var) -> Result<Var, ShapeError>,
    {
        let sb = self.batch(states);
        let mut g = Graph::new();
        let b = self.actor.bind(&mut g);
        let x = self.actor_net.forward(&mut g, &b, &sb)?;
        let q = critic(&mut g, &sb, x)?;
        let total = g.sum(q);
        let objective = g.scale(total, 1.0 / states.len() as f64);
        let value = g.value(objective).data[0];
        if !value.is_finite() {
            return Err(AgentError::NonFinite("actor objective"));
        }
        let loss = g.scale(objective, -1.0);
        g.backward(loss, None)?;
        Ok((value, b.grads(&g)))
    }

    /// One actor step against a caller-supplied critic of the durations.
    pub fn actor_update_with<F>(&mut self, states: &[&Observation], critic: F) -> Result<f64, AgentError>
    where
        F: FnOnce(&mut Graph, &ObsBatch, Var) -> Result<Var, ShapeError>,
    {
        let (value, grads) = self.actor_grads(states, critic)?;
        self.apply(true, grads)?;
        Ok(value)
    }

    /// One actor step against the online critic, which stays fixed.
    pub fn actor_update(&mut self, states: &[&Observation]) -> Result<f64, AgentError> {
        let (value, grads) = self.actor_grads(states, |g, sb, x| {
            let cb = self.critic.bind(g);
            self.critic_net.forward(g, &cb, sb, x)
        })?;
        self.apply(true, grads)?;
        Ok(value)
    }

    pub fn soft_update_targets(&mut self) -> Result<(), ShapeError> {
        self.actor_target.soft_update(&self.actor, self.config.tau)?;
        self.critic_target.soft_update(&self.critic, self.config.tau)
    }

    /// Critic step on a sampled batch; every `actor_delay` steps also an
    /// actor step and target blending.
    pub fn train_step(&mut self, buffer: &ReplayBuffer<Transition>) -> Result<UpdateStats, AgentError> {
        let idx = {
            let sample = buffer.sample(self.config.batch_size, &mut self.rng)?;
            sample.into_iter().cloned().collect::<Vec<Transition>>()
        };
        let batch: Vec<&Transition> = idx.iter().collect();
        let critic_loss = self.critic_update(&batch)?;
        self.critic_steps += 1;
        let mut actor_objective = None;
        if self.critic_steps % self.config.actor_delay.max(1) == 0 {
            let states: Vec<&Observation> = batch.iter().map(|t| &t.s).collect();
            actor_objective = Some(self.actor_update(&states)?);
            self.soft_update_targets()?;
        }
        Ok(UpdateStats { critic_loss, actor_objective })
    }

    /// Per-sample Jacobians of the critic output with respect to the
    /// durations, evaluated at the actor's output.
    pub fn critic_jacobians(&self, states: &[&Observation]) -> Result<Vec<Vec<Vec<f64>>>, ShapeError> {
        let x = self.actor_values(&self.actor, states)?;
        let sb = self.batch(states);
        let mut g = Graph::new();
        let b = self.critic.bind(&mut g);
        let xv = g.input(x);
        let q = self.critic_net.forward(&mut g, &b, &sb, xv)?;
        batch_jacobians(&mut g, q, xv)
    }

    /// Finite-difference check of the critic's parameter gradients for
    /// `sum_k q_k(s, x)` over a batch.
    pub fn critic_gradient_check(&self, states: &[&Observation], x: &Tensor, eps: f64) -> Result<GradCheckReport, GradCheckError> {
        let batch = self.batch(states);
        gradient_check(&self.critic, eps, &CriticSum { net: &self.critic_net, batch: &batch, x })
    }

    pub fn is_finite(&self) -> bool {
        self.actor.is_finite() && self.critic.is_finite()
    }

    /// All parameters, optimizer moments and sampler state in one file image.
    pub fn to_bytes(&self, config_hash: &str) -> Vec<u8> {
        let mut bundle = self.actor.with_prefix("actor/");
        bundle.extend(&self.critic.with_prefix("critic/"));
        bundle.extend(&self.actor_target.with_prefix("actor_target/"));
        bundle.extend(&self.critic_target.with_prefix("critic_target/"));
        bundle.extend(&self.actor_opt.moments(&self.actor).with_prefix("adam_actor/"));
        bundle.extend(&self.critic_opt.moments(&self.critic).with_prefix("adam_critic/"));
        let meta = CheckpointMeta {
            config: self.config.clone(),
            bounds: self.bounds,
            membership: self.membership.clone(),
            config_hash: config_hash.to_string(),
            critic_steps: self.critic_steps,
            actor_adam_t: self.actor_opt.t,
            critic_adam_t: self.critic_opt.t,
            rng_seed: self.rng.get_seed().to_vec(),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos().to_string(),
        };
        bundle.to_bytes(&serde_json::to_string(&meta).expect("serializable"))
    }

    /// Restores an agent; also returns the stored config hash.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Agent, String), AgentError> {
        let (meta, bundle) = ParamSet::from_bytes(bytes)?;
        let meta: CheckpointMeta = serde_json::from_str(&meta).map_err(|e| AgentError::Meta(e.to_string()))?;
        let mut agent = Agent::new(meta.config, meta.membership, meta.bounds);
        let bad = |what: &str| AgentError::Meta(format!("{what} does not match the architecture"));
        agent.actor.assign(&bundle.strip_prefix("actor/")).map_err(|_| bad("actor"))?;
        agent.critic.assign(&bundle.strip_prefix("critic/")).map_err(|_| bad("critic"))?;
        agent.actor_target.assign(&bundle.strip_prefix("actor_target/")).map_err(|_| bad("actor target"))?;
        agent.critic_target.assign(&bundle.strip_prefix("critic_target/")).map_err(|_| bad("critic target"))?;
        if !agent.actor_opt.restore(&bundle.strip_prefix("adam_actor/"), &agent.actor, meta.actor_adam_t)
            || !agent.critic_opt.restore(&bundle.strip_prefix("adam_critic/"), &agent.critic, meta.critic_adam_t)
        {
            return Err(bad("optimizer state"));
        }
        let seed: [u8; 32] = meta.rng_seed.as_slice().try_into().map_err(|_| bad("rng seed"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(meta.rng_stream);
        rng.set_word_pos(meta.rng_word_pos.parse().map_err(|_| bad("rng position"))?);
        agent.rng = rng;
        agent.critic_steps = meta.critic_steps;
        Ok((agent, meta.config_hash))
    }

    pub fn save(&self, path: &std::path::Path, config_hash: &str) -> Result<(), AgentError> {
        std::fs::write(path, self.to_bytes(config_hash)).map_err(FormatError::from)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<(Agent, String), AgentError> {
        Agent::from_bytes(&std::fs::read(path).map_err(FormatError::from)?)
    }
}

/// `mean_b (q[b, k_b] − y_b)²`.
/// Sum of all critic outputs at fixed states and durations.
pub struct CriticSum<'a> {
    pub net: &'a CriticNet,
    pub batch: &'a ObsBatch,
    pub x: &'a Tensor,
}

impl Objective for CriticSum<'_> {
    fn build<T: Real>(&self, g: &mut Graph<T>, p: &Bound) -> Result<Var, ShapeError> {
        let xv = g.constant(self.x);
        let q = self.net.forward(g, p, self.batch, xv)?;
        Ok(g.sum(q))
    }
}

fn executed_component_loss(g: &mut Graph, q: Var, batch: &[&Transition], targets: &[f64], k: usize) -> Result<Var, ShapeError> {
    let n = batch.len();
    let mut onehot = Tensor::zeros([n, k, 1]);
    for (i, t) in batch.iter().enumerate() {
        *onehot.at_mut(i, t.k, 0) = 1.0;
    }
    let y = g.input(Tensor::from_vec([n, 1, 1], targets.to_vec())?);
    let sel = g.input(onehot);
    let diff = g.sub(q, y)?;
    let masked = g.mul(diff, sel)?;
    let sq = g.mul(masked, masked)?;
    let total = g.sum(sq);
    Ok(g.scale(total, 1.0 / n as f64))
}

#[cfg(test)]
mod tests;
