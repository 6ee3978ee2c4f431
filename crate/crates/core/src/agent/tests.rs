use super::*;
use crate::net::{build_network, IntersectionId, PhaseLayout};
use crate::scenario::grid_network_spec;
use rand::{Rng, SeedableRng};
use twofloat::TwoFloat;

fn membership() -> PhaseMembership {
    let net = build_network(&grid_network_spec(1, 1, 300.0), PhaseLayout::ThroughLeft).unwrap();
    PhaseMembership::from_network(&net, IntersectionId(0))
}

fn small_config(seed: u64) -> AgentConfig {
    AgentConfig { embed_dim: 8, head_width: 8, batch_size: 8, seed, ..AgentConfig::default() }
}

fn random_obs(rng: &mut ChaCha8Rng) -> Observation {
    let mut o = Observation::empty(4);
    o.lanes.iter_mut().for_each(|v| *v = rng.random_range(0..12) as f64);
    o.phase = rng.random_range(0..4);
    o.elapsed = rng.random_range(10.0..40.0);
    o
}

fn random_transitions(n: usize, seed: u64, fixed_k: Option<usize>) -> Vec<Transition> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Transition {
            s: random_obs(&mut rng),
            k: fixed_k.unwrap_or_else(|| rng.random_range(0..4)),
            x: rng.random_range(10.0..40.0),
            r: -(rng.random_range(0..30) as f64),
            s_next: random_obs(&mut rng),
        })
        .collect()
}

#[test]
fn argmax_breaks_ties_low() {
    assert_eq!(argmax(&[-3.0, -1.0, -7.0, -1.0]), 1);
    assert_eq!(argmax(&[0.0, 0.0]), 0);
}

#[test]
fn selection_in_bounds() {
    let agent = Agent::new(small_config(1), membership(), DurationBounds::default());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let s = agent.select_action(&random_obs(&mut rng)).unwrap();
        assert!((10.0..=40.0).contains(&s.duration));
        assert_eq!(s.params.len(), 4);
        assert_eq!(s.duration, s.params[s.phase]);
        assert_eq!(s.phase, argmax(&s.q));
    }
}

#[test]
fn critic_overfits_a_fixed_batch() {
    let mut agent = Agent::new(AgentConfig { gamma: 0.0, ..small_config(3) }, membership(), DurationBounds::default());
    let mut trans = random_transitions(8, 4, None);
    trans.iter_mut().for_each(|t| t.r = 0.0);
    let batch: Vec<&Transition> = trans.iter().collect();
    let x = agent.masked_inputs(&batch).unwrap();
    let targets = agent.critic_targets(&batch).unwrap();
    assert!(targets.iter().all(|&y| y == 0.0));
    let mut losses = Vec::new();
    for _ in 0..500 {
        let (loss, grads) = agent.critic_loss_grads(&batch, &x, &targets).unwrap();
        losses.push(loss);
        agent.apply(false, grads).unwrap();
    }
    for w in losses[..100].windows(2) {
        assert!(w[1] <= w[0], "{} > {}", w[1], w[0]);
    }
    assert!(losses[99] < 0.2 * losses[0], "{} vs {}", losses[99], losses[0]);
    assert!(losses[499] < 1e-4 * losses[0], "{} vs {}", losses[499], losses[0]);
}

#[test]
fn only_executed_head_is_supervised() {
    let agent = Agent::new(small_config(5), membership(), DurationBounds::default());
    let trans = random_transitions(8, 6, Some(1));
    let batch: Vec<&Transition> = trans.iter().collect();
    let x = Tensor::filled([8, 4, 1], 25.0);
    let targets = vec![-1.0; 8];
    let (_, grads) = agent.critic_loss_grads(&batch, &x, &targets).unwrap();
    let w = agent.critic.position("critic.head.w").unwrap();
    let b = agent.critic.position("critic.head.b").unwrap();
    let hw = agent.config.head_width;
    for j in 0..4 {
        let wj = &grads[w].data[j * hw..(j + 1) * hw];
        let nonzero = wj.iter().any(|v| *v != 0.0) || grads[b].data[j] != 0.0;
        assert_eq!(nonzero, j == 1, "head {j}");
    }
}

#[test]
fn loss_ignores_heads_of_unexecuted_actions() {
    // changing head j's weights leaves the loss unchanged when no sample executed j
    let agent = Agent::new(small_config(7), membership(), DurationBounds::default());
    let trans = random_transitions(8, 8, Some(2));
    let batch: Vec<&Transition> = trans.iter().collect();
    let x = Tensor::filled([8, 4, 1], 18.0);
    let targets = vec![-0.5; 8];
    let (base, _) = agent.critic_loss_grads(&batch, &x, &targets).unwrap();
    let mut other = agent.clone();
    let w = other.critic.position("critic.head.w").unwrap();
    let hw = other.config.head_width;
    for j in [0, 1, 3] {
        other.critic.get_mut(w).data[j * hw..(j + 1) * hw].iter_mut().for_each(|v| *v = 0.0);
    }
    let (after, _) = other.critic_loss_grads(&batch, &x, &targets).unwrap();
    assert_eq!(base, after);
}

/// `q_j = -(x_j - c_j)^2` as a graph over the actor output.
fn quadratic_critic(c: [f64; 4]) -> impl Fn(&mut Graph, &ObsBatch, Var) -> Result<Var, ShapeError> {
    move |g: &mut Graph, sb: &ObsBatch, x: Var| {
        let target = g.input(Tensor::from_vec([1, 4, 1], c.to_vec())?);
        let _ = sb;
        let d = g.sub(x, target)?;
        let sq = g.mul(d, d)?;
        Ok(g.scale(sq, -1.0))
    }
}

#[test]
fn actor_objective_gradient_matches_finite_differences() {
    let agent = Agent::new(small_config(9), membership(), DurationBounds::default());
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let states: Vec<Observation> = (0..3).map(|_| random_obs(&mut rng)).collect();
    let refs: Vec<&Observation> = states.iter().collect();
    let c = [14.0, 22.0, 31.0, 37.0];
    let (_, grads) = agent.actor_grads(&refs, quadratic_critic(c)).unwrap();
    let sb = agent.batch(&refs);
    // objective in double-double with one parameter entry shifted
    let objective = |pi: usize, i: usize, delta: TwoFloat| {
        let mut g = Graph::<TwoFloat>::with_scalar();
        let b = agent.actor.bind(&mut g);
        g.leaf_mut(b[pi]).data[i] += delta;
        let x = agent.actor_net.forward(&mut g, &b, &sb).unwrap();
        let x = g.value(x);
        let mut s = TwoFloat::from(0.0);
        for bi in 0..3 {
            for j in 0..4 {
                let d = x.at(bi, j, 0) - c[j];
                s -= d * d;
            }
        }
        s / 3.0
    };
    let eps = TwoFloat::from(1e-5);
    let mut worst: f64 = 0.0;
    for pi in 0..agent.actor.len() {
        for i in 0..agent.actor.get(pi).len() {
            // grads are of the negated objective
            let numeric = -((objective(pi, i, eps) - objective(pi, i, -eps)) / 2e-5).hi();
            worst = worst.max(crate::autodiff::relative_error(grads[pi].data[i], numeric));
        }
    }
    assert!(worst < 1e-4, "{worst}");
}

#[test]
fn actor_objective_is_batch_order_invariant() {
    let agent = Agent::new(small_config(11), membership(), DurationBounds::default());
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let states: Vec<Observation> = (0..6).map(|_| random_obs(&mut rng)).collect();
    let fwd: Vec<&Observation> = states.iter().collect();
    let rev: Vec<&Observation> = states.iter().rev().collect();
    let (a, _) = agent.actor_grads(&fwd, |g, sb, x| {
        let cb = agent.critic.bind(g);
        agent.critic_net.forward(g, &cb, sb, x)
    })
    .unwrap();
    let (b, _) = agent.actor_grads(&rev, |g, sb, x| {
        let cb = agent.critic.bind(g);
        agent.critic_net.forward(g, &cb, sb, x)
    })
    .unwrap();
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let mut agent = Agent::new(small_config(13), membership(), DurationBounds::default());
        let mut buf = ReplayBuffer::new(100);
        random_transitions(40, 14, None).into_iter().for_each(|t| buf.push(t));
        for _ in 0..6 {
            agent.train_step(&buf).unwrap();
        }
        agent
    };
    let (a, b) = (run(), run());
    assert_eq!(a.actor, b.actor);
    assert_eq!(a.critic, b.critic);
    assert_eq!(a.critic_target, b.critic_target);
    assert_eq!(a.critic_steps, 6);
}

#[test]
fn checkpoint_round_trip_resumes_identically() {
    let mut agent = Agent::new(small_config(15), membership(), DurationBounds::default());
    let mut buf = ReplayBuffer::new(100);
    random_transitions(40, 16, None).into_iter().for_each(|t| buf.push(t));
    for _ in 0..3 {
        agent.train_step(&buf).unwrap();
    }
    let bytes = agent.to_bytes("abc123");
    let (mut restored, hash) = Agent::from_bytes(&bytes).unwrap();
    assert_eq!(hash, "abc123");
    assert_eq!(restored.to_bytes("abc123"), bytes);
    agent.train_step(&buf).unwrap();
    restored.train_step(&buf).unwrap();
    assert_eq!(agent.actor, restored.actor);
    assert_eq!(agent.critic, restored.critic);
}

#[test]
fn underfull_buffer_reported() {
    let mut agent = Agent::new(small_config(17), membership(), DurationBounds::default());
    let mut buf = ReplayBuffer::new(100);
    random_transitions(3, 18, None).into_iter().for_each(|t| buf.push(t));
    assert!(matches!(agent.train_step(&buf), Err(AgentError::Underfull(_))));
}

#[test]
fn jacobians_have_k_by_k_entries() {
    let agent = Agent::new(small_config(19), membership(), DurationBounds::default());
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let states: Vec<Observation> = (0..3).map(|_| random_obs(&mut rng)).collect();
    let refs: Vec<&Observation> = states.iter().collect();
    let j = agent.critic_jacobians(&refs).unwrap();
    assert_eq!(j.len(), 3);
    assert!(j.iter().all(|m| m.len() == 4 && m.iter().all(|r| r.len() == 4)));
    // attention couples the rows, so off-diagonal entries are nonzero at init
    assert!(j[0][0][1] != 0.0);
}

#[test]
fn neighbor_variant_runs() {
    let cfg = AgentConfig { neighbors: true, ..small_config(21) };
    let mut agent = Agent::new(cfg, membership(), DurationBounds::default());
    assert!(agent.actor.position("nb.direction").is_some());
    let mut buf = ReplayBuffer::new(100);
    random_transitions(20, 22, None).into_iter().for_each(|t| buf.push(t));
    agent.train_step(&buf).unwrap();
    agent.train_step(&buf).unwrap();
    assert!(agent.is_finite());
}

#[test]
fn critic_gradients_match_finite_differences() {
    let agent = Agent::new(small_config(23), membership(), DurationBounds::default());
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let states: Vec<Observation> = (0..2).map(|_| random_obs(&mut rng)).collect();
    let refs: Vec<&Observation> = states.iter().collect();
    let x = Tensor::from_vec([2, 4, 1], (0..8).map(|_| rng.random_range(10.0..40.0)).collect()).unwrap();
    let rep = agent.critic_gradient_check(&refs, &x, 1e-5).unwrap();
    assert_eq!(rep.checked, agent.critic.num_scalars());
    assert!(rep.max_rel_error < 1e-6, "{rep:?}");
}

