//! Actor and critic graphs built on the shared phase-feature extractor.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Bound, Graph, ParamSet, Real, ShapeError, Tensor, Var};
use crate::net::{IntersectionId, RoadNetwork, ENTRY_SLOTS};
use crate::neighbor::{NeighborBatch, NeighborEmbed, NB_WIDTH};
use crate::observe::{Observation, LANE_FEATURES};
use crate::sim::DurationBounds;

/// Lane counts are scaled by this before embedding.
pub const LANE_SCALE: f64 = 0.1;

/// Which entry-lane slots feed each phase row, as a row-normalized mixing matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseMembership {
    pub slots: Vec<Vec<usize>>,
}

impl PhaseMembership {
    pub fn from_network(net: &RoadNetwork, id: IntersectionId) -> Self {
        let slots = net
            .phase_slots(id)
            .iter()
            .map(|row| row.iter().enumerate().filter(|(_, &on)| on).map(|(s, _)| s).collect())
            .collect();
        PhaseMembership { slots }
    }

    pub fn num_phases(&self) -> usize {
        self.slots.len()
    }

    /// `(K, 12)` matrix averaging member lanes.
    pub fn mix(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.slots.len() * ENTRY_SLOTS];
        for (k, members) in self.slots.iter().enumerate() {
            for &s in members {
                m[k * ENTRY_SLOTS + s] = 1.0 / members.len() as f64;
            }
        }
        m
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetShape {
    pub num_phases: usize,
    pub embed_dim: usize,
    pub head_width: usize,
    pub alpha: f64,
    pub neighbors: bool,
}

#[derive(Clone, Debug)]
pub struct Dense {
    w: usize,
    b: usize,
}

impl Dense {
    pub fn new(p: &mut ParamSet, name: &str, din: usize, dout: usize, rng: &mut impl Rng) -> Self {
        let w = p.add_uniform(&format!("{name}.w"), [1, din, dout], din, rng);
        let b = p.add_uniform(&format!("{name}.b"), [1, 1, dout], din, rng);
        Dense { w, b }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var, ShapeError> {
        g.dense(x, p[self.w], Some(p[self.b]))
    }
}

/// One scalar output head per phase row.
#[derive(Clone, Debug)]
struct RowHead {
    w: usize,
    b: usize,
}

impl RowHead {
    fn new(p: &mut ParamSet, name: &str, rows: usize, din: usize, rng: &mut impl Rng) -> Self {
        let w = p.add_uniform(&format!("{name}.w"), [rows, din, 1], din, rng);
        let b = p.add_uniform(&format!("{name}.b"), [1, rows, 1], din, rng);
        RowHead { w, b }
    }

    fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var, ShapeError> {
        g.row_dense(x, p[self.w], Some(p[self.b]))
    }
}

/// Scaled dot-product attention over rows with a residual mix.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    q: Dense,
    k: Dense,
    v: Dense,
    dk: usize,
}

impl AttentionBlock {
    pub fn new(p: &mut ParamSet, name: &str, din: usize, d: usize, rng: &mut impl Rng) -> Self {
        AttentionBlock {
            q: Dense::new(p, &format!("{name}.q"), din, d, rng),
            k: Dense::new(p, &format!("{name}.k"), din, d, rng),
            v: Dense::new(p, &format!("{name}.v"), din, d, rng),
            dk: d,
        }
    }

    /// Attention of `source` rows only.
    pub fn attend<T: Real>(&self, g: &mut Graph<T>, p: &Bound, source: Var) -> Result<Var, ShapeError> {
        let q = self.q.forward(g, p, source)?;
        let k = self.k.forward(g, p, source)?;
        let v = self.v.forward(g, p, source)?;
        g.attention(q, k, v, 1.0 / (self.dk as f64).sqrt())
    }

    /// `alpha * residual + (1 - alpha) * attend(source)`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, source: Var, residual: Var, alpha: f64) -> Result<Var, ShapeError> {
        let a = self.attend(g, p, source)?;
        g.affine_mix(alpha, residual, a)
    }
}

/// Network inputs for a batch of observations.
#[derive(Clone, Debug)]
pub struct ObsBatch {
    pub size: usize,
    /// `(B, 12, 6)`, scaled.
    pub lanes: Tensor,
    /// `(B, K, 2)`: active flag and elapsed green over the upper bound.
    pub extras: Tensor,
    pub neighbors: Option<NeighborBatch>,
}

impl ObsBatch {
    pub fn new(obs: &[&Observation], k: usize, bounds: &DurationBounds, neighbors: bool) -> Self {
        let b = obs.len();
        let mut lanes = Tensor::zeros([b, ENTRY_SLOTS, LANE_FEATURES]);
        let mut extras = Tensor::zeros([b, k, 2]);
        for (i, o) in obs.iter().enumerate() {
            let base = i * ENTRY_SLOTS * LANE_FEATURES;
            for (dst, src) in lanes.data[base..base + ENTRY_SLOTS * LANE_FEATURES].iter_mut().zip(&o.lanes) {
                *dst = src * LANE_SCALE;
            }
            for j in 0..k {
                *extras.at_mut(i, j, 0) = if j == o.phase { 1.0 } else { 0.0 };
                *extras.at_mut(i, j, 1) = o.elapsed / bounds.max;
            }
        }
        let neighbors = neighbors.then(|| NeighborBatch::new(obs, k, bounds));
        ObsBatch { size: b, lanes, extras, neighbors }
    }
}

/// Lane embedding, mean fusion into phase rows, and one attention block.
#[derive(Clone, Debug)]
pub struct Fem {
    lane: Dense,
    fuse: Dense,
    attn: AttentionBlock,
    neighbor: Option<NeighborEmbed>,
    mix: Vec<f64>,
    shape: NetShape,
}

impl Fem {
    pub fn new(p: &mut ParamSet, shape: NetShape, membership: &PhaseMembership, rng: &mut impl Rng) -> Self {
        let d = shape.embed_dim;
        let lane = Dense::new(p, "fem.lane", LANE_FEATURES, d, rng);
        let extra = if shape.neighbors { NB_WIDTH } else { 0 };
        let fuse = Dense::new(p, "fem.fuse", d + 2 + extra, d, rng);
        let attn = AttentionBlock::new(p, "fem.attn", d, d, rng);
        let neighbor = shape.neighbors.then(|| NeighborEmbed::new(p, "nb", shape.num_phases, rng));
        Fem { lane, fuse, attn, neighbor, mix: membership.mix(), shape }
    }

    /// Phase-feature matrix `(B, K, d)`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, batch: &ObsBatch) -> Result<Var, ShapeError> {
        let k = self.shape.num_phases;
        let lanes = g.constant(&batch.lanes);
        let h = self.lane.forward(g, p, lanes)?;
        let h = g.relu(h);
        let rows = g.row_mix(h, &self.mix, k)?;
        let extras = g.constant(&batch.extras);
        let mut parts = vec![rows, extras];
        if let Some(nb) = &self.neighbor {
            let e = match &batch.neighbors {
                Some(nbatch) => nb.forward(g, p, nbatch)?,
                None => g.constant(&Tensor::zeros([batch.size, 1, NB_WIDTH])),
            };
            parts.push(g.broadcast_to(e, [batch.size, k, NB_WIDTH])?);
        }
        let cat = g.concat(&parts, 2)?;
        let f = self.fuse.forward(g, p, cat)?;
        let f = g.relu(f);
        self.attn.forward(g, p, f, f, self.shape.alpha)
    }
}

#[derive(Clone, Debug)]
pub struct ActorNet {
    pub fem: Fem,
    hidden: Dense,
    head: RowHead,
    bounds: DurationBounds,
}

impl ActorNet {
    pub fn new(shape: NetShape, membership: &PhaseMembership, bounds: DurationBounds, rng: &mut impl Rng) -> (Self, ParamSet) {
        let mut p = ParamSet::new();
        let fem = Fem::new(&mut p, shape, membership, rng);
        let hidden = Dense::new(&mut p, "actor.hidden", shape.embed_dim, shape.head_width, rng);
        let head = RowHead::new(&mut p, "actor.head", shape.num_phases, shape.head_width, rng);
        (ActorNet { fem, hidden, head, bounds }, p)
    }

    /// Durations `(B, K, 1)` inside the bounds.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, batch: &ObsBatch) -> Result<Var, ShapeError> {
        let h = self.fem.forward(g, p, batch)?;
        let h = self.hidden.forward(g, p, h)?;
        let h = g.relu(h);
        let o = self.head.forward(g, p, h)?;
        let s = g.sigmoid(o);
        let s = g.scale(s, self.bounds.span());
        Ok(g.add_scalar(s, self.bounds.min))
    }
}

#[derive(Clone, Debug)]
pub struct CriticNet {
    pub fem: Fem,
    embed: AttentionBlock,
    hidden: Dense,
    head: RowHead,
    bounds: DurationBounds,
    alpha: f64,
}

impl CriticNet {
    pub fn new(shape: NetShape, membership: &PhaseMembership, bounds: DurationBounds, rng: &mut impl Rng) -> (Self, ParamSet) {
        let mut p = ParamSet::new();
        let fem = Fem::new(&mut p, shape, membership, rng);
        let embed = AttentionBlock::new(&mut p, "critic.param", shape.embed_dim + 1, shape.embed_dim, rng);
        let hidden = Dense::new(&mut p, "critic.hidden", shape.embed_dim, shape.head_width, rng);
        let head = RowHead::new(&mut p, "critic.head", shape.num_phases, shape.head_width, rng);
        (CriticNet { fem, embed, hidden, head, bounds, alpha: shape.alpha }, p)
    }

    /// Joins each phase row with its normalized duration and mixes rows by attention.
    pub fn param_embed<T: Real>(&self, g: &mut Graph<T>, p: &Bound, h: Var, x: Var, alpha: f64) -> Result<Var, ShapeError> {
        let xn = g.add_scalar(x, -self.bounds.min);
        let xn = g.scale(xn, 1.0 / self.bounds.span());
        let gamma = g.concat(&[h, xn], 2)?;
        self.embed.forward(g, p, gamma, h, alpha)
    }

    /// Vector value `(B, K, 1)` for durations `x` of shape `(B, K, 1)`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, batch: &ObsBatch, x: Var) -> Result<Var, ShapeError> {
        let h = self.fem.forward(g, p, batch)?;
        let h = self.param_embed(g, p, h, x, self.alpha)?;
        let h = self.hidden.forward(g, p, h)?;
        let h = g.relu(h);
        self.head.forward(g, p, h)
    }
}
