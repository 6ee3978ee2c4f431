//! Attention summary of adjacent intersections for the neighbor-aware variant.

use rand::Rng;

use crate::agent::nets::{AttentionBlock, Dense, LANE_SCALE};
use crate::autodiff::{Bound, Graph, ParamSet, Real, ShapeError, Tensor, Var};
use crate::observe::{Observation, LANE_BLOCK};
use crate::sim::DurationBounds;

/// Width of the neighbor summary vector.
pub const NB_WIDTH: usize = 16;
/// Width of the learned direction and distance encodings.
pub const NB_CODE: usize = 8;
/// Distances are divided by this before the learned lift.
pub const DISTANCE_SCALE: f64 = 1000.0;

/// Per-sample neighbor rows.
#[derive(Clone, Debug)]
pub struct NeighborBatch {
    /// `None` for a sample without neighbors.
    pub samples: Vec<Option<NeighborRows>>,
}

#[derive(Clone, Debug)]
pub struct NeighborRows {
    /// `(1, m, 72 + K)`: scaled lane block and normalized duration vector.
    pub state: Tensor,
    /// `(1, m, 4)` one-hot relative direction.
    pub direction: Tensor,
    /// `(1, m, 1)` distance over [`DISTANCE_SCALE`].
    pub distance: Tensor,
}

impl NeighborBatch {
    pub fn new(obs: &[&Observation], k: usize, bounds: &DurationBounds) -> Self {
        let samples = obs
            .iter()
            .map(|o| {
                let m = o.neighbors.len();
                if m == 0 {
                    return None;
                }
                let width = LANE_BLOCK + k;
                let mut state = Tensor::zeros([1, m, width]);
                let mut direction = Tensor::zeros([1, m, 4]);
                let mut distance = Tensor::zeros([1, m, 1]);
                for (i, nb) in o.neighbors.iter().enumerate() {
                    let row = &mut state.data[i * width..(i + 1) * width];
                    for (dst, src) in row[..LANE_BLOCK].iter_mut().zip(&nb.lanes) {
                        *dst = src * LANE_SCALE;
                    }
                    for (dst, src) in row[LANE_BLOCK..].iter_mut().zip(&nb.x_nb) {
                        *dst = bounds.normalize(*src);
                    }
                    *direction.at_mut(0, i, nb.direction.index()) = 1.0;
                    *distance.at_mut(0, i, 0) = nb.distance / DISTANCE_SCALE;
                }
                Some(NeighborRows { state, direction, distance })
            })
            .collect();
        NeighborBatch { samples }
    }
}

#[derive(Clone, Debug)]
pub struct NeighborEmbed {
    direction_table: usize,
    distance: Dense,
    attn: AttentionBlock,
}

impl NeighborEmbed {
    pub fn new(p: &mut ParamSet, name: &str, k: usize, rng: &mut impl Rng) -> Self {
        let direction_table = p.add_uniform(&format!("{name}.direction"), [1, 4, NB_CODE], 1, rng);
        let distance = Dense::new(p, &format!("{name}.distance"), 1, NB_CODE, rng);
        let attn = AttentionBlock::new(p, &format!("{name}.attn"), LANE_BLOCK + k + 2 * NB_CODE, NB_WIDTH, rng);
        NeighborEmbed { direction_table, distance, attn }
    }

    /// Summary for one intersection's neighbors, `(1, 1, NB_WIDTH)` in (0, 1).
    pub fn embed<T: Real>(&self, g: &mut Graph<T>, p: &Bound, rows: &NeighborRows) -> Result<Var, ShapeError> {
        let state = g.constant(&rows.state);
        let dir = g.constant(&rows.direction);
        let dir = g.dense(dir, p[self.direction_table], None)?;
        let dist = g.constant(&rows.distance);
        let dist = self.distance.forward(g, p, dist)?;
        let gamma = g.concat(&[state, dir, dist], 2)?;
        let a = self.attn.attend(g, p, gamma)?;
        let s = g.sigmoid(a);
        g.mean(s, 1)
    }

    /// Summaries for a batch, `(B, 1, NB_WIDTH)`; zeros where a sample has no neighbors.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, batch: &NeighborBatch) -> Result<Var, ShapeError> {
        let mut parts = Vec::with_capacity(batch.samples.len());
        for s in &batch.samples {
            parts.push(match s {
                Some(rows) => self.embed(g, p, rows)?,
                None => g.constant(&Tensor::zeros([1, 1, NB_WIDTH])),
            });
        }
        g.concat(&parts, 0)
    }
}

/// Appends the neighbor summary to a flat observation vector.
pub fn augment_state(obs: &[f64], e_nb: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(obs.len() + e_nb.len());
    v.extend_from_slice(obs);
    v.extend_from_slice(e_nb);
    v
}
