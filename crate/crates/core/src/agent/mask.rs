//! Replacement of unexecuted duration components before critic training.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::sim::DurationBounds;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    /// Batch-calibrated Gaussian draws, clamped to the bounds.
    #[default]
    Gaussian,
    /// Per-action batch mean.
    Mean,
    /// Zero seconds.
    Zero,
    /// No mask: the current actor output fills the other components.
    None,
}

/// Per-action mean and variance of executed durations in a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

impl BatchStats {
    /// Population moments per action over members that executed it; actions
    /// with fewer than two members use the whole batch.
    pub fn from_batch(actions: &[(usize, f64)], k: usize) -> Self {
        let all: Vec<f64> = actions.iter().map(|&(_, x)| x).collect();
        let global = if all.is_empty() { (0.0, 0.0) } else { moments(&all) };
        let mut mean = vec![global.0; k];
        let mut var = vec![global.1; k];
        for j in 0..k {
            let xs: Vec<f64> = actions.iter().filter(|&&(a, _)| a == j).map(|&(_, x)| x).collect();
            if xs.len() >= 2 {
                (mean[j], var[j]) = moments(&xs);
            }
        }
        BatchStats { mean, var }
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().chain(&self.var).all(|v| v.is_finite())
    }
}

/// Draws before clamping: component `k` is `x_k`, others are Gaussian.
pub fn gaussian_fill(k: usize, x_k: f64, stats: &BatchStats, rng: &mut impl Rng) -> Vec<f64> {
    (0..stats.mean.len())
        .map(|j| {
            if j == k {
                x_k
            } else {
                let sd = stats.var[j].max(0.0).sqrt();
                let z: f64 = StandardNormal.sample(rng);
                stats.mean[j] + sd * z
            }
        })
        .collect()
}

/// The Gaussian mask: component `k` is returned exactly, the rest are
/// clamped draws.
pub fn mask(k: usize, x_k: f64, stats: &BatchStats, bounds: &DurationBounds, rng: &mut impl Rng) -> Vec<f64> {
    let mut x = gaussian_fill(k, x_k, stats, rng);
    for (j, v) in x.iter_mut().enumerate() {
        if j != k {
            *v = bounds.clamp(*v);
        }
    }
    x
}

/// Fills the unexecuted components according to `strategy`. `actor` supplies
/// the current policy output for [`MaskStrategy::None`].
pub fn fill(
    strategy: MaskStrategy,
    k: usize,
    x_k: f64,
    stats: &BatchStats,
    bounds: &DurationBounds,
    actor: Option<&[f64]>,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let kk = stats.mean.len();
    let mut x = match strategy {
        MaskStrategy::Gaussian => return mask(k, x_k, stats, bounds, rng),
        MaskStrategy::Mean => stats.mean.clone(),
        MaskStrategy::Zero => vec![0.0; kk],
        MaskStrategy::None => actor.expect("actor output required without a mask").to_vec(),
    };
    x[k] = x_k;
    x
}
