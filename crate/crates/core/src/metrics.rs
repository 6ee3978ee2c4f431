//! Travel-time metrics over episode logs and the gradient contribution matrix.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::sim::EpisodeLog;

/// Window used by [`dar`] unless another is given, seconds.
pub const DAR_WINDOW: u32 = 3600;
/// Jacobian column sums below this are skipped.
pub const DENOMINATOR_EPS: f64 = 1e-12;

/// Mean travel time over all vehicles; unfinished ones accrue time until the
/// horizon. 0 for an episode without vehicles.
pub fn att(log: &EpisodeLog) -> f64 {
    if log.vehicles.is_empty() {
        return 0.0;
    }
    let total: f64 = log
        .vehicles
        .iter()
        .map(|v| v.arrival_time.unwrap_or(log.horizon).saturating_sub(v.entry_time) as f64)
        .sum();
    total / log.vehicles.len() as f64
}

/// Mean travel time of arrived vehicles; NaN when none arrived.
pub fn datt(log: &EpisodeLog) -> f64 {
    let times: Vec<f64> =
        log.vehicles.iter().filter_map(|v| v.arrival_time.map(|a| a.saturating_sub(v.entry_time) as f64)).collect();
    if times.is_empty() {
        log::warn!("no vehicle arrived, travel time of arrivals undefined");
        return f64::NAN;
    }
    times.iter().sum::<f64>() / times.len() as f64
}

/// Share of vehicles entered within `window` that also arrived within it.
pub fn dar(log: &EpisodeLog, window: u32) -> f64 {
    let entered = log.vehicles.iter().filter(|v| v.entry_time <= window).count();
    if entered == 0 {
        return 1.0;
    }
    let arrived = log.vehicles.iter().filter(|v| v.entry_time <= window && v.arrival_time.is_some_and(|a| a <= window)).count();
    arrived as f64 / entered as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub att: f64,
    pub datt: f64,
    pub dar: f64,
    pub vehicles: usize,
}

impl EpisodeMetrics {
    pub fn of(log: &EpisodeLog) -> Self {
        EpisodeMetrics { att: att(log), datt: datt(log), dar: dar(log, DAR_WINDOW), vehicles: log.vehicles.len() }
    }

    /// No vehicles were scheduled; the travel times are conventions.
    pub fn is_empty(&self) -> bool {
        self.vehicles == 0
    }
}

/// Mean and population standard deviation, ignoring NaN entries.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let xs: Vec<f64> = values.iter().copied().filter(|v| !v.is_nan()).collect();
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Normalized share of each output's sensitivity to each duration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    /// `matrix[i][j]`: share of output `i` in the sensitivity to duration `j`.
    /// Columns sum to 1.
    pub matrix: Vec<Vec<f64>>,
    /// Sample/column pairs skipped for a vanishing denominator.
    pub skipped: usize,
    /// Columns with no usable contribution, set uniform.
    pub degenerate_columns: Vec<usize>,
}

impl Contribution {
    pub fn mean_diagonal(&self) -> f64 {
        let k = self.matrix.len();
        if k == 0 {
            return f64::NAN;
        }
        (0..k).map(|i| self.matrix[i][i]).sum::<f64>() / k as f64
    }
}

/// Contribution matrix from per-sample Jacobians `jac[n][i][j] = d r_i / d x_j`.
///
/// Each entry is `|sum_n jac[n][i][j] / sum_k jac[n][k][j]|`, then every
/// column is divided by its sum.
pub fn contribution_matrix(jacobians: &[Vec<Vec<f64>>]) -> Contribution {
    let k = jacobians.first().map_or(0, Vec::len);
    let mut raw = vec![vec![0.0; k]; k];
    let mut skipped = 0;
    for jac in jacobians {
        for j in 0..k {
            let denom: f64 = (0..k).map(|i| jac[i][j]).sum();
            if denom.abs() < DENOMINATOR_EPS {
                skipped += 1;
                continue;
            }
            for i in 0..k {
                raw[i][j] += jac[i][j] / denom;
            }
        }
    }
    let mut matrix = vec![vec![0.0; k]; k];
    let mut degenerate_columns = Vec::new();
    for j in 0..k {
        let col: Vec<f64> = (0..k).map(|i| raw[i][j].abs()).collect();
        let total: f64 = col.iter().sum();
        if total > 0.0 && total.is_finite() {
            for i in 0..k {
                matrix[i][j] = col[i] / total;
            }
        } else {
            log::warn!("contribution column {j} is all zero, using uniform shares");
            degenerate_columns.push(j);
            for row in matrix.iter_mut() {
                row[j] = 1.0 / k as f64;
            }
        }
    }
    Contribution { matrix, skipped, degenerate_columns }
}

/// One line of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub episode: usize,
    pub seed: u64,
    pub att: f64,
    pub datt: f64,
    pub dar: f64,
    /// Mean diagonal of the contribution matrix, NaN when not computed.
    pub mean_diag: f64,
}

pub const CSV_HEADER: &str = "episode,seed,att,datt,dar,mean_diag,config_hash";

pub fn to_csv(rows: &[MetricsRow], config_hash: &str) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{},{},{}", r.episode, r.seed, r.att, r.datt, r.dar, r.mean_diag, config_hash);
    }
    out
}
