//! Finite-difference verification of reverse-mode gradients.

use thiserror::Error;
use twofloat::TwoFloat;

use super::graph::{Graph, Var};
use super::params::{Bound, ParamSet};
use super::tensor::{Real, ShapeError, Tensor};

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("function output must be a scalar, got shape {0:?}")]
    NotScalar([usize; 3]),
    #[error("non-finite value at parameter {name}[{index}]")]
    NonFinite { name: String, index: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Scalar function of a parameter set, buildable in any scalar type.
pub trait Objective {
    fn build<T: Real>(&self, g: &mut Graph<T>, p: &Bound) -> Result<Var, ShapeError>;
}

fn scalar_out<T: Real>(g: &Graph<T>, out: Var) -> Result<T, GradCheckError> {
    match g.shape(out) {
        [1, 1, 1] => Ok(g.value(out).data[0]),
        s => Err(GradCheckError::NotScalar(s)),
    }
}

/// Compares backprop gradients of `f` against central differences with
/// step `eps`, over every parameter entry.
///
/// The backward pass runs in f64. The differenced evaluations run in
/// double-double so that cancellation in `f(θ+ε) − f(θ−ε)` does not swamp
/// small gradients.
pub fn gradient_check(params: &ParamSet, eps: f64, f: &impl Objective) -> Result<GradCheckReport, GradCheckError> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let out = f.build(&mut g, &bound)?;
    scalar_out(&g, out)?;
    g.backward(out, None)?;
    let grads = bound.grads(&g);

    let eval = |pi: usize, idx: usize, delta: TwoFloat| -> Result<TwoFloat, GradCheckError> {
        let mut g = Graph::<TwoFloat>::with_scalar();
        let b = params.bind(&mut g);
        g.leaf_mut(b[pi]).data[idx] += delta;
        let out = f.build(&mut g, &b)?;
        scalar_out(&g, out)
    };
    let step = TwoFloat::from(eps);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for (pi, name) in params.names().iter().enumerate() {
        for idx in 0..params.get(pi).len() {
            let diff = eval(pi, idx, step)? - eval(pi, idx, -step)?;
            let numeric = (diff / (2.0 * eps)).hi();
            let analytic = grads[pi].data[idx];
            if !numeric.is_finite() || !analytic.is_finite() {
                return Err(GradCheckError::NonFinite { name: name.clone(), index: idx });
            }
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report = GradCheckReport {
                    max_rel_error: err.max(report.max_rel_error),
                    worst_param: name.clone(),
                    worst_index: idx,
                    analytic,
                    numeric,
                    checked: report.checked,
                };
            }
        }
    }
    Ok(report)
}

/// Per-sample Jacobians `d out[b, i, 0] / d input[b, j, 0]` via one backward
/// pass per output component. `out` and `input` must be `(B, K, 1)`.
pub fn batch_jacobians(g: &mut Graph, out: Var, input: Var) -> Result<Vec<Vec<Vec<f64>>>, ShapeError> {
    let so = g.shape(out);
    let si = g.shape(input);
    if so[2] != 1 || si[2] != 1 || so[0] != si[0] {
        return Err(ShapeError::new("jacobian", &[so, si]));
    }
    let (bsz, k_out, k_in) = (so[0], so[1], si[1]);
    let mut jac = vec![vec![vec![0.0; k_in]; k_out]; bsz];
    for i in 0..k_out {
        g.zero_grad();
        let mut seed = Tensor::zeros(so);
        for b in 0..bsz {
            *seed.at_mut(b, i, 0) = 1.0;
        }
        g.backward(out, Some(&seed))?;
        let gi = g.grad_or_zero(input);
        for (b, rows) in jac.iter_mut().enumerate() {
            for j in 0..k_in {
                rows[i][j] = gi.at(b, j, 0);
            }
        }
    }
    g.zero_grad();
    Ok(jac)
}
