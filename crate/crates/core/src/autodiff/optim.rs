use super::params::ParamSet;
use super::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    /// One descent step along `grads`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) {
        assert_eq!(grads.len(), params.len(), "gradient count does not match parameters");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let p = params.get_mut(i);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..g.data.len() {
                let gj = g.data[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                p.data[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }

    /// Moments as a parameter set shaped like `template`, prefixed `m/` and `v/`.
    pub fn moments(&self, template: &ParamSet) -> ParamSet {
        let mut out = ParamSet::new();
        for (prefix, store) in [("m/", &self.m), ("v/", &self.v)] {
            for ((name, t), data) in template.iter().zip(store) {
                out.add(&format!("{prefix}{name}"), Tensor { shape: t.shape, data: data.clone() });
            }
        }
        out
    }

    pub fn restore(&mut self, moments: &ParamSet, template: &ParamSet, t: u64) -> bool {
        let m = moments.strip_prefix("m/");
        let v = moments.strip_prefix("v/");
        if m.names() != template.names() || v.names() != template.names() {
            return false;
        }
        self.m = m.tensors().iter().map(|t| t.data.clone()).collect();
        self.v = v.tensors().iter().map(|t| t.data.clone()).collect();
        self.t = t;
        true
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
