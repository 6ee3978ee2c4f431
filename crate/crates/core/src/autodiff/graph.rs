//! Reverse-mode tape over [`Tensor`] values.

use super::tensor::{lit, Real, ShapeError, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Dense { x: Var, w: Var, b: Option<Var> },
    RowDense { x: Var, w: Var, b: Option<Var> },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Mean { x: Var, axis: usize },
    RowMix { x: Var, mix: Vec<f64>, rows_out: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Reshape(Var),
    BroadcastTo(Var),
    Attention { q: Var, k: Var, v: Var, scale: f64, probs: Vec<T> },
    AffineMix { a: Var, b: Var, alpha: f64 },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

#[derive(Clone, Debug)]
pub struct Graph<T = f64> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T> Default for Graph<T> {
    fn default() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new() }
    }
}

/// Strides for reading `shape` broadcast onto a larger shape.
fn broadcast_strides(shape: [usize; 3]) -> [usize; 3] {
    let s = [shape[1] * shape[2], shape[2], 1];
    [
        if shape[0] == 1 { 0 } else { s[0] },
        if shape[1] == 1 { 0 } else { s[1] },
        if shape[2] == 1 { 0 } else { s[2] },
    ]
}

/// Four interleaved partial sums so the loop pipelines.
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        s += x * y;
    }
    s
}

fn broadcastable(from: [usize; 3], to: [usize; 3]) -> bool {
    (0..3).all(|i| from[i] == to[i] || from[i] == 1)
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp_full()).recip_full()
    } else {
        let e = x.exp_full();
        e * (T::one() + e).recip_full()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }
}

impl<T: Real> Graph<T> {
    /// Empty graph in another scalar type.
    pub fn with_scalar() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 3] {
        self.nodes[v.0].value.shape
    }

    /// Gradient accumulated by the last backward pass, if the node was reached.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].as_ref().map(|g| Tensor { shape: self.shape(v), data: g.clone() })
    }

    /// Gradient, or zeros if the node was not reached.
    pub fn grad_or_zero(&self, v: Var) -> Tensor<T> {
        self.grad(v).unwrap_or_else(|| Tensor::splat(self.shape(v), T::zero()))
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf from f64 data.
    pub fn constant(&mut self, value: &Tensor) -> Var {
        self.push(Tensor::lift(value), Op::Leaf)
    }

    /// Mutable value of a leaf. Only meaningful before anything is built on it.
    pub(crate) fn leaf_mut(&mut self, v: Var) -> &mut Tensor<T> {
        assert!(matches!(self.nodes[v.0].op, Op::Leaf), "not a leaf");
        &mut self.nodes[v.0].value
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, ShapeError> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let (din, dout) = (ws[1], ws[2]);
        if ws[0] != 1 || xs[2] != din || b.is_some_and(|b| self.shape(b) != [1, 1, dout]) {
            let mut shapes = vec![xs, ws];
            shapes.extend(b.map(|b| self.shape(b)));
            return Err(ShapeError::new("dense", &shapes));
        }
        let rows = xs[0] * xs[1];
        let mut out = Tensor::splat([xs[0], xs[1], dout], T::zero());
        let (xv, wv) = (&self.value(x).data, &self.value(w).data);
        for r in 0..rows {
            let o = &mut out.data[r * dout..(r + 1) * dout];
            if let Some(b) = b {
                o.copy_from_slice(&self.nodes[b.0].value.data);
            }
            for i in 0..din {
                let xi = xv[r * din + i];
                if xi == T::zero() {
                    continue;
                }
                let wr = &wv[i * dout..(i + 1) * dout];
                for (oo, ww) in o.iter_mut().zip(wr) {
                    *oo += xi * *ww;
                }
            }
        }
        Ok(self.push(out, Op::Dense { x, w, b }))
    }

    /// Separate affine map per row: `w` is `(rows, din, dout)`, `b` is `(1, rows, dout)`.
    pub fn row_dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, ShapeError> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let (n, din, dout) = (ws[0], ws[1], ws[2]);
        if xs[1] != n || xs[2] != din || b.is_some_and(|b| self.shape(b) != [1, n, dout]) {
            return Err(ShapeError::new("row_dense", &[xs, ws]));
        }
        let mut out = Tensor::splat([xs[0], n, dout], T::zero());
        let (xv, wv) = (&self.value(x).data, &self.value(w).data);
        for bi in 0..xs[0] {
            for j in 0..n {
                let r = bi * n + j;
                let o = &mut out.data[r * dout..(r + 1) * dout];
                if let Some(b) = b {
                    o.copy_from_slice(&self.nodes[b.0].value.data[j * dout..(j + 1) * dout]);
                }
                for i in 0..din {
                    let xi = xv[r * din + i];
                    let wr = &wv[(j * din + i) * dout..(j * din + i + 1) * dout];
                    for (oo, ww) in o.iter_mut().zip(wr) {
                        *oo += xi * *ww;
                    }
                }
            }
        }
        Ok(self.push(out, Op::RowDense { x, w, b }))
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let v = self.value(x);
        let out = Tensor { shape: v.shape, data: v.data.iter().map(|&a| f(a)).collect() };
        self.push(out, op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |a| a.max(T::zero()), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let cc: T = lit(c);
        self.map(x, |a| a * cc, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let cc: T = lit(c);
        self.map(x, |a| a + cc, Op::AddScalar(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let d = v.shape[2];
        let mut out = v.clone();
        for row in out.data.chunks_mut(d) {
            let m = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for a in row.iter_mut() {
                *a = (*a - m).exp_full();
                s += *a;
            }
            let inv = s.recip_full();
            for a in row.iter_mut() {
                *a *= inv;
            }
        }
        self.push(out, Op::Softmax(x))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, ShapeError> {
        let shapes: Vec<[usize; 3]> = parts.iter().map(|&p| self.shape(p)).collect();
        if parts.is_empty() || axis > 2 {
            return Err(ShapeError::new("concat", &shapes));
        }
        let mut shape = shapes[0];
        shape[axis] = 0;
        for s in &shapes {
            for i in 0..3 {
                if i != axis && s[i] != shapes[0][i] {
                    return Err(ShapeError::new("concat", &shapes));
                }
            }
            shape[axis] += s[axis];
        }
        let mut out = Tensor::splat(shape, T::zero());
        // copy contiguous blocks: everything after `axis` is one block
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut offset = 0;
        for (p, s) in parts.iter().zip(&shapes) {
            let block = s[axis] * inner;
            let src = &self.nodes[p.0].value.data;
            for o in 0..outer {
                let dst = o * shape[axis] * inner + offset * inner;
                out.data[dst..dst + block].copy_from_slice(&src[o * block..(o + 1) * block]);
            }
            offset += s[axis];
        }
        Ok(self.push(out, Op::Concat { parts: parts.to_vec(), axis }))
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var, ShapeError> {
        let s = self.shape(x);
        if axis > 2 || s[axis] == 0 {
            return Err(ShapeError::new("mean", &[s]));
        }
        let mut shape = s;
        shape[axis] = 1;
        let mut out = Tensor::splat(shape, T::zero());
        let v = self.value(x);
        let inv: T = lit(1.0 / s[axis] as f64);
        for b in 0..s[0] {
            for i in 0..s[1] {
                for j in 0..s[2] {
                    let mut o = [b, i, j];
                    o[axis] = 0;
                    *out.at_mut(o[0], o[1], o[2]) += v.at(b, i, j) * inv;
                }
            }
        }
        Ok(self.push(out, Op::Mean { x, axis }))
    }

    /// Mixes rows with a constant `(rows_out, rows_in)` matrix, per batch.
    pub fn row_mix(&mut self, x: Var, mix: &[f64], rows_out: usize) -> Result<Var, ShapeError> {
        let s = self.shape(x);
        if mix.len() != rows_out * s[1] {
            return Err(ShapeError::new("row_mix", &[s, [1, rows_out, mix.len() / rows_out.max(1)]]));
        }
        let mut out = Tensor::splat([s[0], rows_out, s[2]], T::zero());
        let v = &self.value(x).data;
        let d = s[2];
        for b in 0..s[0] {
            for o in 0..rows_out {
                let dst = (b * rows_out + o) * d;
                for i in 0..s[1] {
                    let c = mix[o * s[1] + i];
                    if c == 0.0 {
                        continue;
                    }
                    let c: T = lit(c);
                    let src = (b * s[1] + i) * d;
                    for j in 0..d {
                        out.data[dst + j] += c * v[src + j];
                    }
                }
            }
        }
        Ok(self.push(out, Op::RowMix { x, mix: mix.to_vec(), rows_out }))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var, ShapeError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcastable(sb, sa) {
            return Err(ShapeError::new(name, &[sa, sb]));
        }
        let st = broadcast_strides(sb);
        let (va, vb) = (&self.value(a).data, &self.value(b).data);
        let mut out = Tensor::splat(sa, T::zero());
        let mut idx = 0;
        for i0 in 0..sa[0] {
            for i1 in 0..sa[1] {
                for i2 in 0..sa[2] {
                    out.data[idx] = f(va[idx], vb[i0 * st[0] + i1 * st[1] + i2 * st[2]]);
                    idx += 1;
                }
            }
        }
        Ok(self.push(out, op))
    }

    /// `a + b`, with `b` broadcast over its size-1 axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Sum of all elements, shape `(1,1,1)`.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().fold(T::zero(), |a, &b| a + b);
        self.push(Tensor { shape: [1, 1, 1], data: vec![s] }, Op::Sum(x))
    }

    pub fn reshape(&mut self, x: Var, shape: [usize; 3]) -> Result<Var, ShapeError> {
        let v = self.value(x);
        if shape.iter().product::<usize>() != v.len() {
            return Err(ShapeError::new("reshape", &[v.shape, shape]));
        }
        let out = Tensor { shape, data: v.data.clone() };
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn broadcast_to(&mut self, x: Var, shape: [usize; 3]) -> Result<Var, ShapeError> {
        let s = self.shape(x);
        if !broadcastable(s, shape) {
            return Err(ShapeError::new("broadcast_to", &[s, shape]));
        }
        let st = broadcast_strides(s);
        let v = &self.value(x).data;
        let mut out = Tensor::splat(shape, T::zero());
        let mut idx = 0;
        for i0 in 0..shape[0] {
            for i1 in 0..shape[1] {
                for i2 in 0..shape[2] {
                    out.data[idx] = v[i0 * st[0] + i1 * st[1] + i2 * st[2]];
                    idx += 1;
                }
            }
        }
        Ok(self.push(out, Op::BroadcastTo(x)))
    }

    /// `softmax(q kᵀ · scale) v` per batch.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, scale: f64) -> Result<Var, ShapeError> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq != sk || sv[0] != sq[0] || sv[1] != sq[1] {
            return Err(ShapeError::new("attention", &[sq, sk, sv]));
        }
        let (bsz, n, dk, dv) = (sq[0], sq[1], sq[2], sv[2]);
        let (qv, kv, vv) = (&self.value(q).data, &self.value(k).data, &self.value(v).data);
        let sc: T = lit(scale);
        let mut probs = vec![T::zero(); bsz * n * n];
        let mut out = Tensor::splat([bsz, n, dv], T::zero());
        for b in 0..bsz {
            for i in 0..n {
                let p = &mut probs[(b * n + i) * n..(b * n + i + 1) * n];
                let qi = &qv[(b * n + i) * dk..(b * n + i + 1) * dk];
                for (j, pj) in p.iter_mut().enumerate() {
                    let kj = &kv[(b * n + j) * dk..(b * n + j + 1) * dk];
                    *pj = dot(qi, kj) * sc;
                }
                let m = p.iter().cloned().fold(T::neg_infinity(), T::max);
                let mut s = T::zero();
                for pj in p.iter_mut() {
                    *pj = (*pj - m).exp_full();
                    s += *pj;
                }
                let inv = s.recip_full();
                for pj in p.iter_mut() {
                    *pj *= inv;
                }
                let o = &mut out.data[(b * n + i) * dv..(b * n + i + 1) * dv];
                for (j, &pj) in p.iter().enumerate() {
                    let vj = &vv[(b * n + j) * dv..(b * n + j + 1) * dv];
                    for (oo, vvv) in o.iter_mut().zip(vj) {
                        *oo += pj * *vvv;
                    }
                }
            }
        }
        Ok(self.push(out, Op::Attention { q, k, v, scale, probs }))
    }

    /// `alpha * a + (1 - alpha) * b`.
    pub fn affine_mix(&mut self, alpha: f64, a: Var, b: Var) -> Result<Var, ShapeError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(ShapeError::new("affine_mix", &[sa, sb]));
        }
        let (wa, wb): (T, T) = (lit(alpha), lit(1.0 - alpha));
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(&x, &y)| wa * x + wb * y).collect();
        Ok(self.push(Tensor { shape: sa, data }, Op::AffineMix { a, b, alpha }))
    }

    /// Clears accumulated gradients, keeping values.
    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        let n = self.nodes[v.0].value.len();
        let g = self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
        f(g);
    }

    /// Backpropagates from `out` with gradient `seed` (defaults to ones).
    pub fn backward(&mut self, out: Var, seed: Option<&Tensor<T>>) -> Result<(), ShapeError> {
        let shape = self.shape(out);
        let seed = match seed {
            Some(s) if s.shape != shape => return Err(ShapeError::new("backward", &[shape, s.shape])),
            Some(s) => s.data.clone(),
            None => vec![T::one(); shape.iter().product()],
        };
        self.acc(out, |g| g.iter_mut().zip(&seed).for_each(|(a, &b)| *a += b));
        for idx in (0..=out.0).rev() {
            let Some(gy) = self.grads[idx].take() else { continue };
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.backward_node(idx, &op, &gy);
            self.nodes[idx].op = op;
            self.grads[idx] = Some(gy);
        }
        Ok(())
    }

    fn backward_node(&mut self, idx: usize, op: &Op<T>, gy: &[T]) {
        let y_shape = self.nodes[idx].value.shape;
        match op {
            Op::Leaf => {}
            Op::Dense { x, w, b } => {
                let xs = self.shape(*x);
                let (din, dout) = (self.shape(*w)[1], self.shape(*w)[2]);
                let rows = xs[0] * xs[1];
                let xv = self.nodes[x.0].value.data.clone();
                let wv = self.nodes[w.0].value.data.clone();
                self.acc(*x, |gx| {
                    for r in 0..rows {
                        let gyr = &gy[r * dout..(r + 1) * dout];
                        for i in 0..din {
                            let wr = &wv[i * dout..(i + 1) * dout];
                            gx[r * din + i] += dot(gyr, wr);
                        }
                    }
                });
                self.acc(*w, |gw| {
                    for r in 0..rows {
                        let gyr = &gy[r * dout..(r + 1) * dout];
                        for i in 0..din {
                            let xi = xv[r * din + i];
                            if xi == T::zero() {
                                continue;
                            }
                            for (g, &a) in gw[i * dout..(i + 1) * dout].iter_mut().zip(gyr) {
                                *g += xi * a;
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    self.acc(*b, |gb| {
                        for r in 0..rows {
                            for (g, &a) in gb.iter_mut().zip(&gy[r * dout..(r + 1) * dout]) {
                                *g += a;
                            }
                        }
                    });
                }
            }
            Op::RowDense { x, w, b } => {
                let ws = self.shape(*w);
                let (n, din, dout) = (ws[0], ws[1], ws[2]);
                let bsz = self.shape(*x)[0];
                let xv = self.nodes[x.0].value.data.clone();
                let wv = self.nodes[w.0].value.data.clone();
                self.acc(*x, |gx| {
                    for bi in 0..bsz {
                        for j in 0..n {
                            let r = bi * n + j;
                            let gyr = &gy[r * dout..(r + 1) * dout];
                            for i in 0..din {
                                let wr = &wv[(j * din + i) * dout..(j * din + i + 1) * dout];
                                gx[r * din + i] += dot(gyr, wr);
                            }
                        }
                    }
                });
                self.acc(*w, |gw| {
                    for bi in 0..bsz {
                        for j in 0..n {
                            let r = bi * n + j;
                            let gyr = &gy[r * dout..(r + 1) * dout];
                            for i in 0..din {
                                let xi = xv[r * din + i];
                                for (g, &a) in gw[(j * din + i) * dout..(j * din + i + 1) * dout].iter_mut().zip(gyr) {
                                    *g += xi * a;
                                }
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    self.acc(*b, |gb| {
                        for bi in 0..bsz {
                            for (g, &a) in gb.iter_mut().zip(&gy[bi * n * dout..(bi + 1) * n * dout]) {
                                *g += a;
                            }
                        }
                    });
                }
            }
            Op::Relu(x) => {
                let xv = self.nodes[x.0].value.data.clone();
                self.acc(*x, |gx| {
                    for ((g, &a), &v) in gx.iter_mut().zip(gy).zip(&xv) {
                        if v > T::zero() {
                            *g += a;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yv = self.nodes[idx].value.data.clone();
                self.acc(*x, |gx| {
                    for ((g, &a), &y) in gx.iter_mut().zip(gy).zip(&yv) {
                        *g += a * y * (T::one() - y);
                    }
                });
            }
            Op::Softmax(x) => {
                let yv = self.nodes[idx].value.data.clone();
                let d = y_shape[2];
                self.acc(*x, |gx| {
                    for ((gr, ar), yr) in gx.chunks_mut(d).zip(gy.chunks(d)).zip(yv.chunks(d)) {
                        let dy = dot(ar, yr);
                        for ((g, &a), &y) in gr.iter_mut().zip(ar).zip(yr) {
                            *g += y * (a - dy);
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let outer: usize = y_shape[..*axis].iter().product();
                let inner: usize = y_shape[*axis + 1..].iter().product();
                let mut offset = 0;
                for p in parts {
                    let s = self.shape(*p);
                    let block = s[*axis] * inner;
                    self.acc(*p, |gp| {
                        for o in 0..outer {
                            let src = o * y_shape[*axis] * inner + offset * inner;
                            for (g, &a) in gp[o * block..(o + 1) * block].iter_mut().zip(&gy[src..src + block]) {
                                *g += a;
                            }
                        }
                    });
                    offset += s[*axis];
                }
            }
            Op::Mean { x, axis } => {
                let s = self.shape(*x);
                let inv: T = lit(1.0 / s[*axis] as f64);
                let ys = y_shape;
                self.acc(*x, |gx| {
                    let mut idx = 0;
                    for b in 0..s[0] {
                        for i in 0..s[1] {
                            for j in 0..s[2] {
                                let mut o = [b, i, j];
                                o[*axis] = 0;
                                gx[idx] += gy[(o[0] * ys[1] + o[1]) * ys[2] + o[2]] * inv;
                                idx += 1;
                            }
                        }
                    }
                });
            }
            Op::RowMix { x, mix, rows_out } => {
                let s = self.shape(*x);
                let d = s[2];
                self.acc(*x, |gx| {
                    for b in 0..s[0] {
                        for o in 0..*rows_out {
                            let src = (b * rows_out + o) * d;
                            for i in 0..s[1] {
                                let c = mix[o * s[1] + i];
                                if c == 0.0 {
                                    continue;
                                }
                                let c: T = lit(c);
                                let dst = (b * s[1] + i) * d;
                                for j in 0..d {
                                    gx[dst + j] += c * gy[src + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let sb = self.shape(*b);
                let st = broadcast_strides(sb);
                let sign = if matches!(op, Op::Sub(..)) { -T::one() } else { T::one() };
                let is_mul = matches!(op, Op::Mul(..));
                let av = self.nodes[a.0].value.data.clone();
                let bv = self.nodes[b.0].value.data.clone();
                let bidx = |flat: usize| {
                    let i2 = flat % y_shape[2];
                    let i1 = (flat / y_shape[2]) % y_shape[1];
                    let i0 = flat / (y_shape[1] * y_shape[2]);
                    i0 * st[0] + i1 * st[1] + i2 * st[2]
                };
                self.acc(*a, |ga| {
                    for (i, g) in ga.iter_mut().enumerate() {
                        *g += if is_mul { gy[i] * bv[bidx(i)] } else { gy[i] };
                    }
                });
                self.acc(*b, |gb| {
                    for i in 0..gy.len() {
                        gb[bidx(i)] += if is_mul { gy[i] * av[i] } else { sign * gy[i] };
                    }
                });
            }
            Op::Scale(x, c) => {
                let c: T = lit(*c);
                self.acc(*x, |gx| gx.iter_mut().zip(gy).for_each(|(g, &a)| *g += c * a))
            }
            Op::AddScalar(x) | Op::Reshape(x) => self.acc(*x, |gx| gx.iter_mut().zip(gy).for_each(|(g, &a)| *g += a)),
            Op::Sum(x) => {
                let g0 = gy[0];
                self.acc(*x, |gx| gx.iter_mut().for_each(|g| *g += g0));
            }
            Op::BroadcastTo(x) => {
                let st = broadcast_strides(self.shape(*x));
                self.acc(*x, |gx| {
                    let mut idx = 0;
                    for i0 in 0..y_shape[0] {
                        for i1 in 0..y_shape[1] {
                            for i2 in 0..y_shape[2] {
                                gx[i0 * st[0] + i1 * st[1] + i2 * st[2]] += gy[idx];
                                idx += 1;
                            }
                        }
                    }
                });
            }
            Op::Attention { q, k, v, scale, probs } => {
                let sq = self.shape(*q);
                let (bsz, n, dk, dv) = (sq[0], sq[1], sq[2], self.shape(*v)[2]);
                let qv = self.nodes[q.0].value.data.clone();
                let kv = self.nodes[k.0].value.data.clone();
                let vv = self.nodes[v.0].value.data.clone();
                let sc: T = lit(*scale);
                let mut gq = vec![T::zero(); qv.len()];
                let mut gk = vec![T::zero(); kv.len()];
                let mut gv = vec![T::zero(); vv.len()];
                let mut dp = vec![T::zero(); n];
                for b in 0..bsz {
                    for i in 0..n {
                        let p = &probs[(b * n + i) * n..(b * n + i + 1) * n];
                        let go = &gy[(b * n + i) * dv..(b * n + i + 1) * dv];
                        for j in 0..n {
                            let vj = (b * n + j) * dv;
                            dp[j] = dot(go, &vv[vj..vj + dv]);
                            for (g, &a) in gv[vj..vj + dv].iter_mut().zip(go) {
                                *g += p[j] * a;
                            }
                        }
                        let pd = dot(p, &dp);
                        let qi = (b * n + i) * dk;
                        for j in 0..n {
                            let ds = p[j] * (dp[j] - pd) * sc;
                            if ds == T::zero() {
                                continue;
                            }
                            let kj = (b * n + j) * dk;
                            for t in 0..dk {
                                gq[qi + t] += ds * kv[kj + t];
                                gk[kj + t] += ds * qv[qi + t];
                            }
                        }
                    }
                }
                self.acc(*q, |g| g.iter_mut().zip(&gq).for_each(|(a, &b)| *a += b));
                self.acc(*k, |g| g.iter_mut().zip(&gk).for_each(|(a, &b)| *a += b));
                self.acc(*v, |g| g.iter_mut().zip(&gv).for_each(|(a, &b)| *a += b));
            }
            Op::AffineMix { a, b, alpha } => {
                let (wa, wb): (T, T) = (lit(*alpha), lit(1.0 - *alpha));
                self.acc(*a, |g| g.iter_mut().zip(gy).for_each(|(x, &y)| *x += wa * y));
                self.acc(*b, |g| g.iter_mut().zip(gy).for_each(|(x, &y)| *x += wb * y));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 3], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    /// Central-difference gradient of `f(input)` summed with `seed`.
    fn numeric(f: &dyn Fn(&Tensor) -> f64, x: &Tensor) -> Vec<f64> {
        let eps = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.data[i] += eps;
                let mut m = x.clone();
                m.data[i] -= eps;
                (f(&p) - f(&m)) / (2.0 * eps)
            })
            .collect()
    }

    fn check_unary(build: fn(&mut Graph, Var) -> Var, x: Tensor) {
        let weights: Vec<f64> = (0..1000).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
        let f = |inp: &Tensor| {
            let mut g = Graph::new();
            let v = g.input(inp.clone());
            let y = build(&mut g, v);
            g.value(y).data.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut g = Graph::new();
        let v = g.input(x.clone());
        let y = build(&mut g, v);
        let seed = Tensor { shape: g.shape(y), data: weights[..g.value(y).len()].to_vec() };
        g.backward(y, Some(&seed)).unwrap();
        let analytic = g.grad(v).unwrap();
        for (a, n) in analytic.data.iter().zip(numeric(&f, &x)) {
            assert!((a - n).abs() < 1e-6, "{a} vs {n}");
        }
    }

    fn sample(shape: [usize; 3]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor { shape, data: (0..n).map(|i| ((i * 7919 % 23) as f64 - 11.0) / 9.0 + 0.013).collect() }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.input(sample([3, 4, 5]));
        let y = g.softmax(x);
        for row in g.value(y).data.chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_mix_alpha_one_is_identity() {
        let mut g = Graph::new();
        let a = g.input(sample([2, 3, 4]));
        let b = g.input(Tensor::filled([2, 3, 4], 9.0));
        let y = g.affine_mix(1.0, a, b).unwrap();
        assert_eq!(g.value(y), g.value(a));
    }

    #[test]
    fn single_row_attention_returns_value_row() {
        let mut g = Graph::new();
        let q = g.input(sample([2, 1, 3]));
        let k = g.input(Tensor::filled([2, 1, 3], 0.7));
        let v = g.input(t([2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.attention(q, k, v, 0.5).unwrap();
        assert_eq!(g.value(y).data, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros([1, 2, 3]));
        let w = g.input(Tensor::zeros([1, 4, 5]));
        let err = g.dense(x, w, None).unwrap_err();
        assert_eq!(err.op, "dense");
        assert!(err.to_string().starts_with("dense"));
        let y = g.input(Tensor::zeros([1, 3, 3]));
        assert_eq!(g.affine_mix(0.5, x, y).unwrap_err().op, "affine_mix");
    }

    #[test]
    fn unary_gradients() {
        check_unary(|g, v| g.relu(v), sample([2, 3, 4]));
        check_unary(|g, v| g.sigmoid(v), sample([2, 3, 4]));
        check_unary(|g, v| g.softmax(v), sample([2, 3, 4]));
        check_unary(|g, v| g.mean(v, 1).unwrap(), sample([2, 3, 4]));
        check_unary(|g, v| g.mean(v, 0).unwrap(), sample([2, 3, 4]));
        check_unary(|g, v| g.scale(v, -2.5), sample([2, 3, 4]));
        check_unary(|g, v| g.sum(v), sample([2, 3, 4]));
        check_unary(|g, v| g.broadcast_to(v, [2, 5, 4]).unwrap(), sample([2, 1, 4]));
        check_unary(|g, v| g.row_mix(v, &[0.5, 0.5, 0.0, 0.0, 0.0, 1.0], 2).unwrap(), sample([2, 3, 4]));
        check_unary(|g, v| g.reshape(v, [2, 12, 1]).unwrap(), sample([2, 3, 4]));
    }

    #[test]
    fn binary_and_structural_gradients() {
        check_unary(
            |g, v| {
                let c = g.input(sample([1, 3, 1]));
                let a = g.mul(v, c).unwrap();
                let b = g.sub(a, v).unwrap();
                let s = g.add(b, c).unwrap();
                g.mul(s, s).unwrap()
            },
            sample([2, 3, 4]),
        );
        check_unary(
            |g, v| {
                let w = g.input(sample([1, 4, 3]));
                let b = g.input(sample([1, 1, 3]));
                let d = g.dense(v, w, Some(b)).unwrap();
                let rw = g.input(sample([3, 3, 2]));
                g.row_dense(d, rw, None).unwrap()
            },
            sample([2, 3, 4]),
        );
        check_unary(
            |g, v| {
                let o = g.input(sample([2, 3, 2]));
                let c = g.concat(&[v, o, v], 2).unwrap();
                let c0 = g.concat(&[c, c], 0).unwrap();
                g.concat(&[c0, c0], 1).unwrap()
            },
            sample([2, 3, 4]),
        );
    }

    #[test]
    fn attention_gradient() {
        check_unary(
            |g, v| {
                let wq = g.input(sample([1, 4, 3]));
                let wk = g.input(Tensor { shape: [1, 4, 3], data: sample([1, 4, 3]).data.iter().rev().cloned().collect() });
                let q = g.dense(v, wq, None).unwrap();
                let k = g.dense(v, wk, None).unwrap();
                let a = g.attention(q, k, v, 0.6).unwrap();
                g.affine_mix(0.3, v, a).unwrap()
            },
            sample([2, 3, 4]),
        );
    }

    #[test]
    fn concat_backward_splits_exactly() {
        let mut g = Graph::new();
        let a = g.input(sample([2, 3, 2]));
        let b = g.input(sample([2, 3, 5]));
        let c = g.concat(&[a, b], 2).unwrap();
        let seed = sample([2, 3, 7]);
        g.backward(c, Some(&seed)).unwrap();
        let l1 = |t: &Tensor| t.data.iter().map(|v| v.abs()).sum::<f64>();
        let total = l1(&g.grad(a).unwrap()) + l1(&g.grad(b).unwrap());
        assert!((total - l1(&seed)).abs() < 1e-12);
    }
}
