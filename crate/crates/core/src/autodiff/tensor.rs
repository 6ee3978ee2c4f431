use std::fmt;

use num_traits::{Float, NumAssign};
use thiserror::Error;
use twofloat::TwoFloat;

/// Scalar type a graph can run in. f64 everywhere except the numeric side
/// of gradient checks, which uses double-double arithmetic.
pub trait Real: Float + NumAssign + fmt::Debug + Default + 'static {
    /// Exponential accurate to the working precision of the type.
    fn exp_full(self) -> Self {
        self.exp()
    }

    /// Reciprocal accurate to the working precision of the type.
    fn recip_full(self) -> Self {
        self.recip()
    }
}

impl Real for f64 {}

impl Real for TwoFloat {
    fn exp_full(self) -> Self {
        dd_exp(self)
    }

    fn recip_full(self) -> Self {
        dd_recip(self)
    }
}

/// Two Newton steps from the f64 reciprocal. The library division loses
/// the low word when the divisor's high part is not exactly invertible.
fn dd_recip(b: TwoFloat) -> TwoFloat {
    let y0 = b.hi().recip();
    if !y0.is_finite() || y0 == 0.0 {
        return TwoFloat::from(y0);
    }
    let y = y0 + (1.0 - b * y0) * y0;
    y + y * (1.0 - b * y)
}

/// The library exp of `TwoFloat` is good to about 1e-22, well short of
/// double-double. Reduce by ln 2 and by 2^10, sum the series for expm1,
/// then undo the 2^10 with `e ← e(e + 2)` which keeps the small part exact.
fn dd_exp(x: TwoFloat) -> TwoFloat {
    let hi = x.hi();
    if !hi.is_finite() || hi.abs() > 700.0 {
        return x.exp();
    }
    let k = (hi / std::f64::consts::LN_2).round();
    let r = (x - twofloat::consts::LN_2 * k) / 1024.0;
    let mut term = r;
    let mut e = r;
    for n in 2..=12 {
        term = term * r / n as f64;
        e += term;
    }
    for _ in 0..10 {
        e = e * (e + 2.0);
    }
    (e + 1.0) * 2f64.powi(k as i32)
}

#[inline]
pub(crate) fn lit<T: Real>(x: f64) -> T {
    T::from(x).expect("f64 converts to every Real")
}

/// Dense row-major `(batch, rows, cols)` array.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f64> {
    pub shape: [usize; 3],
    pub data: Vec<T>,
}

#[derive(Clone, Debug, PartialEq, Error)]
#[error("{op}: incompatible shapes {shapes:?}")]
pub struct ShapeError {
    pub op: &'static str,
    pub shapes: Vec<[usize; 3]>,
}

impl ShapeError {
    pub fn new(op: &'static str, shapes: &[[usize; 3]]) -> Self {
        ShapeError { op, shapes: shapes.to_vec() }
    }
}

impl Tensor {
    pub fn zeros(shape: [usize; 3]) -> Self {
        Tensor { shape, data: vec![0.0; shape.iter().product()] }
    }

    pub fn filled(shape: [usize; 3], value: f64) -> Self {
        Tensor { shape, data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: [1, 1, 1], data: vec![v] }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

impl<T: Real> Tensor<T> {
    pub fn splat(shape: [usize; 3], value: T) -> Self {
        Tensor { shape, data: vec![value; shape.iter().product()] }
    }

    pub fn from_vec(shape: [usize; 3], data: Vec<T>) -> Result<Self, ShapeError> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(ShapeError::new("from_vec", &[shape]));
        }
        Ok(Tensor { shape, data })
    }

    /// Elementwise conversion from f64.
    pub fn lift(t: &Tensor) -> Self {
        Tensor { shape: t.shape, data: t.data.iter().map(|&v| lit(v)).collect() }
    }

    /// Elementwise conversion to f64.
    pub fn lower(&self) -> Tensor {
        Tensor { shape: self.shape, data: self.data.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect() }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, b: usize, i: usize, j: usize) -> T {
        self.data[(b * self.shape[1] + i) * self.shape[2] + j]
    }

    #[inline]
    pub fn at_mut(&mut self, b: usize, i: usize, j: usize) -> &mut T {
        let idx = (b * self.shape[1] + i) * self.shape[2] + j;
        &mut self.data[idx]
    }

    /// Row `i` of batch `b`.
    pub fn row(&self, b: usize, i: usize) -> &[T] {
        let start = (b * self.shape[1] + i) * self.shape[2];
        &self.data[start..start + self.shape[2]]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}
