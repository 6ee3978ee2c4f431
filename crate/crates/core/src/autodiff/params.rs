//! Named parameter tensors and their binary serialization.

use std::collections::HashMap;
use std::ops::Index;

use rand::Rng;
use thiserror::Error;

use super::graph::{Graph, Var};
use super::tensor::{Real, ShapeError, Tensor};

const MAGIC: &[u8; 4] = b"PHPS";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a parameter file (bad magic)")]
    BadMagic,
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("truncated parameter file")]
    Truncated,
    #[error("invalid utf-8 in name table")]
    Utf8,
    #[error("duplicate parameter name {0}")]
    Duplicate(String),
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    /// Adds a tensor initialised uniformly in `±1/sqrt(fan_in)`.
    pub fn add_uniform(&mut self, name: &str, shape: [usize; 3], fan_in: usize, rng: &mut impl Rng) -> usize {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, Tensor { shape, data })
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> usize {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// All values flattened in order.
    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Adds every tensor as a leaf of `g`.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>) -> Bound {
        Bound { vars: self.tensors.iter().map(|t| g.constant(t)).collect() }
    }

    /// `self ← tau·online + (1 − tau)·self`.
    pub fn soft_update(&mut self, online: &ParamSet, tau: f64) -> Result<(), ShapeError> {
        if self.len() != online.len() {
            return Err(ShapeError::new("soft_update", &[]));
        }
        for (t, o) in self.tensors.iter_mut().zip(&online.tensors) {
            if t.shape != o.shape {
                return Err(ShapeError::new("soft_update", &[t.shape, o.shape]));
            }
            for (a, b) in t.data.iter_mut().zip(&o.data) {
                *a = tau * b + (1.0 - tau) * *a;
            }
        }
        Ok(())
    }

    pub fn with_prefix(&self, prefix: &str) -> ParamSet {
        let mut out = ParamSet::new();
        for (n, t) in self.iter() {
            out.add(&format!("{prefix}{n}"), t.clone());
        }
        out
    }

    /// Entries whose name starts with `prefix`, prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet {
        let mut out = ParamSet::new();
        for (n, t) in self.iter() {
            if let Some(rest) = n.strip_prefix(prefix) {
                out.add(rest, t.clone());
            }
        }
        out
    }

    pub fn extend(&mut self, other: &ParamSet) {
        for (n, t) in other.iter() {
            self.add(n, t.clone());
        }
    }

    /// Copies values from `other`, which must have identical names and shapes.
    pub fn assign(&mut self, other: &ParamSet) -> Result<(), ShapeError> {
        if self.names != other.names {
            return Err(ShapeError::new("assign", &[]));
        }
        for (t, o) in self.tensors.iter_mut().zip(&other.tensors) {
            if t.shape != o.shape {
                return Err(ShapeError::new("assign", &[t.shape, o.shape]));
            }
            t.data.copy_from_slice(&o.data);
        }
        Ok(())
    }

    /// Magic, version, metadata string, name table, then little-endian f64 blobs.
    pub fn to_bytes(&self, meta: &str) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.num_scalars() * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for (n, t) in self.iter() {
            out.extend_from_slice(&(n.len() as u32).to_le_bytes());
            out.extend_from_slice(n.as_bytes());
            for d in t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(String, ParamSet), FormatError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(FormatError::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(FormatError::Version(version));
        }
        let meta_len = r.u32()? as usize;
        let meta = String::from_utf8(r.take(meta_len)?.to_vec()).map_err(|_| FormatError::Utf8)?;
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| FormatError::Utf8)?;
            let shape = [r.u64()? as usize, r.u64()? as usize, r.u64()? as usize];
            table.push((name, shape));
        }
        let mut set = ParamSet::new();
        for (name, shape) in table {
            if set.position(&name).is_some() {
                return Err(FormatError::Duplicate(name));
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or(FormatError::Truncated)?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            set.add(&name, Tensor { shape, data });
        }
        Ok((meta, set))
    }

    pub fn save(&self, path: &std::path::Path, meta: &str) -> Result<(), FormatError> {
        std::fs::write(path, self.to_bytes(meta))?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<(String, ParamSet), FormatError> {
        ParamSet::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FormatError> {
        let end = self.pos.checked_add(n).ok_or(FormatError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(FormatError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Graph leaves for a [`ParamSet`], in parameter order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Index<usize> for Bound {
    type Output = Var;
    fn index(&self, i: usize) -> &Var {
        &self.vars[i]
    }
}

impl Bound {
    /// Gradients of every parameter after a backward pass (zeros if unreached).
    pub fn grads(&self, g: &Graph) -> Vec<Tensor> {
        self.vars.iter().map(|&v| g.grad_or_zero(v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_set(seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        p.add_uniform("a.w", [1, 4, 3], 4, &mut rng);
        p.add_uniform("a.b", [1, 1, 3], 4, &mut rng);
        p.add_uniform("head", [2, 3, 1], 3, &mut rng);
        p
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let p = sample_set(7);
        assert_eq!(p, sample_set(7));
        assert_ne!(p, sample_set(8));
        assert!(p.get(0).data.iter().all(|v| v.abs() <= 0.5));
        assert_eq!(p.num_scalars(), 12 + 3 + 6);
    }

    #[test]
    fn bytes_round_trip() {
        let p = sample_set(1);
        let bytes = p.to_bytes("{\"k\":1}");
        let (meta, q) = ParamSet::from_bytes(&bytes).unwrap();
        assert_eq!(meta, "{\"k\":1}");
        assert_eq!(p, q);
        assert!(matches!(ParamSet::from_bytes(&bytes[..bytes.len() - 3]), Err(FormatError::Truncated)));
        assert!(matches!(ParamSet::from_bytes(b"XXXX"), Err(FormatError::BadMagic)));
    }

    #[test]
    fn soft_update_limits() {
        let online = sample_set(1);
        let mut t = sample_set(2);
        let orig = t.clone();
        t.soft_update(&online, 0.0).unwrap();
        assert_eq!(t, orig);
        t.soft_update(&online, 1.0).unwrap();
        assert_eq!(t.flat(), online.flat());
    }

    #[test]
    fn soft_update_composes() {
        let tau = 0.3;
        let online = sample_set(1);
        let orig = sample_set(2);
        let mut t = orig.clone();
        t.soft_update(&online, tau).unwrap();
        t.soft_update(&online, tau).unwrap();
        let blend = 1.0 - (1.0 - tau) * (1.0 - tau);
        for ((a, o), b) in t.flat().iter().zip(orig.flat()).zip(online.flat()) {
            assert!((a - (blend * b + (1.0 - blend) * o)).abs() < 1e-14);
        }
    }

    #[test]
    fn soft_update_rejects_mismatch() {
        let mut a = sample_set(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = ParamSet::new();
        b.add_uniform("x", [1, 1, 1], 1, &mut rng);
        assert!(a.soft_update(&b, 0.5).is_err());
    }

    #[test]
    fn prefix_helpers() {
        let p = sample_set(3);
        let mut bundle = p.with_prefix("actor/");
        bundle.extend(&sample_set(4).with_prefix("critic/"));
        assert_eq!(bundle.strip_prefix("actor/"), p);
        assert_eq!(bundle.strip_prefix("critic/"), sample_set(4));
    }
}
