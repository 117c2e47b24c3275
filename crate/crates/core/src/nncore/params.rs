//! Named parameter tensors and the binary checkpoint container.
//!
//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   "PKCKPT\0\0"
//! version    u32       1
//! count      u32       number of records
//! record*    name_len u32, name (UTF-8), trainable u8 (0/1),
//!            ndim u32, dims u64 x ndim, values f64 x prod(dims)
//! ```
//!
//! Records are written in name order. Values round-trip exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use super::graph::{Gradients, Matrix};
use super::NnError;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PKCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Matrix,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix, trainable: bool) {
        self.params.insert(name.into(), Param { value, trainable });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.params.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar values.
    pub fn size(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Sets the trainable flag of every parameter whose name starts with
    /// `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    /// Copies in every parameter of `other` whose name starts with `prefix`,
    /// keeping this set's trainable flags. Shapes must match.
    pub fn load_prefix(&mut self, other: &ParamSet, prefix: &str) -> Result<usize, NnError> {
        let mut loaded = 0;
        for (name, p) in other.iter().filter(|(n, _)| n.starts_with(prefix)) {
            let dst = self
                .params
                .get_mut(name)
                .ok_or_else(|| NnError::MissingParam(name.to_string()))?;
            if dst.value.dim() != p.value.dim() {
                return Err(NnError::Shape(format!(
                    "{name}: {:?} vs {:?}",
                    dst.value.dim(),
                    p.value.dim()
                )));
            }
            dst.value.assign(&p.value);
            loaded += 1;
        }
        Ok(loaded)
    }

    /// Subset of parameters whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamSet {
        ParamSet {
            params: self
                .params
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .map(|(n, p)| (n.clone(), p.clone()))
                .collect(),
        }
    }

    /// Uniform Glorot initialization for a `rows x cols` weight.
    pub fn init_glorot(&mut self, name: &str, rows: usize, cols: usize, rng: &mut impl Rng) {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        self.init_uniform(name, rows, cols, bound, rng);
    }

    pub fn init_uniform(&mut self, name: &str, rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) {
        let value = Matrix::from_shape_fn((rows, cols), |_| rng.random_range(-bound..=bound));
        self.insert(name, value, true);
    }

    pub fn init_normal(&mut self, name: &str, rows: usize, cols: usize, std: f64, rng: &mut impl Rng) {
        let normal = rand_distr::Normal::new(0.0, std).expect("positive std");
        let value = Matrix::from_shape_fn((rows, cols), |_| rng.sample(normal));
        self.insert(name, value, true);
    }

    pub fn init_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Matrix::zeros((rows, cols)), true);
    }

    pub fn init_ones(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Matrix::ones((rows, cols)), true);
    }

    /// Checks that every gradient matches a parameter of the same shape.
    pub fn check_gradients(&self, grads: &Gradients) -> Result<(), NnError> {
        for (name, g) in &grads.map {
            let p = self
                .params
                .get(name)
                .ok_or_else(|| NnError::MissingParam(name.clone()))?;
            if p.value.dim() != g.dim() {
                return Err(NnError::Shape(format!(
                    "gradient for {name}: {:?} vs {:?}",
                    g.dim(),
                    p.value.dim()
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.size() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, p) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(p.trainable as u8);
            out.extend_from_slice(&2u32.to_le_bytes());
            let (r, c) = p.value.dim();
            out.extend_from_slice(&(r as u64).to_le_bytes());
            out.extend_from_slice(&(c as u64).to_le_bytes());
            for v in p.value.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(NnError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!(
                "version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let count = r.u32()?;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| NnError::Checkpoint("name is not UTF-8".into()))?;
            let trainable = match r.take(1)?[0] {
                0 => false,
                1 => true,
                b => return Err(NnError::Checkpoint(format!("{name}: trainable flag {b}"))),
            };
            let ndim = r.u32()? as usize;
            let dims: Vec<usize> = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_, _>>()?;
            let (rows, cols) = match dims.as_slice() {
                [n] => (1, *n),
                [r, c] => (*r, *c),
                _ => return Err(NnError::Checkpoint(format!("{name}: {ndim} dimensions"))),
            };
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| NnError::Checkpoint(format!("{name}: shape overflow")))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| NnError::Checkpoint("size overflow".into()))?)?;
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let value = Matrix::from_shape_vec((rows, cols), values).expect("length checked");
            if set.contains(&name) {
                return Err(NnError::Checkpoint(format!("duplicate record {name}")));
            }
            set.insert(name, value, trainable);
        }
        if r.pos != bytes.len() {
            return Err(NnError::Checkpoint("trailing bytes".into()));
        }
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NnError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| NnError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NnError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| NnError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| NnError::Checkpoint("truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn checkpoint_round_trip(
            values in prop::collection::vec(prop::num::f64::ANY, 1..40),
            cols in 1usize..5,
            trainable: bool,
        ) {
            let rows = values.len() / cols;
            prop_assume!(rows > 0);
            let m = Matrix::from_shape_vec((rows, cols), values[..rows * cols].to_vec()).unwrap();
            let mut ps = ParamSet::new();
            ps.insert("layer.weight", m.clone(), trainable);
            ps.insert("b", Matrix::zeros((1, 3)), !trainable);
            let back = ParamSet::from_bytes(&ps.to_bytes()).unwrap();
            let got = &back.get("layer.weight").unwrap().value;
            // bit-level equality, NaN payloads included
            prop_assert!(got.iter().zip(m.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert_eq!(back.get("layer.weight").unwrap().trainable, trainable);
            prop_assert_eq!(back.len(), 2);
        }
    }

    #[test]
    fn rejects_corrupt_checkpoints() {
        let mut ps = ParamSet::new();
        ps.insert("w", Matrix::ones((2, 2)), true);
        let bytes = ps.to_bytes();
        assert!(matches!(ParamSet::from_bytes(&bytes[..bytes.len() - 3]), Err(NnError::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[8] = 7;
        assert!(matches!(ParamSet::from_bytes(&bad), Err(NnError::Checkpoint(_))));
        assert!(matches!(ParamSet::from_bytes(b"nope"), Err(NnError::Checkpoint(_))));
    }

    #[test]
    fn prefix_helpers() {
        let mut ps = ParamSet::new();
        ps.insert("encoder.a", Matrix::ones((1, 2)), true);
        ps.insert("decoder.b", Matrix::ones((1, 2)), true);
        ps.set_trainable_prefix("encoder.", false);
        assert!(!ps.get("encoder.a").unwrap().trainable);
        assert!(ps.get("decoder.b").unwrap().trainable);

        let mut other = ParamSet::new();
        other.insert("encoder.a", Matrix::from_elem((1, 2), 5.0), true);
        assert_eq!(ps.load_prefix(&other, "encoder.").unwrap(), 1);
        assert_eq!(ps.get("encoder.a").unwrap().value[[0, 1]], 5.0);
        assert!(!ps.get("encoder.a").unwrap().trainable);
        assert_eq!(ps.subset("decoder.").len(), 1);
    }
}
