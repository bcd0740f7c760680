use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;

use super::Scalar;
use crate::error::{RainError, Result};

/// Named learnable tensors plus a save counter.
///
/// Vectors are stored as `1 × n` rows so every tensor is two-dimensional.
/// Tensors are shared copy-on-write, so binding them onto a tape is free.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<F = f32> {
    tensors: BTreeMap<String, Arc<Array2<F>>>,
    pub version: u64,
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        ParamSet {
            tensors: BTreeMap::new(),
            version: 0,
        }
    }
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<F>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(RainError::Contract(format!("duplicate parameter {name:?}")));
        }
        self.tensors.insert(name, Arc::new(value));
        Ok(())
    }

    /// Fan-in scaled uniform weights `U(-1/√fan_in, 1/√fan_in)`.
    pub fn insert_uniform(&mut self, name: &str, rows: usize, cols: usize, rng: &mut impl Rng) -> Result<()> {
        let bound = 1.0 / (rows.max(1) as f64).sqrt();
        let w = Array2::from_shape_fn((rows, cols), |_| F::of(rng.gen_range(-bound..bound)));
        self.insert(name, w)
    }

    pub fn insert_constant(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> Result<()> {
        self.insert(name, Array2::from_elem((rows, cols), F::of(value)))
    }

    pub fn get(&self, name: &str) -> Option<&Array2<F>> {
        self.tensors.get(name).map(|t| &**t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<F>> {
        self.tensors.get_mut(name).map(Arc::make_mut)
    }

    pub fn expect(&self, name: &str) -> &Array2<F> {
        self.get(name)
            .unwrap_or_else(|| panic!("parameter {name:?} not present"))
    }

    /// Shared handle to a tensor, without copying it.
    pub fn shared(&self, name: &str) -> Option<Arc<Array2<F>>> {
        self.tensors.get(name).cloned()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<F>)> {
        self.tensors.iter().map(|(k, v)| (k, &**v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<F>)> {
        self.tensors.iter_mut().map(|(k, v)| (k, Arc::make_mut(v)))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Copies every tensor whose name starts with `prefix` into `self`.
    pub fn extend_from(&mut self, other: &ParamSet<F>, prefix: &str) -> Result<()> {
        for (k, v) in other.tensors.iter().filter(|(k, _)| k.starts_with(prefix)) {
            if self.tensors.contains_key(k) {
                return Err(RainError::Contract(format!("duplicate parameter {k:?}")));
            }
            self.tensors.insert(k.clone(), v.clone());
        }
        Ok(())
    }

    /// Subset of tensors whose names start with `prefix`.
    pub fn filtered(&self, prefix: &str) -> ParamSet<F> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
            version: self.version,
        }
    }

    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Arc::new(v.mapv(|x| G::of(x.as_f64())))))
                .collect(),
            version: self.version,
        }
    }

    /// Same tensors with every entry set to zero.
    pub fn zeros_like(&self) -> ParamSet<F> {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Arc::new(Array2::zeros(v.raw_dim()))))
                .collect(),
            version: self.version,
        }
    }

    /// Order-independent 64-bit digest of names, shapes and bit patterns.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for (k, v) in &self.tensors {
            feed(k.as_bytes());
            for d in v.shape() {
                feed(&(*d as u64).to_le_bytes());
            }
            for x in v.iter() {
                feed(&x.as_f64().to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Gradients keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Gradients<F = f32> {
    pub(crate) grads: BTreeMap<String, Array2<F>>,
}

impl<F> Default for Gradients<F> {
    fn default() -> Self {
        Gradients { grads: BTreeMap::new() }
    }
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, name: &str) -> Option<&Array2<F>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<F>)> {
        self.grads.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<F>)> {
        self.grads.iter_mut()
    }

    pub fn accumulate(&mut self, name: &str, g: &Array2<F>) {
        match self.grads.get_mut(name) {
            Some(acc) => *acc += g,
            None => {
                self.grads.insert(name.to_string(), g.as_standard_layout().into_owned());
            }
        }
    }

    /// Adds all of `other` into `self`.
    pub fn merge(&mut self, other: &Gradients<F>) {
        for (k, g) in &other.grads {
            self.accumulate(k, g);
        }
    }

    pub fn scale(&mut self, s: f64) {
        let s = F::of(s);
        for g in self.grads.values_mut() {
            g.mapv_inplace(|x| x * s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|g| g.iter())
            .map(|x| x.as_f64() * x.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(|g| g.iter().all(|x| x.is_finite()))
    }
}
