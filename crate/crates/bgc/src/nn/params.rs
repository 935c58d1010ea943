//! Named parameter storage shared by the networks.
//!
//! Parameters live in flat per-network stores. Tape leaves refer to them by
//! `(store id, index)`, which keeps gradients from different networks apart
//! when several stores participate in one backward pass.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Stable reference to one parameter tensor.
#[derive(Debug, Copy, Clone, PartialEq, Eq, Hash)]
pub struct ParamRef {
    pub store: u32,
    pub index: u32,
}

/// A named collection of f64 matrices. Vectors are stored as 1 x n rows.
#[derive(Debug, Clone)]
pub struct ParamStore {
    store_id: u32,
    names: Vec<String>,
    values: Vec<Array2<f64>>,
}

impl ParamStore {
    pub fn new(store_id: u32) -> Self {
        ParamStore {
            store_id,
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn store_id(&self) -> u32 {
        self.store_id
    }

    pub fn add(&mut self, name: &str, value: Array2<f64>) -> ParamRef {
        let index = self.values.len() as u32;
        self.names.push(name.to_string());
        self.values.push(value);
        ParamRef {
            store: self.store_id,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, p: ParamRef) -> &Array2<f64> {
        debug_assert_eq!(p.store, self.store_id, "param ref from another store");
        &self.values[p.index as usize]
    }

    pub fn get_mut(&mut self, p: ParamRef) -> &mut Array2<f64> {
        debug_assert_eq!(p.store, self.store_id);
        &mut self.values[p.index as usize]
    }

    pub fn value_at(&self, index: usize) -> &Array2<f64> {
        &self.values[index]
    }

    pub fn value_at_mut(&mut self, index: usize) -> &mut Array2<f64> {
        &mut self.values[index]
    }

    pub fn name_at(&self, index: usize) -> &str {
        &self.names[index]
    }

    /// Copy all values from another store with identical layout.
    pub fn copy_from(&mut self, other: &ParamStore) {
        assert_eq!(self.values.len(), other.values.len(), "store layout mismatch");
        for (dst, src) in self.values.iter_mut().zip(other.values.iter()) {
            dst.assign(src);
        }
    }

    pub fn total_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// All parameters are finite.
    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Glorot-uniform initialization.
pub fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-limit..limit))
}

/// Zero-initialized matrix (used for biases).
pub fn zeros(rows: usize, cols: usize) -> Array2<f64> {
    Array2::zeros((rows, cols))
}
