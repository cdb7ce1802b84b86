//! Dense row-major tensors and additive attention masks.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

/// A dense tensor: shape plus shared row-major data. Data is immutable once
/// built; cloning is cheap (the buffer is reference-counted).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::from_vec(shape, vec![0.0; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(vec![1], vec![value])
    }

    /// Normal(0, std) initialization.
    pub fn randn<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            // Box-Muller keeps us off rand_distr for one distribution.
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            data.push(z * std);
        }
        Self::from_vec(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    pub(crate) fn from_arc(shape: Vec<usize>, data: Arc<Vec<f64>>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    /// Copy-on-write mutable access (used by the optimizer between steps).
    pub fn make_mut(&mut self) -> &mut [f64] {
        Arc::<Vec<f64>>::make_mut(&mut self.data)
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Additive attention mask: `0.0` leaves a score untouched, `-inf` hides the
/// key from the query. Finite non-zero biases are also honored.
#[derive(Debug, Clone, PartialEq)]
pub struct AdditiveMask {
    pub rows: usize,
    pub cols: usize,
    data: Vec<f64>,
}

impl AdditiveMask {
    /// All-visible mask.
    pub fn visible(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_visibility<F: FnMut(usize, usize) -> bool>(
        rows: usize,
        cols: usize,
        mut vis: F,
    ) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(if vis(r, c) { 0.0 } else { f64::NEG_INFINITY });
            }
        }
        Self { rows, cols, data }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    pub fn is_visible(&self, row: usize, col: usize) -> bool {
        self.get(row, col) != f64::NEG_INFINITY
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }
}
