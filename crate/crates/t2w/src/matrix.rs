//! Row-major dense `f64` matrices.
//!
//! Every weight, feature and activation in this crate is a [`DenseMatrix`].
//! The type is deliberately small: shape-checked construction, a handful of
//! arithmetic helpers for code paths that do not need gradients, and nothing
//! else. Differentiable computation lives in [`crate::graph`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatrixError {
    #[error("value buffer has {got} entries, shape {rows}x{cols} needs {need}")]
    BadLength { rows: usize, cols: usize, got: usize, need: usize },
    #[error("non-finite entry at ({row},{col})")]
    NonFinite { row: usize, col: usize },
    #[error("shape mismatch: {left} vs {right} in {op}")]
    ShapeMismatch { op: &'static str, left: String, right: String },
}

/// Row-major matrix of 64-bit floats. Immutable in spirit: operations return
/// new matrices; in-place mutation is reserved for construction and optimizer
/// internals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DenseMatrix {
    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, MatrixError> {
        if values.len() != rows * cols {
            return Err(MatrixError::BadLength { rows, cols, got: values.len(), need: rows * cols });
        }
        if let Some(idx) = values.iter().position(|v| !v.is_finite()) {
            return Err(MatrixError::NonFinite { row: idx / cols.max(1), col: idx % cols.max(1) });
        }
        Ok(Self { rows, cols, values })
    }

    /// Construction without the finiteness scan, for hot paths that already
    /// guarantee finite inputs. Length is still checked.
    pub fn from_vec_unchecked(rows: usize, cols: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), rows * cols, "value buffer length mismatch");
        Self { rows, cols, values }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, values: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn row_vector(values: Vec<f64>) -> Self {
        let cols = values.len();
        Self { rows: 1, cols, values }
    }

    pub fn column_vector(values: Vec<f64>) -> Self {
        let rows = values.len();
        Self { rows, cols: 1, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.values[row * self.cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.cols..(row + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `self @ other`, plain triple loop in i-k-j order so the inner loop runs
    /// over contiguous rows of both operands.
    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix, MatrixError> {
        if self.cols != other.rows {
            return Err(MatrixError::ShapeMismatch {
                op: "matmul",
                left: format!("{}x{}", self.rows, self.cols),
                right: format!("{}x{}", other.rows, other.cols),
            });
        }
        let mut out = vec![0.0; self.rows * other.cols];
        let n = other.cols;
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out[i * n..(i + 1) * n];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.values[k * n..(k + 1) * n];
                for j in 0..n {
                    out_row[j] += a * b_row[j];
                }
            }
        }
        Ok(DenseMatrix { rows: self.rows, cols: other.cols, values: out })
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = vec![0.0; self.values.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j * self.rows + i] = self.values[i * self.cols + j];
            }
        }
        DenseMatrix { rows: self.cols, cols: self.rows, values: out }
    }

    pub fn add(&self, other: &DenseMatrix) -> Result<DenseMatrix, MatrixError> {
        if self.shape() != other.shape() {
            return Err(MatrixError::ShapeMismatch {
                op: "add",
                left: format!("{}x{}", self.rows, self.cols),
                right: format!("{}x{}", other.rows, other.cols),
            });
        }
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + b).collect();
        Ok(DenseMatrix { rows: self.rows, cols: self.cols, values })
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<DenseMatrix, MatrixError> {
        if self.shape() != other.shape() {
            return Err(MatrixError::ShapeMismatch {
                op: "sub",
                left: format!("{}x{}", self.rows, self.cols),
                right: format!("{}x{}", other.rows, other.cols),
            });
        }
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect();
        Ok(DenseMatrix { rows: self.rows, cols: self.cols, values })
    }

    pub fn scale(&self, factor: f64) -> DenseMatrix {
        let values = self.values.iter().map(|v| v * factor).collect();
        DenseMatrix { rows: self.rows, cols: self.cols, values }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// L2 norm of a slice.
pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// In-place L2 normalization. Returns the original norm; an input with norm
/// below `1e-12` is left untouched and reported via `None`.
pub fn normalize_in_place(v: &mut [f64]) -> Option<f64> {
    let n = l2_norm(v);
    if n < 1e-12 {
        return None;
    }
    for x in v.iter_mut() {
        *x /= n;
    }
    Some(n)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
