//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Everything learned in this crate — the design encoder/decoder, the feature
//! predictor, the direct-regression baseline, and the downstream pixel
//! classifier — runs on this module. Tensors are row-major `Vec<f64>`; the
//! [`Graph`] records operations define-by-run style and replays them backward.

mod adam;
pub mod gradcheck;
mod graph;
mod layers;
mod losses;
mod params;

pub use adam::{adam_step, adam_step_decayed, AdamConfig};
pub use graph::{Gradients, Graph, Mode, NodeId};
pub use layers::{HiddenLayout, Mlp, OutputActivation};
pub use losses::kl_gaussian_closed_form;
pub use params::{ModelParameters, PARAM_FORMAT_VERSION};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch at {node}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        node: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("loss node must be scalar, got shape {0:?}")]
    LossNotScalar(Vec<usize>),
    #[error("batchnorm in train mode needs batch size >= 2 (variance undefined for 1)")]
    BatchnormBatchOne,
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("non-finite value produced by node {0}")]
    NonFiniteValue(String),
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error("invalid parameter file: {0}")]
    InvalidParameterFile(String),
}

/// Dense row-major tensor. Rank is 1 or 2 in practice: `[features]` for
/// vectors, `[batch, features]` for network activations.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} disagrees with data length {}",
            shape,
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        assert!(!rows.is_empty());
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols);
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar {:?}", self.shape);
        self.data[0]
    }

    /// Rows and columns of a rank-2 tensor; rank-1 is treated as one row.
    pub fn rows_cols(&self) -> (usize, usize) {
        match self.shape.len() {
            1 => (1, self.shape[0]),
            2 => (self.shape[0], self.shape[1]),
            _ => panic!("rows_cols on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, cols) = self.rows_cols();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }
}

/// C = A[m,k] · B[k,n], row-major, accumulating into a fresh buffer.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    // matrixmultiply handles blocking and SIMD; beta=0 overwrites c.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// C += A^T[k,m] · B[k,n] — the weight-gradient product, accumulated in place.
pub(crate) fn matmul_at_b_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C += A[m,k] · B^T[n,k] — the input-gradient product, accumulated in place.
pub(crate) fn matmul_a_bt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small_known() {
        // [1 2; 3 4] · [5 6; 7 8] = [19 22; 43 50]
        let c = matmul(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2);
        assert_eq!(c, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_transposed_variants_agree_with_naive() {
        let a = [1.0, -2.0, 0.5, 3.0, 4.0, -1.0]; // 3x2 (for A^T·B) or 2x3
        let b = [2.0, 1.0, 0.0, -1.0, 1.5, 2.5]; // 3x2 or 2x3
        // A^T B with A as 3x2 (k=3, m=2), B as 3x2 (n=2)
        let mut c = vec![0.0; 4];
        matmul_at_b_acc(&a, &b, 2, 3, 2, &mut c);
        let mut want = vec![0.0; 4];
        for i in 0..2 {
            for j in 0..2 {
                for p in 0..3 {
                    want[i * 2 + j] += a[p * 2 + i] * b[p * 2 + j];
                }
            }
        }
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
        // A B^T with A 2x3, B 2x3 -> 2x2
        let mut c2 = vec![0.0; 4];
        matmul_a_bt_acc(&a, &b, 2, 3, 2, &mut c2);
        let mut want2 = vec![0.0; 4];
        for i in 0..2 {
            for j in 0..2 {
                for p in 0..3 {
                    want2[i * 2 + j] += a[i * 3 + p] * b[j * 3 + p];
                }
            }
        }
        for (x, y) in c2.iter().zip(&want2) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn tensor_shape_checks() {
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]);
        assert_eq!(t.rows_cols(), (2, 3));
        assert_eq!(t.row(1), &[0.0, 0.0, 0.0]);
    }
}
