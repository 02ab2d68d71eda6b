//! Dense double-precision matrices with the handful of operations the rest
//! of the crate composes its forward and backward passes from.
//!
//! There is no broadcasting and no N-dimensional tensor type: a [`Mat`] is a
//! row-major 2-D array, vectors are plain `&[f64]` slices, and every module
//! that needs gradients writes its backward pass by hand against these
//! primitives. [`gradcheck`] provides the finite-difference oracle that keeps
//! those hand-written backwards honest.

mod diff;
mod gradcheck;
mod vecops;

pub use diff::{
    DiffOp, HadamardOp, KronStack2Op, LayerNormOp, LogSoftmaxOp, MatMulOp, ReluOp, SigmoidOp,
    SoftmaxRowOp,
};
pub use gradcheck::{finite_diff_check, finite_diff_check_with, EntryFailure, GradCheckReport};
pub use vecops::{
    kron_stack2, kron_stack2_backward, layer_norm, layer_norm_backward, log_softmax,
    log_softmax_backward, relu, relu_backward, sigmoid, sigmoid_backward, softmax_masked,
    softmax_masked_backward, softmax_row, DEFAULT_LN_EPS,
};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Dense 2-D array of `f64` in row-major order.
///
/// Serializes as `{"rows": r, "cols": c, "data": [..]}`, the layout the
/// weights file uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dim {
                op: "Mat::from_vec",
                detail: format!(
                    "data length {} does not match {}x{} (expected {})",
                    data.len(),
                    rows,
                    cols,
                    rows * cols
                ),
            });
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Dim {
                    op: "Mat::from_rows",
                    detail: format!("ragged rows: expected width {}, got {}", c, row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Mat { rows: r, cols: c, data })
    }

    /// A 1-row matrix wrapping a vector; used by the gradient checker.
    pub fn row_vector(v: &[f64]) -> Self {
        Mat {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
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
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Standard matrix product. Backward: `dA = G·Bᵀ`, `dB = Aᵀ·G`.
    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.rows {
            return Err(Error::Dim {
                op: "matmul",
                detail: format!(
                    "{}x{} times {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            });
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        // i-k-j order keeps the inner loop contiguous in both operands.
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Elementwise product; both operands must have identical shape.
    pub fn hadamard(&self, other: &Mat) -> Result<Mat> {
        if self.shape() != other.shape() {
            return Err(Error::Dim {
                op: "hadamard",
                detail: format!(
                    "{}x{} vs {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add(&self, other: &Mat) -> Result<Mat> {
        if self.shape() != other.shape() {
            return Err(Error::Dim {
                op: "add",
                detail: format!(
                    "{}x{} vs {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// In-place `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &Mat) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dim {
                op: "axpy",
                detail: format!(
                    "{}x{} vs {}x{}",
                    self.rows, self.cols, other.rows, other.cols
                ),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// `m · v` for a length-`cols` vector.
pub fn mat_vec(m: &Mat, v: &[f64]) -> Vec<f64> {
    debug_assert_eq!(m.cols(), v.len());
    let mut out = vec![0.0; m.rows()];
    for (i, o) in out.iter_mut().enumerate() {
        *o = dot(m.row(i), v);
    }
    out
}

/// `mᵀ · v` for a length-`rows` vector.
pub fn mat_tvec(m: &Mat, v: &[f64]) -> Vec<f64> {
    debug_assert_eq!(m.rows(), v.len());
    let mut out = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        let vi = v[i];
        if vi == 0.0 {
            continue;
        }
        for (o, a) in out.iter_mut().zip(m.row(i)) {
            *o += vi * a;
        }
    }
    out
}

/// Rank-one accumulation `acc += a·bᵀ`; the workhorse of weight gradients.
pub fn outer_acc(acc: &mut Mat, a: &[f64], b: &[f64]) {
    debug_assert_eq!(acc.rows(), a.len());
    debug_assert_eq!(acc.cols(), b.len());
    let cols = acc.cols();
    for (i, &ai) in a.iter().enumerate() {
        if ai == 0.0 {
            continue;
        }
        let row = &mut acc.data_mut()[i * cols..(i + 1) * cols];
        for (o, &bj) in row.iter_mut().zip(b) {
            *o += ai * bj;
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// In-place `acc += s * v` on slices.
#[inline]
pub fn axpy_slice(acc: &mut [f64], s: f64, v: &[f64]) {
    debug_assert_eq!(acc.len(), v.len());
    for (a, b) in acc.iter_mut().zip(v) {
        *a += s * b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let m = Mat::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let id = Mat::identity(3);
        assert_eq!(m.matmul(&id).unwrap(), m);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Mat::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Mat::zeros(2, 3);
        let b = Mat::zeros(2, 2);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("2x2"), "got: {msg}");
    }

    #[test]
    fn hadamard_cases() {
        let a = Mat::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let ones = Mat::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let b = Mat::from_rows(&[vec![3.0, 4.0]]).unwrap();
        assert_eq!(a.hadamard(&ones).unwrap(), a);
        assert_eq!(a.hadamard(&b).unwrap().data(), &[3.0, 8.0]);
        let zeros = Mat::zeros(1, 2);
        assert_eq!(a.hadamard(&zeros).unwrap(), zeros);
        assert!(a.hadamard(&Mat::zeros(2, 2)).is_err());
    }

    #[test]
    fn transpose_round_trip() {
        let m = Mat::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(m.transpose().transpose(), m);
        assert_eq!(m.transpose().at(2, 1), 6.0);
    }

    #[test]
    fn mat_vec_agrees_with_matmul() {
        let m = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let v = [0.5, -1.0];
        let got = mat_vec(&m, &v);
        let col = Mat::from_vec(2, 1, v.to_vec()).unwrap();
        let want = m.matmul(&col).unwrap();
        assert_eq!(got, want.data());
        let vt = [1.0, 0.0, -2.0];
        let got_t = mat_tvec(&m, &vt);
        assert_eq!(got_t, vec![1.0 - 10.0, 2.0 - 12.0]);
    }
}
