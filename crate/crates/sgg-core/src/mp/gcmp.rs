//! Global-context message passing and its simplified form.
//!
//! Both score neighbors, normalize over the masked neighborhood, aggregate
//! projected neighbor features, and add the result back through a ReLU and
//! an output projection. They differ only in the score: the full module
//! scores the concatenation `[x_i, x_j]` with a 2d-vector, the simplified
//! one scores `x_j` alone, so its unnormalized scores are identical for
//! every receiving node.

use super::{init_mat, init_vec, AttentionMap};
use crate::error::{Error, Result};
use crate::linalg::{dot, mat_vec, relu, Mat};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct GcmpParams {
    pub w_z: Mat,
    pub w_v: Mat,
    /// Scoring vector over the concatenated pair, length 2d.
    pub w: Vec<f64>,
}

impl GcmpParams {
    pub fn init(dim: usize, rng: &mut impl Rng) -> Self {
        GcmpParams {
            w_z: init_mat(rng, dim, dim),
            w_v: init_mat(rng, dim, dim),
            w: init_vec(rng, 2 * dim),
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.w_z.shape() != (dim, dim) || self.w_v.shape() != (dim, dim) || self.w.len() != 2 * dim
        {
            return Err(Error::Dim {
                op: "gcmp_forward",
                detail: format!(
                    "feature dim {dim}: w_z {}x{}, w_v {}x{}, w length {}",
                    self.w_z.rows(),
                    self.w_z.cols(),
                    self.w_v.rows(),
                    self.w_v.cols(),
                    self.w.len()
                ),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SgcmpParams {
    pub w_z: Mat,
    pub w_v: Mat,
    /// Scoring vector over the sending node alone, length d.
    pub w_e: Vec<f64>,
}

impl SgcmpParams {
    pub fn init(dim: usize, rng: &mut impl Rng) -> Self {
        SgcmpParams {
            w_z: init_mat(rng, dim, dim),
            w_v: init_mat(rng, dim, dim),
            w_e: init_vec(rng, dim),
        }
    }
}

/// Full-pair scoring: `z_i = x_i + W_z relu(Σ_j c_ij W_v x_j)` with
/// `c_ij = softmax_{j≠i}(wᵀ[x_i, x_j])`.
pub fn gcmp_forward(x: &Mat, params: &GcmpParams) -> Result<(Mat, AttentionMap)> {
    let (n, d) = x.shape();
    params.validate(d)?;
    if n == 1 {
        return Ok((x.clone(), AttentionMap::singleton()));
    }
    let (w_self, w_other) = params.w.split_at(d);
    let self_scores: Vec<f64> = (0..n).map(|i| dot(w_self, x.row(i))).collect();
    let other_scores: Vec<f64> = (0..n).map(|j| dot(w_other, x.row(j))).collect();
    let mut scores = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            scores.set(i, j, self_scores[i] + other_scores[j]);
        }
    }
    let attention = AttentionMap::from_scores(&scores)?;
    aggregate(x, &attention, &params.w_v, &params.w_z).map(|z| (z, attention))
}

/// Sender-only scoring: `c_ij = softmax_{j≠i}(w_eᵀ x_j)`.
pub fn sgcmp_forward(x: &Mat, params: &SgcmpParams) -> Result<(Mat, AttentionMap)> {
    let (n, _) = x.shape();
    if n == 1 {
        return Ok((x.clone(), AttentionMap::singleton()));
    }
    let per_node = sgcmp_scores(x, params);
    let mut scores = Mat::zeros(n, n);
    for i in 0..n {
        scores.row_mut(i).copy_from_slice(&per_node);
    }
    let attention = AttentionMap::from_scores(&scores)?;
    aggregate(x, &attention, &params.w_v, &params.w_z).map(|z| (z, attention))
}

/// The unnormalized simplified scores `w_eᵀ x_j`. By construction they do
/// not depend on the receiving node, which is exactly the degeneracy the
/// direction-aware module removes.
pub fn sgcmp_scores(x: &Mat, params: &SgcmpParams) -> Vec<f64> {
    (0..x.rows()).map(|j| dot(&params.w_e, x.row(j))).collect()
}

fn aggregate(x: &Mat, attention: &AttentionMap, w_v: &Mat, w_z: &Mat) -> Result<Mat> {
    let (n, d) = x.shape();
    let v = x.matmul(&w_v.transpose())?;
    let mut z = x.clone();
    for i in 0..n {
        let mut ctx = vec![0.0; d];
        for j in 0..n {
            if j == i {
                continue;
            }
            crate::linalg::axpy_slice(&mut ctx, attention.mat().at(i, j), v.row(j));
        }
        let activated = relu(&ctx);
        let delta = mat_vec(w_z, &activated);
        crate::linalg::axpy_slice(z.row_mut(i), 1.0, &delta);
    }
    Ok(z)
}
