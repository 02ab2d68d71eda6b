//! Message passing over scene-graph nodes.
//!
//! Three variants refine the n×d node-feature matrix: a global-context
//! module scoring concatenated node pairs ([`gcmp_forward`]), its simplified
//! form scoring the sender alone ([`sgcmp_forward`]), and the direction-aware
//! module ([`dmp_forward`]) whose tri-linear coefficients couple sender,
//! receiver, and the union-box feature, stacked over both edge directions and
//! refined by a small transformer layer. Each returns the refined features
//! together with the attention map that produced them.
//!
//! The neighborhood of node i is every other node; a single-node graph has an
//! empty contextual sum and passes its features through unchanged.

mod dmp;
mod gcmp;

pub use dmp::{
    dmp_aggregate, dmp_backward, dmp_coefficients, dmp_forward, dmp_forward_cached, dmp_normalize,
    no_stack_forward, random_union_features, DmpCache, DmpGrads, DmpParams,
};
pub use gcmp::{gcmp_forward, sgcmp_forward, sgcmp_scores, GcmpParams, SgcmpParams};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use rand::Rng;
use std::io::Write;
use std::path::Path;

/// Union-box features for every unordered node pair, stored once and served
/// for both orders: `get(i, j)` and `get(j, i)` return the same slice.
#[derive(Debug, Clone)]
pub struct UnionFeatures {
    n: usize,
    dim: usize,
    pairs: Vec<Option<Vec<f64>>>,
}

impl UnionFeatures {
    pub fn new(n: usize, dim: usize) -> Self {
        UnionFeatures {
            n,
            dim,
            pairs: vec![None; n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Stores the feature for the unordered pair {i, j}.
    pub fn set_pair(&mut self, i: usize, j: usize, v: Vec<f64>) -> Result<()> {
        if i == j || i >= self.n || j >= self.n {
            return Err(Error::Data(format!(
                "union feature pair ({i}, {j}) invalid for {} nodes",
                self.n
            )));
        }
        if v.len() != self.dim {
            return Err(Error::Dim {
                op: "UnionFeatures::set_pair",
                detail: format!("expected length {}, got {}", self.dim, v.len()),
            });
        }
        self.pairs[i * self.n + j] = Some(v.clone());
        self.pairs[j * self.n + i] = Some(v);
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> Result<&[f64]> {
        self.pairs
            .get(i * self.n + j)
            .and_then(|p| p.as_deref())
            .ok_or_else(|| Error::Data(format!("missing union feature for pair ({i}, {j})")))
    }

    /// Unordered pairs (i < j) that have a stored feature.
    pub fn iter_upper(&self) -> impl Iterator<Item = (usize, usize, &[f64])> {
        let n = self.n;
        (0..n).flat_map(move |i| {
            ((i + 1)..n).filter_map(move |j| {
                self.pairs[i * n + j].as_deref().map(|v| (i, j, v))
            })
        })
    }
}

/// Row-normalized attention over the masked neighborhood: zero diagonal,
/// each row of an n≥2 map sums to one over the off-diagonal entries.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    mat: Mat,
}

impl AttentionMap {
    /// Row-wise masked softmax of a coefficient matrix. Errors on a 1×1
    /// input, whose neighborhood is empty.
    pub fn from_scores(scores: &Mat) -> Result<Self> {
        let n = scores.rows();
        if n != scores.cols() {
            return Err(Error::Dim {
                op: "AttentionMap::from_scores",
                detail: format!("expected square matrix, got {}x{}", n, scores.cols()),
            });
        }
        if n < 2 {
            return Err(Error::EmptyNeighborhood {
                op: "attention normalization",
            });
        }
        let mut mat = Mat::zeros(n, n);
        for i in 0..n {
            let row = crate::linalg::softmax_masked(scores.row(i), &[i])?;
            mat.row_mut(i).copy_from_slice(&row);
        }
        Ok(AttentionMap { mat })
    }

    /// The all-zero 1×1 map of a single-node graph.
    pub fn singleton() -> Self {
        AttentionMap { mat: Mat::zeros(1, 1) }
    }

    pub fn mat(&self) -> &Mat {
        &self.mat
    }

    pub fn n(&self) -> usize {
        self.mat.rows()
    }

    /// Writes the map as CSV, one row per line, six significant digits.
    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for i in 0..self.mat.rows() {
            let line = self
                .mat
                .row(i)
                .iter()
                .map(|v| format!("{v:.5e}"))
                .collect::<Vec<_>>()
                .join(",");
            writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut rows = Vec::new();
        for line in text.lines() {
            let row: std::result::Result<Vec<f64>, _> =
                line.split(',').map(str::trim).map(str::parse).collect();
            rows.push(row.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?);
        }
        Ok(AttentionMap {
            mat: Mat::from_rows(&rows)?,
        })
    }
}

/// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
pub(crate) fn init_mat(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    let bound = 1.0 / (cols as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Mat::from_vec(rows, cols, data).expect("shape exact by construction")
}

pub(crate) fn init_vec(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    let bound = 1.0 / (len as f64).sqrt();
    (0..len).map(|_| rng.random_range(-bound..bound)).collect()
}
