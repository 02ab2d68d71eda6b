//! Direction-aware message passing.
//!
//! Contextual coefficients come from a tri-linear model over sender,
//! receiver, and union-box features, so swapping the pair order changes the
//! score. Normalized coefficients for both directions are stacked into a
//! two-block aggregate, refined by a bottleneck transformer layer
//! (projection, layer norm, ReLU, projection), and added back residually.
//!
//! `dmp_forward_cached` + `dmp_backward` give the gradient path the trainer
//! uses; every weight gradient here is checked against finite differences.

use super::{init_mat, init_vec, AttentionMap, UnionFeatures};
use crate::error::{Error, Result};
use crate::linalg::{
    axpy_slice, dot, layer_norm, layer_norm_backward, mat_tvec, mat_vec, outer_acc, relu,
    relu_backward, softmax_masked_backward, Mat, DEFAULT_LN_EPS,
};
use rand::Rng;

/// Weights of the direction-aware module. With feature dim `d` and union
/// dim `d_u`, the transformer bottleneck is `h = d/4` wide and the stacked
/// aggregate keeps width `d` (two blocks of `d/2`), mirroring the
/// 512/2048/128/256 layout at full scale.
#[derive(Debug, Clone)]
pub struct DmpParams {
    pub w_s: Mat,
    pub w_o: Mat,
    pub w_u: Mat,
    pub w_e: Vec<f64>,
    pub w_t3: Mat,
    pub w_t2: Mat,
    pub w_t1: Mat,
    pub ln_gain: Vec<f64>,
    pub ln_bias: Vec<f64>,
    pub ln_eps: f64,
}

impl DmpParams {
    pub fn init(dim: usize, union_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if !dim.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "feature dim must be divisible by 4 (stack blocks d/2, bottleneck d/4), got {dim}"
            )));
        }
        let half = dim / 2;
        let bottleneck = dim / 4;
        Ok(DmpParams {
            w_s: init_mat(rng, dim, dim),
            w_o: init_mat(rng, dim, dim),
            w_u: init_mat(rng, dim, union_dim),
            w_e: init_vec(rng, dim),
            w_t3: init_mat(rng, half, dim),
            w_t2: init_mat(rng, bottleneck, dim),
            w_t1: init_mat(rng, dim, bottleneck),
            ln_gain: vec![1.0; bottleneck],
            ln_bias: vec![0.0; bottleneck],
            ln_eps: DEFAULT_LN_EPS,
        })
    }

    pub fn dim(&self) -> usize {
        self.w_s.rows()
    }

    pub fn union_dim(&self) -> usize {
        self.w_u.cols()
    }

    pub fn bottleneck(&self) -> usize {
        self.w_t2.rows()
    }

    /// All-zero gradients matching this parameter set's shapes.
    pub fn zero_grads(&self) -> DmpGrads {
        DmpGrads {
            w_s: Mat::zeros(self.w_s.rows(), self.w_s.cols()),
            w_o: Mat::zeros(self.w_o.rows(), self.w_o.cols()),
            w_u: Mat::zeros(self.w_u.rows(), self.w_u.cols()),
            w_e: vec![0.0; self.w_e.len()],
            w_t3: Mat::zeros(self.w_t3.rows(), self.w_t3.cols()),
            w_t2: Mat::zeros(self.w_t2.rows(), self.w_t2.cols()),
            w_t1: Mat::zeros(self.w_t1.rows(), self.w_t1.cols()),
            ln_gain: vec![0.0; self.ln_gain.len()],
            ln_bias: vec![0.0; self.ln_bias.len()],
        }
    }
}

/// Gradients for every matrix in [`DmpParams`].
#[derive(Debug, Clone)]
pub struct DmpGrads {
    pub w_s: Mat,
    pub w_o: Mat,
    pub w_u: Mat,
    pub w_e: Vec<f64>,
    pub w_t3: Mat,
    pub w_t2: Mat,
    pub w_t1: Mat,
    pub ln_gain: Vec<f64>,
    pub ln_bias: Vec<f64>,
}

impl DmpGrads {
    pub fn accumulate(&mut self, other: &DmpGrads) {
        self.w_s.axpy(1.0, &other.w_s).unwrap();
        self.w_o.axpy(1.0, &other.w_o).unwrap();
        self.w_u.axpy(1.0, &other.w_u).unwrap();
        axpy_slice(&mut self.w_e, 1.0, &other.w_e);
        self.w_t3.axpy(1.0, &other.w_t3).unwrap();
        self.w_t2.axpy(1.0, &other.w_t2).unwrap();
        self.w_t1.axpy(1.0, &other.w_t1).unwrap();
        axpy_slice(&mut self.ln_gain, 1.0, &other.ln_gain);
        axpy_slice(&mut self.ln_bias, 1.0, &other.ln_bias);
    }
}

/// Intermediates of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct DmpCache {
    /// W_s x_i rows.
    subj: Mat,
    /// W_o x_j rows.
    obj: Mat,
    /// W_u u_ij per ordered pair (flat n*n, empty on the diagonal).
    union_proj: Vec<Vec<f64>>,
    attention: AttentionMap,
    /// W_t3 x_j rows.
    neigh_proj: Mat,
    /// Stacked two-direction aggregates, n×d.
    aggregate: Mat,
    /// Pre-layer-norm bottleneck activations.
    pre_ln: Vec<Vec<f64>>,
    /// Post-layer-norm activations.
    post_ln: Vec<Vec<f64>>,
    /// Post-ReLU activations.
    post_relu: Vec<Vec<f64>>,
}

/// Tri-linear contextual coefficients `e_ij = w_eᵀ(W_s x_i ⊙ W_o x_j ⊙ W_u u_ij)`.
/// The diagonal is unused and left zero.
pub fn dmp_coefficients(x: &Mat, u: &UnionFeatures, params: &DmpParams) -> Result<Mat> {
    let (scores, ..) = coefficients_cached(x, u, params)?;
    Ok(scores)
}

fn coefficients_cached(
    x: &Mat,
    u: &UnionFeatures,
    params: &DmpParams,
) -> Result<(Mat, Mat, Mat, Vec<Vec<f64>>)> {
    let n = x.rows();
    let subj = x.matmul(&params.w_s.transpose())?;
    let obj = x.matmul(&params.w_o.transpose())?;
    let mut union_proj = vec![Vec::new(); n * n];
    let mut scores = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let m = mat_vec(&params.w_u, u.get(i, j)?);
            let e = triple_dot(&params.w_e, subj.row(i), obj.row(j), &m);
            scores.set(i, j, e);
            union_proj[i * n + j] = m;
        }
    }
    Ok((scores, subj, obj, union_proj))
}

#[inline]
fn triple_dot(w: &[f64], a: &[f64], b: &[f64], c: &[f64]) -> f64 {
    w.iter()
        .zip(a)
        .zip(b.iter().zip(c))
        .map(|((wi, ai), (bi, ci))| wi * ai * bi * ci)
        .sum()
}

/// Row-wise masked softmax of the coefficient matrix.
pub fn dmp_normalize(scores: &Mat) -> Result<AttentionMap> {
    AttentionMap::from_scores(scores)
}

/// Stacked two-direction aggregation:
/// row i = `Σ_{j≠i} [α_ij · W_t3 x_j ; α_ji · W_t3 x_j]`, width d.
pub fn dmp_aggregate(attention: &AttentionMap, x: &Mat, params: &DmpParams) -> Result<Mat> {
    let neigh_proj = x.matmul(&params.w_t3.transpose())?;
    Ok(aggregate_from_proj(attention, &neigh_proj))
}

fn aggregate_from_proj(attention: &AttentionMap, neigh_proj: &Mat) -> Mat {
    let n = neigh_proj.rows();
    let half = neigh_proj.cols();
    let mut agg = Mat::zeros(n, 2 * half);
    for i in 0..n {
        for j in 0..n {
            if j == i {
                continue;
            }
            let fwd = attention.mat().at(i, j);
            let bwd = attention.mat().at(j, i);
            let row = agg.row_mut(i);
            axpy_slice(&mut row[..half], fwd, neigh_proj.row(j));
            axpy_slice(&mut row[half..], bwd, neigh_proj.row(j));
        }
    }
    agg
}

/// Full module: coefficients, normalization, stacked aggregation, transformer
/// refinement, residual connection.
pub fn dmp_forward(x: &Mat, u: &UnionFeatures, params: &DmpParams) -> Result<(Mat, AttentionMap)> {
    let (z, cache) = dmp_forward_cached(x, u, params)?;
    Ok((z, cache.attention))
}

/// Forward pass that keeps every intermediate needed by [`dmp_backward`].
pub fn dmp_forward_cached(
    x: &Mat,
    u: &UnionFeatures,
    params: &DmpParams,
) -> Result<(Mat, DmpCache)> {
    let (n, d) = x.shape();
    if d != params.dim() {
        return Err(Error::Dim {
            op: "dmp_forward",
            detail: format!("features are {n}x{d} but params expect dim {}", params.dim()),
        });
    }
    if n == 1 {
        // Empty neighborhood: the contextual sum is zero by convention.
        let cache = DmpCache {
            subj: Mat::zeros(1, d),
            obj: Mat::zeros(1, d),
            union_proj: vec![Vec::new()],
            attention: AttentionMap::singleton(),
            neigh_proj: Mat::zeros(1, d / 2),
            aggregate: Mat::zeros(1, d),
            pre_ln: vec![Vec::new()],
            post_ln: vec![Vec::new()],
            post_relu: vec![Vec::new()],
        };
        return Ok((x.clone(), cache));
    }

    let (scores, subj, obj, union_proj) = coefficients_cached(x, u, params)?;
    let attention = dmp_normalize(&scores)?;
    let neigh_proj = x.matmul(&params.w_t3.transpose())?;
    let aggregate = aggregate_from_proj(&attention, &neigh_proj);

    let mut z = x.clone();
    let mut pre_ln = Vec::with_capacity(n);
    let mut post_ln = Vec::with_capacity(n);
    let mut post_relu = Vec::with_capacity(n);
    for i in 0..n {
        let t = mat_vec(&params.w_t2, aggregate.row(i));
        let l = layer_norm(&t, &params.ln_gain, &params.ln_bias, params.ln_eps)?;
        let r = relu(&l);
        let delta = mat_vec(&params.w_t1, &r);
        axpy_slice(z.row_mut(i), 1.0, &delta);
        pre_ln.push(t);
        post_ln.push(l);
        post_relu.push(r);
    }
    let cache = DmpCache {
        subj,
        obj,
        union_proj,
        attention,
        neigh_proj,
        aggregate,
        pre_ln,
        post_ln,
        post_relu,
    };
    Ok((z, cache))
}

/// Vector-Jacobian product of the whole module. Returns parameter gradients
/// and the gradient with respect to the input features. Gradients w.r.t. the
/// union features are not propagated; nothing learnable produces them.
pub fn dmp_backward(
    x: &Mat,
    u: &UnionFeatures,
    params: &DmpParams,
    cache: &DmpCache,
    upstream: &Mat,
) -> Result<(DmpGrads, Mat)> {
    let (n, d) = x.shape();
    let half = d / 2;
    let mut grads = params.zero_grads();
    let mut dx = upstream.clone(); // residual path

    if n == 1 {
        return Ok((grads, dx));
    }

    // Transformer layer, per node.
    let mut d_aggregate = Mat::zeros(n, d);
    for i in 0..n {
        let g = upstream.row(i);
        outer_acc(&mut grads.w_t1, g, &cache.post_relu[i]);
        let d_relu_out = mat_tvec(&params.w_t1, g);
        let d_ln_out = relu_backward(&cache.post_ln[i], &d_relu_out);
        let (dt, dgain, dbias) =
            layer_norm_backward(&cache.pre_ln[i], &params.ln_gain, params.ln_eps, &d_ln_out);
        axpy_slice(&mut grads.ln_gain, 1.0, &dgain);
        axpy_slice(&mut grads.ln_bias, 1.0, &dbias);
        outer_acc(&mut grads.w_t2, &dt, cache.aggregate.row(i));
        let dagg = mat_tvec(&params.w_t2, &dt);
        d_aggregate.row_mut(i).copy_from_slice(&dagg);
    }

    // Stacked aggregation: fan gradients out to attention entries and the
    // projected neighbor features.
    let mut d_neigh_proj = Mat::zeros(n, half);
    let mut d_attention = Mat::zeros(n, n);
    for i in 0..n {
        let dagg = d_aggregate.row(i);
        let (dfwd, dbwd) = dagg.split_at(half);
        for j in 0..n {
            if j == i {
                continue;
            }
            let yj = cache.neigh_proj.row(j);
            *d_attention.row_mut(i).get_mut(j).unwrap() += dot(dfwd, yj);
            *d_attention.row_mut(j).get_mut(i).unwrap() += dot(dbwd, yj);
            let a_fwd = cache.attention.mat().at(i, j);
            let a_bwd = cache.attention.mat().at(j, i);
            axpy_slice(d_neigh_proj.row_mut(j), a_fwd, dfwd);
            axpy_slice(d_neigh_proj.row_mut(j), a_bwd, dbwd);
        }
    }
    for j in 0..n {
        outer_acc(&mut grads.w_t3, d_neigh_proj.row(j), x.row(j));
        let dxj = mat_tvec(&params.w_t3, d_neigh_proj.row(j));
        axpy_slice(dx.row_mut(j), 1.0, &dxj);
    }

    // Softmax rows, then the tri-linear coefficients.
    let mut d_subj = Mat::zeros(n, d);
    let mut d_obj = Mat::zeros(n, d);
    for i in 0..n {
        let d_scores = softmax_masked_backward(cache.attention.mat().row(i), d_attention.row(i), &[i]);
        for j in 0..n {
            if j == i {
                continue;
            }
            let g = d_scores[j];
            if g == 0.0 {
                continue;
            }
            let s = cache.subj.row(i);
            let o = cache.obj.row(j);
            let m = &cache.union_proj[i * n + j];
            for k in 0..d {
                grads.w_e[k] += g * s[k] * o[k] * m[k];
                d_subj.row_mut(i)[k] += g * params.w_e[k] * o[k] * m[k];
                d_obj.row_mut(j)[k] += g * params.w_e[k] * s[k] * m[k];
            }
            let dm: Vec<f64> = (0..d).map(|k| g * params.w_e[k] * s[k] * o[k]).collect();
            outer_acc(&mut grads.w_u, &dm, u.get(i, j)?);
        }
    }
    for i in 0..n {
        outer_acc(&mut grads.w_s, d_subj.row(i), x.row(i));
        let ds = mat_tvec(&params.w_s, d_subj.row(i));
        axpy_slice(dx.row_mut(i), 1.0, &ds);
        outer_acc(&mut grads.w_o, d_obj.row(i), x.row(i));
        let do_ = mat_tvec(&params.w_o, d_obj.row(i));
        axpy_slice(dx.row_mut(i), 1.0, &do_);
    }

    Ok((grads, dx))
}

/// Ablation variant without the two-direction stack: the aggregate keeps the
/// forward coefficient only, through a full-width projection `w_t3_full`
/// (d×d). The transformer layer and residual are identical.
pub fn no_stack_forward(
    x: &Mat,
    u: &UnionFeatures,
    params: &DmpParams,
    w_t3_full: &Mat,
) -> Result<(Mat, AttentionMap)> {
    let (n, d) = x.shape();
    if w_t3_full.shape() != (d, d) {
        return Err(Error::Dim {
            op: "no_stack_forward",
            detail: format!(
                "w_t3_full is {}x{}, expected {d}x{d}",
                w_t3_full.rows(),
                w_t3_full.cols()
            ),
        });
    }
    if n == 1 {
        return Ok((x.clone(), AttentionMap::singleton()));
    }
    let scores = dmp_coefficients(x, u, params)?;
    let attention = dmp_normalize(&scores)?;
    let neigh_proj = x.matmul(&w_t3_full.transpose())?;
    let mut z = x.clone();
    for i in 0..n {
        let mut agg = vec![0.0; d];
        for j in 0..n {
            if j == i {
                continue;
            }
            axpy_slice(&mut agg, attention.mat().at(i, j), neigh_proj.row(j));
        }
        let t = mat_vec(&params.w_t2, &agg);
        let l = layer_norm(&t, &params.ln_gain, &params.ln_bias, params.ln_eps)?;
        let r = relu(&l);
        let delta = mat_vec(&params.w_t1, &r);
        axpy_slice(z.row_mut(i), 1.0, &delta);
    }
    Ok((z, attention))
}

/// Random union features for tests and gradient fixtures.
#[doc(hidden)]
pub fn random_union_features(n: usize, dim: usize, rng: &mut impl Rng) -> UnionFeatures {
    let mut u = UnionFeatures::new(n, dim);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            u.set_pair(i, j, v).unwrap();
        }
    }
    u
}
