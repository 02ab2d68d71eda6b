//! Adaptive reasoning over relationships: the frequency prior is softened by
//! a log-softmax, gated per pair by a sigmoid attention over the union-box
//! feature, and added as a bias to a fused visual score.
//!
//! The fusion `x * y = relu(W_x x + W_y y) - (W_x x - W_y y)^2` is applied
//! left-associatively: the two node features fuse first, then the result
//! fuses with the union feature, each stage with its own projections. The
//! prior itself is frozen statistics; the gate and all projections learn.

use crate::error::{Error, Result};
use crate::linalg::{
    axpy_slice, log_softmax, mat_tvec, mat_vec, outer_acc, relu, relu_backward, sigmoid,
    sigmoid_backward, softmax_row, Mat,
};
use crate::mp::init_mat;
use crate::prior::FrequencyPrior;
use rand::Rng;

/// A predicate distribution for one ordered node pair.
#[derive(Debug, Clone)]
pub struct RelDistribution {
    probs: Vec<f64>,
}

impl RelDistribution {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Weights of the reasoning module. `fusion_dim` mirrors the 1024-wide
/// fusion space at full scale (2d here).
#[derive(Debug, Clone)]
pub struct ArmParams {
    /// Gate projection, R×d_u.
    pub w_p: Mat,
    /// Relationship classifier over the fused feature, R×f.
    pub w_r: Mat,
    /// First fusion stage (node features), f×d each.
    pub w_x1: Mat,
    pub w_y1: Mat,
    /// Second fusion stage (fused pair with the union feature), f×f and f×d_u.
    pub w_x2: Mat,
    pub w_y2: Mat,
}

impl ArmParams {
    pub fn init(
        num_predicates: usize,
        dim: usize,
        union_dim: usize,
        fusion_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        ArmParams {
            w_p: init_mat(rng, num_predicates, union_dim),
            w_r: init_mat(rng, num_predicates, fusion_dim),
            w_x1: init_mat(rng, fusion_dim, dim),
            w_y1: init_mat(rng, fusion_dim, dim),
            w_x2: init_mat(rng, fusion_dim, fusion_dim),
            w_y2: init_mat(rng, fusion_dim, union_dim),
        }
    }

    pub fn num_predicates(&self) -> usize {
        self.w_r.rows()
    }

    pub fn fusion_dim(&self) -> usize {
        self.w_r.cols()
    }

    pub fn zero_grads(&self) -> ArmGrads {
        ArmGrads {
            w_p: Mat::zeros(self.w_p.rows(), self.w_p.cols()),
            w_r: Mat::zeros(self.w_r.rows(), self.w_r.cols()),
            w_x1: Mat::zeros(self.w_x1.rows(), self.w_x1.cols()),
            w_y1: Mat::zeros(self.w_y1.rows(), self.w_y1.cols()),
            w_x2: Mat::zeros(self.w_x2.rows(), self.w_x2.cols()),
            w_y2: Mat::zeros(self.w_y2.rows(), self.w_y2.cols()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ArmGrads {
    pub w_p: Mat,
    pub w_r: Mat,
    pub w_x1: Mat,
    pub w_y1: Mat,
    pub w_x2: Mat,
    pub w_y2: Mat,
}

impl ArmGrads {
    pub fn accumulate(&mut self, other: &ArmGrads) {
        self.w_p.axpy(1.0, &other.w_p).unwrap();
        self.w_r.axpy(1.0, &other.w_r).unwrap();
        self.w_x1.axpy(1.0, &other.w_x1).unwrap();
        self.w_y1.axpy(1.0, &other.w_y1).unwrap();
        self.w_x2.axpy(1.0, &other.w_x2).unwrap();
        self.w_y2.axpy(1.0, &other.w_y2).unwrap();
    }
}

/// Log-softmax softening of a frequency distribution. Strictly negative,
/// order-preserving, and gap-preserving: differences between entries carry
/// through unchanged.
pub fn soften_prior(p_vec: &[f64]) -> Vec<f64> {
    log_softmax(p_vec)
}

/// How the prior enters the relationship logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasMode {
    /// Softened prior, gated per pair by the union-feature attention.
    #[default]
    SoftenGate,
    /// The raw conditional probabilities added directly, ungated.
    RawPrior,
}

/// Softened prior vectors cached per (subject class, object class) pair.
#[derive(Debug, Clone)]
pub struct SoftenedPrior {
    num_object_classes: usize,
    vectors: Vec<Vec<f64>>,
    mode: BiasMode,
}

impl SoftenedPrior {
    pub fn new(prior: &FrequencyPrior, mode: BiasMode) -> Self {
        let o = prior.num_object_classes();
        let mut vectors = Vec::with_capacity(o * o);
        for s in 0..o {
            for t in 0..o {
                let raw = prior.lookup(s, t).expect("class bounds checked by loop");
                vectors.push(match mode {
                    BiasMode::SoftenGate => soften_prior(raw),
                    BiasMode::RawPrior => raw.to_vec(),
                });
            }
        }
        SoftenedPrior {
            num_object_classes: o,
            vectors,
            mode,
        }
    }

    pub fn mode(&self) -> BiasMode {
        self.mode
    }

    pub fn get(&self, subj_class: usize, obj_class: usize) -> Result<&[f64]> {
        if subj_class >= self.num_object_classes || obj_class >= self.num_object_classes {
            return Err(Error::Range {
                what: "softened prior class",
                index: subj_class.max(obj_class),
                bound: self.num_object_classes,
            });
        }
        Ok(&self.vectors[subj_class * self.num_object_classes + obj_class])
    }
}

/// Sigmoid attention over the frequency prior, one gate per predicate.
pub fn bias_gate(u_ij: &[f64], w_p: &Mat) -> Result<Vec<f64>> {
    if w_p.cols() != u_ij.len() {
        return Err(Error::Dim {
            op: "bias_gate",
            detail: format!("w_p is {}x{}, union feature has length {}", w_p.rows(), w_p.cols(), u_ij.len()),
        });
    }
    Ok(sigmoid(&mat_vec(w_p, u_ij)))
}

/// One fusion stage: `relu(W_x x + W_y y) - (W_x x - W_y y) ⊙ (W_x x - W_y y)`.
pub fn fuse(x: &[f64], y: &[f64], w_x: &Mat, w_y: &Mat) -> Result<Vec<f64>> {
    if w_x.cols() != x.len() || w_y.cols() != y.len() || w_x.rows() != w_y.rows() {
        return Err(Error::Dim {
            op: "fuse",
            detail: format!(
                "w_x {}x{} with x length {}, w_y {}x{} with y length {}",
                w_x.rows(),
                w_x.cols(),
                x.len(),
                w_y.rows(),
                w_y.cols(),
                y.len()
            ),
        });
    }
    let a = mat_vec(w_x, x);
    let b = mat_vec(w_y, y);
    Ok(a.iter()
        .zip(&b)
        .map(|(ai, bi)| (ai + bi).max(0.0) - (ai - bi) * (ai - bi))
        .collect())
}

/// Intermediates of one pair's scoring, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ArmCache {
    proj_x1: Vec<f64>,
    proj_y1: Vec<f64>,
    fused1: Vec<f64>,
    proj_x2: Vec<f64>,
    proj_y2: Vec<f64>,
    fused2: Vec<f64>,
    gate: Option<Vec<f64>>,
    probs: Vec<f64>,
}

impl ArmCache {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Relationship distribution for one ordered pair:
/// `softmax(W_r (z_i * z_j * u_ij) + d ⊙ softened_prior)` in the default
/// mode, or with the raw prior as an ungated bias in the ablation mode.
pub fn rel_scores(
    z_i: &[f64],
    z_j: &[f64],
    u_ij: &[f64],
    prior_vec: &[f64],
    params: &ArmParams,
    mode: BiasMode,
) -> Result<RelDistribution> {
    let cache = rel_scores_cached(z_i, z_j, u_ij, prior_vec, params, mode)?;
    Ok(RelDistribution { probs: cache.probs })
}

pub fn rel_scores_cached(
    z_i: &[f64],
    z_j: &[f64],
    u_ij: &[f64],
    prior_vec: &[f64],
    params: &ArmParams,
    mode: BiasMode,
) -> Result<ArmCache> {
    if prior_vec.len() != params.num_predicates() {
        return Err(Error::Dim {
            op: "rel_scores",
            detail: format!(
                "prior has length {}, params expect {} predicates",
                prior_vec.len(),
                params.num_predicates()
            ),
        });
    }
    let proj_x1 = mat_vec(&params.w_x1, z_i);
    let proj_y1 = mat_vec(&params.w_y1, z_j);
    let fused1 = fuse_from_proj(&proj_x1, &proj_y1);
    let proj_x2 = mat_vec(&params.w_x2, &fused1);
    let proj_y2 = mat_vec(&params.w_y2, u_ij);
    let fused2 = fuse_from_proj(&proj_x2, &proj_y2);
    let visual = mat_vec(&params.w_r, &fused2);

    let (gate, bias): (Option<Vec<f64>>, Vec<f64>) = match mode {
        BiasMode::SoftenGate => {
            let gate = bias_gate(u_ij, &params.w_p)?;
            let bias = gate.iter().zip(prior_vec).map(|(g, p)| g * p).collect();
            (Some(gate), bias)
        }
        BiasMode::RawPrior => (None, prior_vec.to_vec()),
    };
    let logits: Vec<f64> = visual.iter().zip(&bias).map(|(v, b)| v + b).collect();
    let probs = softmax_row(&logits)?;
    Ok(ArmCache {
        proj_x1,
        proj_y1,
        fused1,
        proj_x2,
        proj_y2,
        fused2,
        gate,
        probs,
    })
}

fn fuse_from_proj(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter()
        .zip(b)
        .map(|(ai, bi)| (ai + bi).max(0.0) - (ai - bi) * (ai - bi))
        .collect()
}

/// Backward of a fusion stage given its cached projections.
/// Returns (d_proj_x, d_proj_y).
fn fuse_backward_proj(a: &[f64], b: &[f64], upstream: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let sums: Vec<f64> = a.iter().zip(b).map(|(x, y)| x + y).collect();
    let relu_grad = relu_backward(&relu(&sums), upstream);
    let mut da = Vec::with_capacity(a.len());
    let mut db = Vec::with_capacity(a.len());
    for k in 0..a.len() {
        let diff = a[k] - b[k];
        da.push(relu_grad[k] - 2.0 * diff * upstream[k]);
        db.push(relu_grad[k] + 2.0 * diff * upstream[k]);
    }
    (da, db)
}

/// Vector-Jacobian product of [`rel_scores_cached`] with respect to the
/// logits. Accumulates parameter gradients into `grads` and adds the
/// node-feature gradients onto `dz_i` / `dz_j`. The prior is frozen; the
/// union feature is input data, so neither receives a gradient.
#[allow(clippy::too_many_arguments)]
pub fn rel_scores_backward(
    z_i: &[f64],
    z_j: &[f64],
    u_ij: &[f64],
    prior_vec: &[f64],
    params: &ArmParams,
    cache: &ArmCache,
    d_logits: &[f64],
    grads: &mut ArmGrads,
    dz_i: &mut [f64],
    dz_j: &mut [f64],
) {
    // Classifier branch.
    outer_acc(&mut grads.w_r, d_logits, &cache.fused2);
    let d_fused2 = mat_tvec(&params.w_r, d_logits);

    // Gate branch (absent in raw-prior mode).
    if let Some(gate) = &cache.gate {
        let d_gate: Vec<f64> = d_logits.iter().zip(prior_vec).map(|(g, p)| g * p).collect();
        let d_pre = sigmoid_backward(gate, &d_gate);
        outer_acc(&mut grads.w_p, &d_pre, u_ij);
    }

    // Second fusion stage.
    let (d_proj_x2, d_proj_y2) = fuse_backward_proj(&cache.proj_x2, &cache.proj_y2, &d_fused2);
    outer_acc(&mut grads.w_x2, &d_proj_x2, &cache.fused1);
    outer_acc(&mut grads.w_y2, &d_proj_y2, u_ij);
    let d_fused1 = mat_tvec(&params.w_x2, &d_proj_x2);

    // First fusion stage.
    let (d_proj_x1, d_proj_y1) = fuse_backward_proj(&cache.proj_x1, &cache.proj_y1, &d_fused1);
    outer_acc(&mut grads.w_x1, &d_proj_x1, z_i);
    outer_acc(&mut grads.w_y1, &d_proj_y1, z_j);
    axpy_slice(dz_i, 1.0, &mat_tvec(&params.w_x1, &d_proj_x1));
    axpy_slice(dz_j, 1.0, &mat_tvec(&params.w_y1, &d_proj_y1));
}

/// Cross-entropy gradient w.r.t. the logits: `probs - onehot(label)`.
pub fn rel_ce_dlogits(probs: &[f64], label: usize) -> Vec<f64> {
    let mut d: Vec<f64> = probs.to_vec();
    d[label] -= 1.0;
    d
}

/// Index of the highest-probability predicate; ties break to the lowest
/// index. With `exclude_background` the argmax runs over predicates >= 1.
pub fn predict_relationship(dist: &RelDistribution, exclude_background: bool) -> usize {
    let start = usize::from(exclude_background);
    let mut best = start;
    for (r, p) in dist.probs.iter().enumerate().skip(start) {
        if *p > dist.probs[best] {
            best = r;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn soften_prior_cases() {
        let r = 5;
        let softened = soften_prior(&vec![1.0 / r as f64; r]);
        for v in &softened {
            assert!((v + (r as f64).ln()).abs() < 1e-12);
            assert!(*v < 0.0);
        }
        // Order preservation.
        let p = [0.1, 0.6, 0.3];
        let s = soften_prior(&p);
        assert_eq!(
            (0..3).max_by(|a, b| s[*a].total_cmp(&s[*b])).unwrap(),
            (0..3).max_by(|a, b| p[*a].total_cmp(&p[*b])).unwrap()
        );
        // Gap preservation: log-softmax differences equal input differences.
        let p = [0.5, 0.5, 0.0];
        let s = soften_prior(&p);
        assert!((s[0] - s[2] - 0.5).abs() < 1e-12);
        assert!((s[0] - s[1]).abs() < 1e-15);
    }

    #[test]
    fn bias_gate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w_p = init_mat(&mut rng, 4, 6);
        let zeros = vec![0.0; 6];
        for g in bias_gate(&zeros, &w_p).unwrap() {
            assert_eq!(g, 0.5);
        }
        let u = random_vec(&mut rng, 6);
        for g in bias_gate(&u, &w_p).unwrap() {
            assert!(g > 0.0 && g < 1.0);
        }
        // Length-2 scalar oracle.
        let w = Mat::from_rows(&[vec![1.0, -2.0], vec![0.5, 0.0]]).unwrap();
        let u = [0.3, 0.7];
        let g = bias_gate(&u, &w).unwrap();
        let expect0 = 1.0 / (1.0 + (-(0.3_f64 - 1.4)).exp());
        let expect1 = 1.0 / (1.0 + (-0.15_f64).exp());
        assert!((g[0] - expect0).abs() < 1e-12);
        assert!((g[1] - expect1).abs() < 1e-12);
        assert!(bias_gate(&[1.0], &w).is_err());
    }

    #[test]
    fn fuse_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // Equal projections h: relu(2h) - 0.
        let w = Mat::identity(3);
        let h = [0.5, -1.0, 2.0];
        let out = fuse(&h, &h, &w, &w).unwrap();
        assert_eq!(out, vec![1.0, 0.0, 4.0]);
        // Opposite projections: relu(0) - (2h)^2 = -4h^2.
        let neg: Vec<f64> = h.iter().map(|v| -v).collect();
        let out = fuse(&h, &neg, &w, &w).unwrap();
        assert_eq!(out, vec![-1.0, -4.0, -16.0]);
        // Output length is the projection height regardless of input lengths.
        let w_x = init_mat(&mut rng, 7, 4);
        let w_y = init_mat(&mut rng, 7, 9);
        let out = fuse(&random_vec(&mut rng, 4), &random_vec(&mut rng, 9), &w_x, &w_y).unwrap();
        assert_eq!(out.len(), 7);
    }

    fn small_params(rng: &mut ChaCha8Rng, r: usize, d: usize, d_u: usize, f: usize) -> ArmParams {
        ArmParams::init(r, d, d_u, f, rng)
    }

    #[test]
    fn rel_scores_is_probability_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = small_params(&mut rng, 5, 6, 8, 12);
        let z_i = random_vec(&mut rng, 6);
        let z_j = random_vec(&mut rng, 6);
        let u = random_vec(&mut rng, 8);
        let prior = soften_prior(&[0.4, 0.1, 0.2, 0.2, 0.1]);
        for mode in [BiasMode::SoftenGate, BiasMode::RawPrior] {
            let dist = rel_scores(&z_i, &z_j, &u, &prior, &params, mode).unwrap();
            let sum: f64 = dist.probs().iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            assert!(dist.probs().iter().all(|p| *p >= 0.0));
        }
    }

    /// With the visual branch off (W_r = 0) and u = 0 the gate is 0.5
    /// everywhere, so the scores reduce to softmax(0.5 * softened prior).
    #[test]
    fn visual_branch_off_reduces_to_gated_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = small_params(&mut rng, 4, 6, 8, 12);
        params.w_r = Mat::zeros(4, 12);
        let z_i = random_vec(&mut rng, 6);
        let z_j = random_vec(&mut rng, 6);
        let u = vec![0.0; 8];
        let softened = soften_prior(&[0.5, 0.2, 0.2, 0.1]);
        let dist = rel_scores(&z_i, &z_j, &u, &softened, &params, BiasMode::SoftenGate).unwrap();
        let scaled: Vec<f64> = softened.iter().map(|v| 0.5 * v).collect();
        let want = softmax_row(&scaled).unwrap();
        for (got, expect) in dist.probs().iter().zip(&want) {
            assert!((got - expect).abs() < 1e-12);
        }
    }

    /// Straight-line oracle on a 2-predicate instance.
    #[test]
    fn matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = small_params(&mut rng, 2, 3, 4, 5);
        let z_i = random_vec(&mut rng, 3);
        let z_j = random_vec(&mut rng, 3);
        let u = random_vec(&mut rng, 4);
        let prior = soften_prior(&[0.7, 0.3]);

        let fused1 = {
            let a = mat_vec(&params.w_x1, &z_i);
            let b = mat_vec(&params.w_y1, &z_j);
            let mut out = vec![0.0; 5];
            for k in 0..5 {
                out[k] = (a[k] + b[k]).max(0.0) - (a[k] - b[k]) * (a[k] - b[k]);
            }
            out
        };
        let fused2 = {
            let a = mat_vec(&params.w_x2, &fused1);
            let b = mat_vec(&params.w_y2, &u);
            let mut out = vec![0.0; 5];
            for k in 0..5 {
                out[k] = (a[k] + b[k]).max(0.0) - (a[k] - b[k]) * (a[k] - b[k]);
            }
            out
        };
        let mut logits = mat_vec(&params.w_r, &fused2);
        let gate = sigmoid(&mat_vec(&params.w_p, &u));
        for r in 0..2 {
            logits[r] += gate[r] * prior[r];
        }
        let want = softmax_row(&logits).unwrap();

        let dist = rel_scores(&z_i, &z_j, &u, &prior, &params, BiasMode::SoftenGate).unwrap();
        for (got, expect) in dist.probs().iter().zip(&want) {
            assert!((got - expect).abs() < 1e-12);
        }
    }

    /// Swapping the pair order changes the scores unless the first-stage
    /// projections coincide.
    #[test]
    fn direction_sensitivity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = small_params(&mut rng, 3, 4, 5, 6);
        let z_i = random_vec(&mut rng, 4);
        let z_j = random_vec(&mut rng, 4);
        let u = random_vec(&mut rng, 5);
        let prior = soften_prior(&[0.3, 0.3, 0.4]);
        let fwd = rel_scores(&z_i, &z_j, &u, &prior, &params, BiasMode::SoftenGate).unwrap();
        let bwd = rel_scores(&z_j, &z_i, &u, &prior, &params, BiasMode::SoftenGate).unwrap();
        let diff: f64 = fwd
            .probs()
            .iter()
            .zip(bwd.probs())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-9);

        let mut symmetric = params.clone();
        symmetric.w_y1 = symmetric.w_x1.clone();
        let fwd = rel_scores(&z_i, &z_j, &u, &prior, &symmetric, BiasMode::SoftenGate).unwrap();
        let bwd = rel_scores(&z_j, &z_i, &u, &prior, &symmetric, BiasMode::SoftenGate).unwrap();
        for (a, b) in fwd.probs().iter().zip(bwd.probs()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn predict_relationship_cases() {
        let one_hot = RelDistribution {
            probs: vec![0.0, 0.0, 1.0],
        };
        assert_eq!(predict_relationship(&one_hot, false), 2);
        let uniform = RelDistribution {
            probs: vec![0.25; 4],
        };
        assert_eq!(predict_relationship(&uniform, false), 0);
        assert_eq!(predict_relationship(&uniform, true), 1);
        let mixed = RelDistribution {
            probs: vec![0.1, 0.6, 0.3],
        };
        assert_eq!(predict_relationship(&mixed, false), 1);
        let bg_heavy = RelDistribution {
            probs: vec![0.8, 0.05, 0.15],
        };
        assert_eq!(predict_relationship(&bg_heavy, true), 2);
    }

    /// Full ARM backward against central differences on every weight matrix.
    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (r, d, d_u, f) = (4usize, 5usize, 6usize, 7usize);
        let params = small_params(&mut rng, r, d, d_u, f);
        let z_i = random_vec(&mut rng, d);
        let z_j = random_vec(&mut rng, d);
        let u = random_vec(&mut rng, d_u);
        let prior = soften_prior(&[0.4, 0.3, 0.2, 0.1]);
        let label = 2usize;

        let loss = |p: &ArmParams, zi: &[f64], zj: &[f64]| -> f64 {
            let dist = rel_scores(zi, zj, &u, &prior, p, BiasMode::SoftenGate).unwrap();
            -dist.probs()[label].max(1e-300).ln()
        };

        let cache =
            rel_scores_cached(&z_i, &z_j, &u, &prior, &params, BiasMode::SoftenGate).unwrap();
        let d_logits = rel_ce_dlogits(cache.probs(), label);
        let mut grads = params.zero_grads();
        let mut dz_i = vec![0.0; d];
        let mut dz_j = vec![0.0; d];
        rel_scores_backward(
            &z_i, &z_j, &u, &prior, &params, &cache, &d_logits, &mut grads, &mut dz_i, &mut dz_j,
        );

        let h = 1e-6;
        let mut max_err: f64 = 0.0;
        macro_rules! probe_mat {
            ($field:ident) => {
                let mut p = params.clone();
                for idx in 0..p.$field.len() {
                    let orig = p.$field.data()[idx];
                    p.$field.data_mut()[idx] = orig + h;
                    let plus = loss(&p, &z_i, &z_j);
                    p.$field.data_mut()[idx] = orig - h;
                    let minus = loss(&p, &z_i, &z_j);
                    p.$field.data_mut()[idx] = orig;
                    let numeric = (plus - minus) / (2.0 * h);
                    let analytic = grads.$field.data()[idx];
                    let err =
                        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0);
                    max_err = max_err.max(err);
                }
            };
        }
        probe_mat!(w_p);
        probe_mat!(w_r);
        probe_mat!(w_x1);
        probe_mat!(w_y1);
        probe_mat!(w_x2);
        probe_mat!(w_y2);

        let mut zi = z_i.clone();
        for idx in 0..d {
            let orig = zi[idx];
            zi[idx] = orig + h;
            let plus = loss(&params, &zi, &z_j);
            zi[idx] = orig - h;
            let minus = loss(&params, &zi, &z_j);
            zi[idx] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = (dz_i[idx] - numeric).abs() / dz_i[idx].abs().max(numeric.abs()).max(1.0);
            max_err = max_err.max(err);
        }
        assert!(max_err < 1e-5, "max rel err {max_err}");
    }
}
