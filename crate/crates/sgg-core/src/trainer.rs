//! Joint training of the message-passing, object-classification, and
//! relationship-reasoning weights with SGD plus momentum.
//!
//! Per image: refined features from the direction-aware module feed a linear
//! object classifier trained with the priority-sensitive loss (priorities
//! from ground truth only), and sampled node pairs feed the reasoning module
//! trained with cross-entropy against predicate labels (background = 0,
//! sampled at a capped ratio to the related pairs). Per-image gradients can
//! be computed in parallel; the reduction is an ordered sum, so runs are
//! reproducible for any thread count.

use crate::arm::{
    rel_ce_dlogits, rel_scores_backward, rel_scores_cached, ArmGrads, ArmParams, BiasMode,
    SoftenedPrior,
};
use crate::error::{Error, Result};
use crate::eval::{EvalMode, PredNode, PredTriplet, PredictedGraph};
use crate::graph::{intersection_area, node_priority, BBox, SceneGraph};
use crate::linalg::{axpy_slice, DiffOp, Mat};
use crate::loss::{nps_loss_batch, LossConfig, PROB_FLOOR};
use crate::mp::{
    dmp_backward, dmp_forward, dmp_forward_cached, random_union_features, DmpGrads, DmpParams,
    UnionFeatures,
};
use crate::prior::FrequencyPrior;
use crate::synth::{ImageFeatures, SyntheticCorpus};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;

/// Shape parameters tying the model together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub num_object_classes: usize,
    pub num_predicate_classes: usize,
    pub dim: usize,
    pub union_dim: usize,
    pub fusion_dim: usize,
}

impl ModelDims {
    /// Dimensions mirroring the full-scale 512/2048/1024 layout: the fusion
    /// space is twice the feature dim.
    pub fn new(num_object_classes: usize, num_predicate_classes: usize, dim: usize, union_dim: usize) -> Self {
        ModelDims {
            num_object_classes,
            num_predicate_classes,
            dim,
            union_dim,
            fusion_dim: 2 * dim,
        }
    }
}

/// All learnable weights: message passing, object classifier, reasoning.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub dmp: DmpParams,
    pub obj_cls: Mat,
    pub arm: ArmParams,
}

/// Names of every parameter matrix, in the fixed serialization order.
pub const PARAM_NAMES: [&str; 16] = [
    "dmp.w_s",
    "dmp.w_o",
    "dmp.w_u",
    "dmp.w_e",
    "dmp.w_t3",
    "dmp.w_t2",
    "dmp.w_t1",
    "dmp.ln_gain",
    "dmp.ln_bias",
    "obj_cls",
    "arm.w_p",
    "arm.w_r",
    "arm.w_x1",
    "arm.w_y1",
    "arm.w_x2",
    "arm.w_y2",
];

impl ModelParams {
    pub fn init(dims: &ModelDims, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dmp = DmpParams::init(dims.dim, dims.union_dim, &mut rng)?;
        let obj_cls = crate::mp::init_mat(&mut rng, dims.num_object_classes, dims.dim);
        let arm = ArmParams::init(
            dims.num_predicate_classes,
            dims.dim,
            dims.union_dim,
            dims.fusion_dim,
            &mut rng,
        );
        Ok(ModelParams { dmp, obj_cls, arm })
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            dmp: self.dmp.zero_grads(),
            obj_cls: Mat::zeros(self.obj_cls.rows(), self.obj_cls.cols()),
            arm: self.arm.zero_grads(),
        }
    }

    /// Parameter matrices in [`PARAM_NAMES`] order; vectors as 1×n matrices.
    pub fn to_mats(&self) -> Vec<Mat> {
        vec![
            self.dmp.w_s.clone(),
            self.dmp.w_o.clone(),
            self.dmp.w_u.clone(),
            Mat::row_vector(&self.dmp.w_e),
            self.dmp.w_t3.clone(),
            self.dmp.w_t2.clone(),
            self.dmp.w_t1.clone(),
            Mat::row_vector(&self.dmp.ln_gain),
            Mat::row_vector(&self.dmp.ln_bias),
            self.obj_cls.clone(),
            self.arm.w_p.clone(),
            self.arm.w_r.clone(),
            self.arm.w_x1.clone(),
            self.arm.w_y1.clone(),
            self.arm.w_x2.clone(),
            self.arm.w_y2.clone(),
        ]
    }

    pub fn from_mats(dims: &ModelDims, mats: &[Mat]) -> Result<Self> {
        if mats.len() != PARAM_NAMES.len() {
            return Err(Error::Data(format!(
                "expected {} parameter matrices, got {}",
                PARAM_NAMES.len(),
                mats.len()
            )));
        }
        let template = ModelParams::init(dims, 0)?;
        let expect = template.to_mats();
        for (idx, (mat, want)) in mats.iter().zip(&expect).enumerate() {
            if mat.shape() != want.shape() {
                return Err(Error::Dim {
                    op: "ModelParams::from_mats",
                    detail: format!(
                        "{} has shape {}x{}, expected {}x{}",
                        PARAM_NAMES[idx],
                        mat.rows(),
                        mat.cols(),
                        want.rows(),
                        want.cols()
                    ),
                });
            }
        }
        let dmp = DmpParams {
            w_s: mats[0].clone(),
            w_o: mats[1].clone(),
            w_u: mats[2].clone(),
            w_e: mats[3].data().to_vec(),
            w_t3: mats[4].clone(),
            w_t2: mats[5].clone(),
            w_t1: mats[6].clone(),
            ln_gain: mats[7].data().to_vec(),
            ln_bias: mats[8].data().to_vec(),
            ln_eps: template.dmp.ln_eps,
        };
        let arm = ArmParams {
            w_p: mats[10].clone(),
            w_r: mats[11].clone(),
            w_x1: mats[12].clone(),
            w_y1: mats[13].clone(),
            w_x2: mats[14].clone(),
            w_y2: mats[15].clone(),
        };
        Ok(ModelParams {
            dmp,
            obj_cls: mats[9].clone(),
            arm,
        })
    }
}

/// Gradients (also the optimizer's velocity buffers) for every parameter.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub dmp: DmpGrads,
    pub obj_cls: Mat,
    pub arm: ArmGrads,
}

impl ModelGrads {
    pub fn accumulate(&mut self, other: &ModelGrads) {
        self.dmp.accumulate(&other.dmp);
        self.obj_cls.axpy(1.0, &other.obj_cls).unwrap();
        self.arm.accumulate(&other.arm);
    }

    pub fn scale(&mut self, s: f64) {
        for m in self.mats_mut() {
            for v in m {
                *v *= s;
            }
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.mats()
            .into_iter()
            .map(|m| m.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    fn mats(&self) -> Vec<&[f64]> {
        vec![
            self.dmp.w_s.data(),
            self.dmp.w_o.data(),
            self.dmp.w_u.data(),
            &self.dmp.w_e,
            self.dmp.w_t3.data(),
            self.dmp.w_t2.data(),
            self.dmp.w_t1.data(),
            &self.dmp.ln_gain,
            &self.dmp.ln_bias,
            self.obj_cls.data(),
            self.arm.w_p.data(),
            self.arm.w_r.data(),
            self.arm.w_x1.data(),
            self.arm.w_y1.data(),
            self.arm.w_x2.data(),
            self.arm.w_y2.data(),
        ]
    }

    fn mats_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.dmp.w_s.data_mut(),
            self.dmp.w_o.data_mut(),
            self.dmp.w_u.data_mut(),
            &mut self.dmp.w_e,
            self.dmp.w_t3.data_mut(),
            self.dmp.w_t2.data_mut(),
            self.dmp.w_t1.data_mut(),
            &mut self.dmp.ln_gain,
            &mut self.dmp.ln_bias,
            self.obj_cls.data_mut(),
            self.arm.w_p.data_mut(),
            self.arm.w_r.data_mut(),
            self.arm.w_x1.data_mut(),
            self.arm.w_y1.data_mut(),
            self.arm.w_x2.data_mut(),
            self.arm.w_y2.data_mut(),
        ]
    }

    /// Grad matrices in [`PARAM_NAMES`] order, for reporting.
    pub fn to_mats(&self) -> Vec<Mat> {
        vec![
            self.dmp.w_s.clone(),
            self.dmp.w_o.clone(),
            self.dmp.w_u.clone(),
            Mat::row_vector(&self.dmp.w_e),
            self.dmp.w_t3.clone(),
            self.dmp.w_t2.clone(),
            self.dmp.w_t1.clone(),
            Mat::row_vector(&self.dmp.ln_gain),
            Mat::row_vector(&self.dmp.ln_bias),
            self.obj_cls.clone(),
            self.arm.w_p.clone(),
            self.arm.w_r.clone(),
            self.arm.w_x1.clone(),
            self.arm.w_y1.clone(),
            self.arm.w_x2.clone(),
            self.arm.w_y2.clone(),
        ]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Background-to-foreground pair sampling ratio.
    pub bg_fg_ratio: f64,
    /// Controlling factor of the priority-sensitive loss.
    pub mu: f64,
    /// Global gradient-norm clip; guards the capped-gamma regime.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            momentum: 0.9,
            batch_size: 6,
            epochs: 50,
            bg_fg_ratio: 3.0,
            mu: 4.0,
            clip_norm: 10.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            mu: self.mu,
            ..LossConfig::default()
        }
    }
}

/// One relationship training sample: an ordered pair with its predicate
/// label (background = 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairSample {
    pub subject: usize,
    pub object: usize,
    pub label: usize,
}

/// All related ordered pairs, plus background pairs sampled without
/// replacement up to `ratio` times the number of related pairs.
pub fn sample_pairs(graph: &SceneGraph, ratio: f64, rng: &mut impl Rng) -> Vec<PairSample> {
    let mut samples: Vec<PairSample> = graph
        .triplets
        .iter()
        .map(|t| PairSample {
            subject: t.subject,
            object: t.object,
            label: t.predicate,
        })
        .collect();
    let related: HashSet<(usize, usize)> = graph
        .triplets
        .iter()
        .map(|t| (t.subject, t.object))
        .collect();
    let n = graph.nodes.len();
    let mut background: Vec<(usize, usize)> = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j && !related.contains(&(i, j)) {
                background.push((i, j));
            }
        }
    }
    let cap = ((ratio * samples.len() as f64).floor() as usize).min(background.len());
    for idx in rand::seq::index::sample(rng, background.len(), cap) {
        let (subject, object) = background[idx];
        samples.push(PairSample {
            subject,
            object,
            label: 0,
        });
    }
    samples
}

/// Ordered pairs whose boxes overlap (positive intersection area); the
/// candidate filter for the detection protocol.
pub fn overlap_filter(boxes: &[BBox]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..boxes.len() {
        for j in 0..boxes.len() {
            if i != j && intersection_area(&boxes[i], &boxes[j]) > 0.0 {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Outputs of one image's forward pass.
pub struct ForwardImage {
    pub z: Mat,
    pub obj_logits: Mat,
    /// Predicate distributions aligned with the input pair list.
    pub rel_probs: Vec<Vec<f64>>,
}

/// Forward pass over one image: refined features, object logits, and
/// relationship distributions for the given ordered pairs.
pub fn forward_image(
    model: &ModelParams,
    x: &Mat,
    u: &UnionFeatures,
    pairs: &[(usize, usize)],
    node_classes: &[usize],
    prior: &SoftenedPrior,
) -> Result<ForwardImage> {
    let (z, _) = dmp_forward(x, u, &model.dmp)?;
    let obj_logits = z.matmul(&model.obj_cls.transpose())?;
    let mut rel_probs = Vec::with_capacity(pairs.len());
    for &(i, j) in pairs {
        let prior_vec = prior.get(node_classes[i], node_classes[j])?;
        let cache = rel_scores_cached(
            z.row(i),
            z.row(j),
            u.get(i, j)?,
            prior_vec,
            &model.arm,
            prior.mode(),
        )?;
        rel_probs.push(cache.probs().to_vec());
    }
    Ok(ForwardImage {
        z,
        obj_logits,
        rel_probs,
    })
}

/// Loss and gradients for one image. Object loss is the mean priority-
/// sensitive loss over nodes; relationship loss is the mean cross-entropy
/// over the sampled pairs.
pub fn image_loss_and_grads(
    model: &ModelParams,
    x: &Mat,
    u: &UnionFeatures,
    graph: &SceneGraph,
    pairs: &[PairSample],
    prior: &SoftenedPrior,
    loss_cfg: &LossConfig,
) -> Result<(f64, f64, ModelGrads)> {
    let mut grads = model.zero_grads();
    let (z, dmp_cache) = dmp_forward_cached(x, u, &model.dmp)?;
    let obj_logits = z.matmul(&model.obj_cls.transpose())?;

    let priorities = node_priority(graph)?;
    let targets: Vec<usize> = graph.nodes.iter().map(|n| n.class_id).collect();
    let (obj_loss, d_obj_logits) =
        nps_loss_batch(&obj_logits, &targets, &priorities.theta, loss_cfg)?;

    // Classifier backward: dW_c = dlogitsᵀ z, dz = dlogits W_c.
    let mut dz = d_obj_logits.matmul(&model.obj_cls)?;
    grads
        .obj_cls
        .axpy(1.0, &d_obj_logits.transpose().matmul(&z)?)?;

    let mut rel_loss = 0.0;
    if !pairs.is_empty() {
        let inv = 1.0 / pairs.len() as f64;
        let dim = x.cols();
        for pair in pairs {
            let (i, j) = (pair.subject, pair.object);
            let prior_vec = prior.get(targets[i], targets[j])?;
            let u_ij = u.get(i, j)?;
            let cache =
                rel_scores_cached(z.row(i), z.row(j), u_ij, prior_vec, &model.arm, prior.mode())?;
            rel_loss -= cache.probs()[pair.label].max(PROB_FLOOR).ln();
            let mut d_logits = rel_ce_dlogits(cache.probs(), pair.label);
            for g in &mut d_logits {
                *g *= inv;
            }
            let mut dz_i = vec![0.0; dim];
            let mut dz_j = vec![0.0; dim];
            rel_scores_backward(
                z.row(i),
                z.row(j),
                u_ij,
                prior_vec,
                &model.arm,
                &cache,
                &d_logits,
                &mut grads.arm,
                &mut dz_i,
                &mut dz_j,
            );
            axpy_slice(dz.row_mut(i), 1.0, &dz_i);
            axpy_slice(dz.row_mut(j), 1.0, &dz_j);
        }
        rel_loss *= inv;
    }

    let (dmp_grads, _dx) = dmp_backward(x, u, &model.dmp, &dmp_cache, &dz)?;
    grads.dmp.accumulate(&dmp_grads);
    Ok((obj_loss, rel_loss, grads))
}

/// One epoch's mean losses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub obj_loss: f64,
    pub rel_loss: f64,
    pub total: f64,
}

pub fn write_loss_csv(stats: &[EpochStats], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "epoch,obj_loss,rel_loss,total").map_err(|e| Error::io(path, e))?;
    for s in stats {
        writeln!(w, "{},{},{},{}", s.epoch, s.obj_loss, s.rel_loss, s.total)
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Graphs and precomputed features, the unit the trainer and evaluator
/// consume. Built from a generated corpus or loaded from the corpus and
/// features files.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub graphs: Vec<SceneGraph>,
    pub features: Vec<ImageFeatures>,
}

impl Dataset {
    pub fn from_corpus(corpus: &SyntheticCorpus) -> Self {
        Dataset {
            graphs: corpus.graphs.clone(),
            features: corpus.features.clone(),
        }
    }

    pub fn new(graphs: Vec<SceneGraph>, features: Vec<ImageFeatures>) -> Result<Self> {
        if graphs.len() != features.len() {
            return Err(Error::Data(format!(
                "{} graphs but {} feature records",
                graphs.len(),
                features.len()
            )));
        }
        for (g, f) in graphs.iter().zip(&features) {
            if g.nodes.len() != f.x.rows() {
                return Err(Error::Data(format!(
                    "image {}: {} nodes but {} feature rows",
                    g.image_id,
                    g.nodes.len(),
                    f.x.rows()
                )));
            }
        }
        Ok(Dataset { graphs, features })
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }
}

fn sgd_step(param: &mut [f64], velocity: &mut [f64], grad: &[f64], lr: f64, momentum: f64) {
    for ((p, v), g) in param.iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = momentum * *v - lr * g;
        *p += *v;
    }
}

fn apply_update(model: &mut ModelParams, velocity: &mut ModelGrads, grads: &ModelGrads, lr: f64, momentum: f64) {
    let g = grads.mats();
    let mut params: Vec<&mut [f64]> = vec![
        model.dmp.w_s.data_mut(),
        model.dmp.w_o.data_mut(),
        model.dmp.w_u.data_mut(),
        &mut model.dmp.w_e,
        model.dmp.w_t3.data_mut(),
        model.dmp.w_t2.data_mut(),
        model.dmp.w_t1.data_mut(),
        &mut model.dmp.ln_gain,
        &mut model.dmp.ln_bias,
        model.obj_cls.data_mut(),
        model.arm.w_p.data_mut(),
        model.arm.w_r.data_mut(),
        model.arm.w_x1.data_mut(),
        model.arm.w_y1.data_mut(),
        model.arm.w_x2.data_mut(),
        model.arm.w_y2.data_mut(),
    ];
    let mut vels = velocity.mats_mut();
    for ((p, v), g) in params.iter_mut().zip(vels.iter_mut()).zip(&g) {
        sgd_step(p, v, g, lr, momentum);
    }
}

/// Per-image RNG stream, independent of batch layout and thread count.
fn pair_rng(seed: u64, epoch: usize, image_idx: usize) -> ChaCha8Rng {
    let mixed = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((epoch as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add((image_idx as u64).wrapping_mul(0x94D0_49BB_1331_11EB));
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Trains the model on `data` with SGD plus momentum. Velocity update
/// `v <- m·v - lr·g`, parameter update `p <- p + v`, gradients averaged per
/// batch and clipped at `clip_norm` (global norm). Deterministic for a given
/// config; aborts with the epoch index if the loss turns non-finite.
pub fn train(
    data: &Dataset,
    model: ModelParams,
    prior: &SoftenedPrior,
    cfg: &TrainConfig,
) -> Result<(ModelParams, Vec<EpochStats>)> {
    let mut model = model;
    let mut velocity = model.zero_grads();
    let loss_cfg = cfg.loss_config();
    let mut stats = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut obj_sum = 0.0;
        let mut rel_sum = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            // Pair sampling is sequential and per-image seeded; the heavy
            // forward/backward runs in parallel and reduces in order.
            let tasks: Vec<(usize, Vec<PairSample>)> = batch
                .iter()
                .map(|&idx| {
                    let mut rng = pair_rng(cfg.seed, epoch, idx);
                    (idx, sample_pairs(&data.graphs[idx], cfg.bg_fg_ratio, &mut rng))
                })
                .collect();
            let results = crate::par::map_items(&tasks, |(idx, pairs)| {
                image_loss_and_grads(
                    &model,
                    &data.features[*idx].x,
                    &data.features[*idx].u,
                    &data.graphs[*idx],
                    pairs,
                    prior,
                    &loss_cfg,
                )
            });
            let mut batch_grads = model.zero_grads();
            for result in results {
                let (obj, rel, grads) = result?;
                obj_sum += obj;
                rel_sum += rel;
                batch_grads.accumulate(&grads);
            }
            batch_grads.scale(1.0 / batch.len() as f64);
            let norm = batch_grads.norm_sq().sqrt();
            if !norm.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            if norm > cfg.clip_norm {
                batch_grads.scale(cfg.clip_norm / norm);
            }
            apply_update(&mut model, &mut velocity, &batch_grads, cfg.lr, cfg.momentum);
        }
        let n = data.len() as f64;
        let epoch_stats = EpochStats {
            epoch,
            obj_loss: obj_sum / n,
            rel_loss: rel_sum / n,
            total: (obj_sum + rel_sum) / n,
        };
        if !epoch_stats.total.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        stats.push(epoch_stats);
    }
    Ok((model, stats))
}

/// Inference over one image: node labels and scores per the protocol, then
/// a full predicate distribution for every candidate ordered pair, emitted
/// as ranked triplets (background predicate excluded from prediction).
pub fn predict_graph(
    model: &ModelParams,
    graph: &SceneGraph,
    feats: &ImageFeatures,
    prior: &SoftenedPrior,
    mode: EvalMode,
) -> Result<PredictedGraph> {
    let (z, _) = dmp_forward(&feats.x, &feats.u, &model.dmp)?;
    let obj_logits = z.matmul(&model.obj_cls.transpose())?;
    let n = graph.nodes.len();

    let mut nodes = Vec::with_capacity(n);
    for (i, gt_node) in graph.nodes.iter().enumerate() {
        let (class_id, score) = match mode {
            EvalMode::Predcls => (gt_node.class_id, 1.0),
            EvalMode::Sgcls | EvalMode::Sgdet => {
                let probs = crate::linalg::softmax_row(obj_logits.row(i))?;
                // Background is not a valid object prediction.
                let mut best = 1;
                for (c, p) in probs.iter().enumerate().skip(1) {
                    if *p > probs[best] {
                        best = c;
                    }
                }
                (best, probs[best])
            }
        };
        nodes.push(PredNode {
            class_id,
            bbox: gt_node.bbox,
            score,
        });
    }

    let pairs: Vec<(usize, usize)> = match mode {
        EvalMode::Sgdet => {
            let boxes: Vec<BBox> = graph.nodes.iter().map(|n| n.bbox).collect();
            overlap_filter(&boxes)
        }
        _ => {
            let mut all = Vec::with_capacity(n * (n.saturating_sub(1)));
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        all.push((i, j));
                    }
                }
            }
            all
        }
    };

    let mut triplets = Vec::new();
    for &(i, j) in &pairs {
        let prior_vec = prior.get(nodes[i].class_id, nodes[j].class_id)?;
        let cache = rel_scores_cached(
            z.row(i),
            z.row(j),
            feats.u.get(i, j)?,
            prior_vec,
            &model.arm,
            prior.mode(),
        )?;
        for (r, p) in cache.probs().iter().enumerate().skip(1) {
            triplets.push(PredTriplet {
                subject: i,
                predicate: r,
                object: j,
                confidence: nodes[i].score * p * nodes[j].score,
            });
        }
    }
    let mut pred = PredictedGraph {
        image_id: graph.image_id.clone(),
        nodes,
        triplets,
    };
    pred.sort_triplets();
    Ok(pred)
}

/// Inference over a dataset, parallel across images.
pub fn predict_corpus(
    model: &ModelParams,
    data: &Dataset,
    prior: &SoftenedPrior,
    mode: EvalMode,
) -> Result<Vec<PredictedGraph>> {
    let indices: Vec<usize> = (0..data.len()).collect();
    crate::par::map_items(&indices, |&i| {
        predict_graph(model, &data.graphs[i], &data.features[i], prior, mode)
    })
    .into_iter()
    .collect()
}

// -- weights file -----------------------------------------------------------

/// On-disk model: every parameter matrix by name, plus the dims needed to
/// rebuild and an echo of the run configuration.
#[derive(Serialize, Deserialize)]
pub struct WeightsFile {
    pub seed: u64,
    pub dims: ModelDims,
    pub config: serde_json::Value,
    pub params: BTreeMap<String, Mat>,
}

pub fn save_weights(
    model: &ModelParams,
    dims: &ModelDims,
    seed: u64,
    config_echo: serde_json::Value,
    path: &Path,
) -> Result<()> {
    let params: BTreeMap<String, Mat> = PARAM_NAMES
        .iter()
        .map(|n| n.to_string())
        .zip(model.to_mats())
        .collect();
    let file = WeightsFile {
        seed,
        dims: *dims,
        config: config_echo,
        params,
    };
    let out = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer(std::io::BufWriter::new(out), &file).map_err(|e| Error::json(path, e))
}

pub fn load_weights(path: &Path) -> Result<(ModelParams, WeightsFile)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let weights: WeightsFile =
        serde_json::from_reader(std::io::BufReader::new(file)).map_err(|e| Error::json(path, e))?;
    let mut mats = Vec::with_capacity(PARAM_NAMES.len());
    for name in PARAM_NAMES {
        let mat = weights
            .params
            .get(name)
            .ok_or_else(|| Error::Data(format!("weights file missing parameter {name}")))?;
        mats.push(mat.clone());
    }
    let model = ModelParams::from_mats(&weights.dims, &mats)?;
    Ok((model, weights))
}

// -- composite gradient check ------------------------------------------------

/// A frozen one-image training instance: the total loss becomes a function
/// of the 16 parameter matrices alone, which makes the whole pipeline a
/// checkable differentiable op.
pub struct PipelineFixture {
    pub dims: ModelDims,
    pub x: Mat,
    pub u: UnionFeatures,
    pub graph: SceneGraph,
    pub pairs: Vec<PairSample>,
    pub prior: SoftenedPrior,
    pub loss_cfg: LossConfig,
}

impl PipelineFixture {
    /// A random n-node instance with a consistent graph, sampled pairs, and
    /// a prior built from the instance itself.
    pub fn random(dims: &ModelDims, n_nodes: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0xF1D0));
        let x = {
            let data = (0..n_nodes * dims.dim)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            Mat::from_vec(n_nodes, dims.dim, data)?
        };
        let u = random_union_features(n_nodes, dims.union_dim, &mut rng);
        let mut nodes = Vec::with_capacity(n_nodes);
        for i in 0..n_nodes {
            let class = rng.random_range(1..dims.num_object_classes);
            let off = i as f64 * 0.1;
            nodes.push(crate::graph::Node::new(
                class,
                BBox::new(off, 0.0, off + 1.0, 1.0)?,
            ));
        }
        let mut triplets = Vec::new();
        for i in 0..n_nodes {
            for j in 0..n_nodes {
                if i != j && rng.random_range(0.0..1.0) < 0.4 {
                    triplets.push(crate::graph::Triplet {
                        subject: i,
                        predicate: rng.random_range(1..dims.num_predicate_classes),
                        object: j,
                    });
                }
            }
        }
        if triplets.is_empty() {
            triplets.push(crate::graph::Triplet {
                subject: 0,
                predicate: 1,
                object: n_nodes - 1,
            });
        }
        let graph = SceneGraph {
            image_id: format!("fixture{seed}"),
            nodes,
            triplets,
        };
        let pairs = sample_pairs(&graph, 1.0, &mut rng);
        let freq = FrequencyPrior::build(
            std::slice::from_ref(&graph),
            dims.num_object_classes,
            dims.num_predicate_classes,
        )?;
        Ok(PipelineFixture {
            dims: *dims,
            x,
            u,
            graph,
            pairs,
            prior: SoftenedPrior::new(&freq, BiasMode::SoftenGate),
            loss_cfg: LossConfig::default(),
        })
    }

    fn total_loss_and_grads(&self, model: &ModelParams) -> Result<(f64, ModelGrads)> {
        let (obj, rel, grads) = image_loss_and_grads(
            model,
            &self.x,
            &self.u,
            &self.graph,
            &self.pairs,
            &self.prior,
            &self.loss_cfg,
        )?;
        Ok((obj + rel, grads))
    }
}

/// The fixture viewed as a differentiable op whose inputs are the model's
/// parameter matrices in [`PARAM_NAMES`] order.
pub struct PipelineLossOp<'a> {
    pub fixture: &'a PipelineFixture,
}

impl DiffOp for PipelineLossOp<'_> {
    fn name(&self) -> String {
        "pipeline_total_loss".into()
    }

    fn forward(&self, inputs: &[Mat]) -> Result<Mat> {
        let model = ModelParams::from_mats(&self.fixture.dims, inputs)?;
        let (total, _) = self.fixture.total_loss_and_grads(&model)?;
        Mat::from_vec(1, 1, vec![total])
    }

    fn backward(&self, inputs: &[Mat], upstream: &Mat) -> Result<Vec<Mat>> {
        let model = ModelParams::from_mats(&self.fixture.dims, inputs)?;
        let (_, grads) = self.fixture.total_loss_and_grads(&model)?;
        let scale = upstream.data()[0];
        Ok(grads.to_mats().into_iter().map(|m| m.scale(scale)).collect())
    }

    fn input_names(&self, _inputs: &[Mat]) -> Vec<String> {
        PARAM_NAMES.iter().map(|s| s.to_string()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Node, Triplet};
    use crate::linalg::finite_diff_check;
    use crate::synth::{gen_corpus, GenConfig};

    fn tiny_graph() -> SceneGraph {
        let nodes = (0..4)
            .map(|i| {
                Node::new(
                    1 + i % 2,
                    BBox::new(i as f64, 0.0, i as f64 + 1.0, 1.0).unwrap(),
                )
            })
            .collect();
        SceneGraph {
            image_id: "t".into(),
            nodes,
            triplets: vec![
                Triplet { subject: 0, predicate: 1, object: 1 },
                Triplet { subject: 2, predicate: 2, object: 3 },
            ],
        }
    }

    #[test]
    fn sample_pairs_respects_ratio() {
        let g = tiny_graph();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let samples = sample_pairs(&g, 3.0, &mut rng);
        let positives = samples.iter().filter(|s| s.label != 0).count();
        let background = samples.iter().filter(|s| s.label == 0).count();
        assert_eq!(positives, 2);
        assert!(background <= 6);
        // all positives present
        assert!(samples.contains(&PairSample { subject: 0, object: 1, label: 1 }));
        assert!(samples.contains(&PairSample { subject: 2, object: 3, label: 2 }));

        let only_pos = sample_pairs(&g, 0.0, &mut rng);
        assert_eq!(only_pos.len(), 2);
    }

    #[test]
    fn sample_pairs_exhausts_background() {
        // Every ordered pair related: nothing left to sample.
        let nodes = vec![
            Node::new(1, BBox::new(0.0, 0.0, 1.0, 1.0).unwrap()),
            Node::new(2, BBox::new(1.0, 0.0, 2.0, 1.0).unwrap()),
        ];
        let g = SceneGraph {
            image_id: "full".into(),
            nodes,
            triplets: vec![
                Triplet { subject: 0, predicate: 1, object: 1 },
                Triplet { subject: 1, predicate: 1, object: 0 },
            ],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let samples = sample_pairs(&g, 3.0, &mut rng);
        assert_eq!(samples.len(), 2);
    }

    #[test]
    fn overlap_filter_cases() {
        let disjoint = vec![
            BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
            BBox::new(2.0, 2.0, 3.0, 3.0).unwrap(),
        ];
        assert!(overlap_filter(&disjoint).is_empty());

        let nested = vec![
            BBox::new(0.0, 0.0, 4.0, 4.0).unwrap(),
            BBox::new(1.0, 1.0, 2.0, 2.0).unwrap(),
        ];
        assert_eq!(overlap_filter(&nested), vec![(0, 1), (1, 0)]);

        // Three boxes, one overlapping pair -> two ordered pairs.
        let mixed = vec![
            BBox::new(0.0, 0.0, 1.0, 1.0).unwrap(),
            BBox::new(0.5, 0.0, 1.5, 1.0).unwrap(),
            BBox::new(9.0, 9.0, 10.0, 10.0).unwrap(),
        ];
        assert_eq!(overlap_filter(&mixed).len(), 2);
    }

    fn small_setup(seed: u64) -> (Dataset, ModelParams, SoftenedPrior, ModelDims) {
        let gen = GenConfig {
            n_images: 12,
            dim: 8,
            union_dim: 16,
            num_object_classes: 4,
            num_predicate_classes: 4,
            nodes_min: 3,
            nodes_max: 4,
            seed,
            ..GenConfig::default()
        };
        let corpus = gen_corpus(&gen).unwrap();
        let dims = ModelDims::new(4, 4, 8, 16);
        let model = ModelParams::init(&dims, 7).unwrap();
        let freq = FrequencyPrior::build(&corpus.graphs, 4, 4).unwrap();
        let prior = SoftenedPrior::new(&freq, BiasMode::SoftenGate);
        (Dataset::from_corpus(&corpus), model, prior, dims)
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let (data, model, prior, _) = small_setup(1);
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 2,
            ..TrainConfig::default()
        };
        let before = model.to_mats();
        let (trained, stats) = train(&data, model, &prior, &cfg).unwrap();
        assert_eq!(stats.len(), 2);
        for (a, b) in trained.to_mats().iter().zip(&before) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn same_seed_reproduces_loss_curve() {
        let (data, model, prior, _) = small_setup(2);
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let (_, stats_a) = train(&data, model.clone(), &prior, &cfg).unwrap();
        let (_, stats_b) = train(&data, model, &prior, &cfg).unwrap();
        for (a, b) in stats_a.iter().zip(&stats_b) {
            assert_eq!(a.total, b.total);
            assert_eq!(a.obj_loss, b.obj_loss);
        }
    }

    #[test]
    fn training_reduces_loss_on_planted_corpus() {
        let (data, model, prior, _) = small_setup(3);
        let cfg = TrainConfig {
            epochs: 8,
            lr: 0.01,
            ..TrainConfig::default()
        };
        let (_, stats) = train(&data, model, &prior, &cfg).unwrap();
        assert!(
            stats.last().unwrap().total < stats.first().unwrap().total,
            "{:?}",
            stats
        );
    }

    #[test]
    fn momentum_zero_equals_plain_gradient_descent() {
        let (data, model, prior, _) = small_setup(4);
        let cfg = TrainConfig {
            momentum: 0.0,
            epochs: 1,
            batch_size: data.len(),
            ..TrainConfig::default()
        };
        let (trained, _) = train(&data, model.clone(), &prior, &cfg).unwrap();

        // Manual single full-batch step without momentum machinery.
        let loss_cfg = cfg.loss_config();
        let mut grads = model.zero_grads();
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        order.shuffle(&mut rng);
        for &idx in &order {
            let mut prng = pair_rng(cfg.seed, 0, idx);
            let pairs = sample_pairs(&data.graphs[idx], cfg.bg_fg_ratio, &mut prng);
            let (_, _, g) = image_loss_and_grads(
                &model,
                &data.features[idx].x,
                &data.features[idx].u,
                &data.graphs[idx],
                &pairs,
                &prior,
                &loss_cfg,
            )
            .unwrap();
            grads.accumulate(&g);
        }
        grads.scale(1.0 / data.len() as f64);
        let norm = grads.norm_sq().sqrt();
        if norm > cfg.clip_norm {
            grads.scale(cfg.clip_norm / norm);
        }
        let mut manual = model.clone();
        let mut velocity = model.zero_grads();
        apply_update(&mut manual, &mut velocity, &grads, cfg.lr, 0.0);
        for (a, b) in trained.to_mats().iter().zip(manual.to_mats()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn forward_image_single_node_passthrough() {
        let dims = ModelDims::new(4, 4, 8, 16);
        let model = ModelParams::init(&dims, 0).unwrap();
        let x = Mat::from_vec(1, 8, vec![0.3; 8]).unwrap();
        let u = UnionFeatures::new(1, 16);
        let freq = FrequencyPrior::build(&[], 4, 4).unwrap();
        let prior = SoftenedPrior::new(&freq, BiasMode::SoftenGate);
        let out = forward_image(&model, &x, &u, &[], &[1], &prior).unwrap();
        assert_eq!(out.z, x);
        assert_eq!(out.obj_logits.shape(), (1, 4));
        assert!(out.rel_probs.is_empty());
    }

    /// The joint gradient of the full pipeline against finite differences,
    /// every parameter matrix, on a small fixture.
    #[test]
    fn pipeline_gradient_matches_finite_differences() {
        let dims = ModelDims::new(4, 4, 8, 16);
        let fixture = PipelineFixture::random(&dims, 3, 5).unwrap();
        let model = ModelParams::init(&dims, 11).unwrap();
        let op = PipelineLossOp { fixture: &fixture };
        let report = finite_diff_check(&op, &model.to_mats(), 1e-5).unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn weights_round_trip() {
        let dims = ModelDims::new(4, 4, 8, 16);
        let model = ModelParams::init(&dims, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.json");
        save_weights(&model, &dims, 42, serde_json::json!({"note": "test"}), &path).unwrap();
        let (loaded, file) = load_weights(&path).unwrap();
        assert_eq!(file.seed, 42);
        assert_eq!(file.dims, dims);
        for (a, b) in loaded.to_mats().iter().zip(model.to_mats()) {
            assert_eq!(a, &b);
        }
    }

    #[test]
    fn loss_csv_rows_match_epochs() {
        let stats = vec![
            EpochStats { epoch: 0, obj_loss: 1.0, rel_loss: 2.0, total: 3.0 },
            EpochStats { epoch: 1, obj_loss: 0.5, rel_loss: 1.0, total: 1.5 },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        write_loss_csv(&stats, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "epoch,obj_loss,rel_loss,total");
        assert!(lines[2].starts_with("1,0.5,1,1.5"));
    }

    #[test]
    fn predict_graph_modes() {
        let (data, model, prior, _) = small_setup(6);
        let pred = predict_graph(&model, &data.graphs[0], &data.features[0], &prior, EvalMode::Predcls).unwrap();
        // Ground-truth labels and unit scores in predcls.
        for (p, g) in pred.nodes.iter().zip(&data.graphs[0].nodes) {
            assert_eq!(p.class_id, g.class_id);
            assert_eq!(p.score, 1.0);
        }
        // No background predictions; confidences sorted descending.
        assert!(pred.triplets.iter().all(|t| t.predicate != 0));
        for w in pred.triplets.windows(2) {
            assert!(w[0].confidence >= w[1].confidence);
        }

        let pred = predict_graph(&model, &data.graphs[0], &data.features[0], &prior, EvalMode::Sgcls).unwrap();
        for p in &pred.nodes {
            assert!(p.class_id >= 1 && p.score > 0.0 && p.score <= 1.0);
        }
    }
}
