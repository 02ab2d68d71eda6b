//! Deterministic synthetic corpora with planted, learnable structure.
//!
//! Every ground-truth predicate is the value of a fixed rule table at the
//! latent attributes of its pair: the two object classes and a symmetric
//! spatial code (4 orientation bins × 2 distance bins of the center offset).
//! Rule cells are allocated to predicates in proportion to a Zipf-like
//! weight `r^-tail_exponent`, so the predicate marginal follows a
//! controllable long tail; exponent 0 gives a near-uniform distribution.
//!
//! Node features are class embeddings (orthonormal rows, scaled) plus
//! Gaussian noise; union features embed the sum of the two class embeddings
//! and a one-hot of the spatial code, so both the tri-linear coefficients
//! and the prior gate have recoverable signal. The reverse of every related
//! pair stays unrelated, which makes edge direction part of what a model
//! must learn.

use crate::error::{Error, Result};
use crate::graph::{BBox, Node, SceneGraph, Triplet};
use crate::linalg::Mat;
use crate::mp::UnionFeatures;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Scale of the class-embedding rows.
const EMBED_SCALE: f64 = 6.0;
/// Scale of the one-hot spatial-code block inside union features.
const CODE_SCALE: f64 = 10.0;
/// Distance splitting the two radial bins of the spatial code; roughly the
/// median center distance for boxes drawn in the unit image.
const DIST_SPLIT: f64 = 0.36;
/// Fraction of (class pair, spatial code) cells marked as related.
const REL_DENSITY: f64 = 0.5;
/// Bound on per-image rejection sampling while looking for at least one
/// related pair.
const MAX_IMAGE_ATTEMPTS: usize = 1000;
/// Number of spatial-code bins.
pub const NUM_SPATIAL_CODES: usize = 8;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenConfig {
    pub num_object_classes: usize,
    pub num_predicate_classes: usize,
    pub dim: usize,
    pub union_dim: usize,
    pub n_images: usize,
    pub nodes_min: usize,
    pub nodes_max: usize,
    pub noise_sigma: f64,
    pub tail_exponent: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            num_object_classes: 6,
            num_predicate_classes: 5,
            dim: 16,
            union_dim: 64,
            n_images: 300,
            nodes_min: 3,
            nodes_max: 5,
            noise_sigma: 0.0,
            tail_exponent: 0.0,
            seed: 1,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_object_classes < 2 || self.num_predicate_classes < 2 {
            return Err(Error::Config(format!(
                "need at least 2 object and 2 predicate classes (background included), got {} and {}",
                self.num_object_classes, self.num_predicate_classes
            )));
        }
        if self.nodes_min < 2 || self.nodes_max < self.nodes_min {
            return Err(Error::Config(format!(
                "nodes_per_image range [{}, {}] must start at 2 and be non-empty",
                self.nodes_min, self.nodes_max
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config(format!(
                "noise_sigma must be non-negative, got {}",
                self.noise_sigma
            )));
        }
        if self.dim < self.num_object_classes {
            return Err(Error::Config(format!(
                "feature dim {} too small to embed {} classes orthogonally",
                self.dim, self.num_object_classes
            )));
        }
        if self.union_dim < self.dim + NUM_SPATIAL_CODES {
            return Err(Error::Config(format!(
                "union dim {} must be at least dim + {} = {}",
                self.union_dim,
                NUM_SPATIAL_CODES,
                self.dim + NUM_SPATIAL_CODES
            )));
        }
        if self.n_images == 0 {
            return Err(Error::Config("n_images must be positive".into()));
        }
        Ok(())
    }
}

/// The planted structure: which (unordered class pair, spatial code) cells
/// carry a relationship at all, and the predicate of every related ordered
/// cell. A related pair is annotated in both directions, so edge direction
/// decides the predicate, never relatedness — every label is a deterministic
/// function of attributes the features expose.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RuleTable {
    num_object_classes: usize,
    num_predicate_classes: usize,
    /// Predicate per ordered (subject class, object class, code) cell.
    cells: Vec<usize>,
    /// Relatedness per unordered (class pair, code) cell.
    related: Vec<bool>,
}

/// Zipf-proportional integer allocation with largest-remainder rounding.
/// Remainder ties are broken by the rng, never by predicate index.
fn zipf_allocation(
    n_slots: usize,
    fg_predicates: usize,
    tail_exponent: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let weights: Vec<f64> = (1..=fg_predicates)
        .map(|rank| (rank as f64).powf(-tail_exponent))
        .collect();
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / total * n_slots as f64).collect();
    let mut alloc: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut leftover = n_slots - alloc.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..fg_predicates).collect();
    order.shuffle(rng);
    order.sort_by(|a, b| {
        (exact[*b] - exact[*b].floor()).total_cmp(&(exact[*a] - exact[*a].floor()))
    });
    for idx in order {
        if leftover == 0 {
            break;
        }
        alloc[idx] += 1;
        leftover -= 1;
    }
    alloc
}

impl RuleTable {
    fn build(o: usize, r: usize, tail_exponent: f64, rng: &mut ChaCha8Rng) -> Self {
        let fg = o - 1;
        let fg_predicates = r - 1;
        let n_unordered = (fg * (fg + 1) / 2) * NUM_SPATIAL_CODES;

        // Mark related unordered cells at the target density.
        let mut related = vec![false; n_unordered];
        let mut idx: Vec<usize> = (0..n_unordered).collect();
        idx.shuffle(rng);
        let n_related = ((REL_DENSITY * n_unordered as f64).round() as usize).max(1);
        for &i in idx.iter().take(n_related) {
            related[i] = true;
        }

        // Collect the ordered cells of related unordered cells: two per
        // mixed-class pair, one per same-class pair. Within one spatial
        // code every slot is hit at the same rate, so a slot's expected
        // hit mass is the empirical rate of its code.
        let code_rates = estimate_code_rates(rng);
        let mut slots: Vec<(usize, f64)> = Vec::new();
        for a in 1..o {
            for b in a..o {
                for code in 0..NUM_SPATIAL_CODES {
                    if !related[unordered_index(fg, a, b, code)] {
                        continue;
                    }
                    slots.push((ordered_index(fg, a, b, code), code_rates[code]));
                    if a != b {
                        slots.push((ordered_index(fg, b, a, code), code_rates[code]));
                    }
                }
            }
        }
        slots.shuffle(rng);

        // Weighted least-loaded assignment: each slot goes to the predicate
        // whose accumulated expected hits, relative to its Zipf weight, stay
        // smallest. The triplet marginal then tracks the weights to within
        // one slot's mass, whatever the code distribution looks like.
        let weights: Vec<f64> = (1..=fg_predicates)
            .map(|rank| (rank as f64).powf(-tail_exponent))
            .collect();
        let mut assigned = vec![0.0f64; fg_predicates];
        let mut cells = vec![0usize; fg * fg * NUM_SPATIAL_CODES];
        for (cell, mass) in slots {
            let pick = (0..fg_predicates)
                .min_by(|&a, &b| {
                    ((assigned[a] + mass) / weights[a]).total_cmp(&((assigned[b] + mass) / weights[b]))
                })
                .expect("at least one foreground predicate");
            cells[cell] = pick + 1;
            assigned[pick] += mass;
        }
        // Unrelated cells are never emitted; a second, independent
        // allocation keeps the table total.
        let mut rest: Vec<usize> = (0..cells.len()).filter(|i| cells[*i] == 0).collect();
        rest.shuffle(rng);
        let rest_alloc = zipf_allocation(rest.len(), fg_predicates, tail_exponent, rng);
        let mut rest_assignment: Vec<usize> = Vec::with_capacity(rest.len());
        for (pred_idx, count) in rest_alloc.iter().enumerate() {
            rest_assignment.extend(std::iter::repeat_n(pred_idx + 1, *count));
        }
        for (slot, predicate) in rest.iter().zip(rest_assignment) {
            cells[*slot] = predicate;
        }

        RuleTable {
            num_object_classes: o,
            num_predicate_classes: r,
            cells,
            related,
        }
    }

    /// Whether the (class pair, code) cell carries a relationship;
    /// symmetric in the two classes.
    pub fn is_related(&self, class_a: usize, class_b: usize, code: usize) -> bool {
        let fg = self.num_object_classes - 1;
        let (a, b) = (class_a.min(class_b), class_a.max(class_b));
        self.related[unordered_index(fg, a, b, code)]
    }

    /// The planted predicate for (subject class, object class, spatial code).
    /// Classes are foreground (>= 1).
    pub fn predicate(&self, subj_class: usize, obj_class: usize, code: usize) -> usize {
        let fg = self.num_object_classes - 1;
        debug_assert!(subj_class >= 1 && obj_class >= 1 && code < NUM_SPATIAL_CODES);
        self.cells[ordered_index(fg, subj_class, obj_class, code)]
    }

    /// Related ordered cells per predicate: the planted frequency profile.
    pub fn planted_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_predicate_classes];
        let fg = self.num_object_classes - 1;
        for a in 1..=fg {
            for b in 1..=fg {
                for code in 0..NUM_SPATIAL_CODES {
                    if self.is_related(a, b, code) {
                        counts[self.cells[ordered_index(fg, a, b, code)]] += 1;
                    }
                }
            }
        }
        counts
    }
}

fn ordered_index(fg: usize, subj_class: usize, obj_class: usize, code: usize) -> usize {
    ((subj_class - 1) * fg + (obj_class - 1)) * NUM_SPATIAL_CODES + code
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let cx = rng.random_range(0.15..0.85);
    let cy = rng.random_range(0.15..0.85);
    let hw = rng.random_range(0.05..0.25);
    let hh = rng.random_range(0.05..0.25);
    BBox::new(cx - hw, cy - hh, cx + hw, cy + hh).expect("positive extents by construction")
}

/// Empirical spatial-code distribution under the generator's box model.
fn estimate_code_rates(rng: &mut ChaCha8Rng) -> [f64; NUM_SPATIAL_CODES] {
    const TRIALS: usize = 20_000;
    let mut counts = [0usize; NUM_SPATIAL_CODES];
    for _ in 0..TRIALS {
        let a = random_box(rng);
        let b = random_box(rng);
        counts[spatial_code(&a, &b)] += 1;
    }
    let mut rates = [0.0; NUM_SPATIAL_CODES];
    for (r, c) in rates.iter_mut().zip(counts) {
        *r = c as f64 / TRIALS as f64;
    }
    rates
}

/// Upper-triangle-with-diagonal index over foreground class pairs (a <= b),
/// fanned out over the spatial codes.
fn unordered_index(fg: usize, class_a: usize, class_b: usize, code: usize) -> usize {
    let a = class_a - 1;
    let b = class_b - 1;
    debug_assert!(a <= b && b < fg);
    let pair_rank = a * fg - a * (a.saturating_sub(1)) / 2 + (b - a);
    pair_rank * NUM_SPATIAL_CODES + code
}

/// Symmetric spatial code of a node pair: orientation quadrant of the
/// center offset (direction-insensitive) plus a near/far bin.
pub fn spatial_code(a: &BBox, b: &BBox) -> usize {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    let (dx, dy) = (bx - ax, by - ay);
    let mut angle = dy.atan2(dx);
    if angle < 0.0 {
        angle += 2.0 * std::f64::consts::PI;
    }
    let octant = ((angle / (std::f64::consts::PI / 4.0)) as usize) % 8;
    // Reversing the pair shifts the octant by 4, so mod 4 is order-invariant.
    let orientation = octant % 4;
    let far = usize::from(dx.hypot(dy) > DIST_SPLIT);
    orientation + 4 * far
}

/// Per-image node and union-box features.
#[derive(Debug, Clone)]
pub struct ImageFeatures {
    pub x: Mat,
    pub u: UnionFeatures,
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub graphs: Vec<SceneGraph>,
    pub features: Vec<ImageFeatures>,
    pub rule: RuleTable,
    pub embeddings: Mat,
    pub config: GenConfig,
}

impl SyntheticCorpus {
    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    /// Ground-truth predicate counts, indexed by predicate class.
    pub fn predicate_histogram(&self) -> Vec<u64> {
        let mut hist = vec![0u64; self.config.num_predicate_classes];
        for g in &self.graphs {
            for t in &g.triplets {
                hist[t.predicate] += 1;
            }
        }
        hist
    }

    /// Re-applies the stored rule to every ground-truth pair's latent
    /// attributes and checks it reproduces the annotated predicate, and that
    /// every annotated pair sits on a related rule cell.
    pub fn verify_rule_consistency(&self) -> Result<()> {
        for g in &self.graphs {
            for t in &g.triplets {
                let s = &g.nodes[t.subject];
                let o = &g.nodes[t.object];
                let code = spatial_code(&s.bbox, &o.bbox);
                if !self.rule.is_related(s.class_id, o.class_id, code) {
                    return Err(Error::Data(format!(
                        "image {}: triplet ({}, {}, {}) sits on an unrelated rule cell",
                        g.image_id, t.subject, t.predicate, t.object
                    )));
                }
                let expect = self.rule.predicate(s.class_id, o.class_id, code);
                if expect != t.predicate {
                    return Err(Error::Data(format!(
                        "image {}: triplet ({}, {}, {}) disagrees with rule table (expected predicate {})",
                        g.image_id, t.subject, t.predicate, t.object, expect
                    )));
                }
            }
        }
        Ok(())
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller on two open-interval uniforms.
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Orthonormal class embeddings scaled to [`EMBED_SCALE`], via Gram-Schmidt
/// on random rows. Row 0 (background) is included but never used by
/// generated nodes.
fn class_embeddings(o: usize, d: usize, rng: &mut ChaCha8Rng) -> Mat {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(o);
    while rows.len() < o {
        let mut v: Vec<f64> = (0..d).map(|_| gauss(rng)).collect();
        for prev in &rows {
            let proj: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum::<f64>()
                / prev.iter().map(|b| b * b).sum::<f64>();
            for (vi, pi) in v.iter_mut().zip(prev) {
                *vi -= proj * pi;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue; // degenerate draw, retry
        }
        for vi in &mut v {
            *vi *= EMBED_SCALE / norm;
        }
        rows.push(v);
    }
    Mat::from_rows(&rows).expect("embedding rows share length d")
}

fn union_feature(
    e_i: &[f64],
    e_j: &[f64],
    code: usize,
    union_dim: usize,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let d = e_i.len();
    let mut u = vec![0.0; union_dim];
    for k in 0..d {
        u[k] = e_i[k] + e_j[k];
    }
    u[d + code] = CODE_SCALE;
    if sigma > 0.0 {
        for v in &mut u {
            *v += sigma * gauss(rng);
        }
    }
    u
}

/// Generates a corpus. Deterministic: the same config (including seed)
/// produces bit-identical graphs and features.
pub fn gen_corpus(config: &GenConfig) -> Result<SyntheticCorpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let o = config.num_object_classes;
    let embeddings = class_embeddings(o, config.dim, &mut rng);
    let rule = RuleTable::build(
        o,
        config.num_predicate_classes,
        config.tail_exponent,
        &mut rng,
    );

    let mut graphs = Vec::with_capacity(config.n_images);
    let mut features = Vec::with_capacity(config.n_images);
    for img in 0..config.n_images {
        // Rejection-sample node layouts until at least one pair lands on a
        // related rule cell.
        let (n, nodes, triplets) = 'image: {
            for _ in 0..MAX_IMAGE_ATTEMPTS {
                let n = rng.random_range(config.nodes_min..=config.nodes_max);
                let mut nodes = Vec::with_capacity(n);
                for _ in 0..n {
                    let class_id = rng.random_range(1..o);
                    nodes.push(Node::new(class_id, random_box(&mut rng)));
                }
                // A related pair is annotated in both directions; the rule
                // table keys the predicate on the order.
                let mut triplets = Vec::new();
                for i in 0..n {
                    for j in (i + 1)..n {
                        let code = spatial_code(&nodes[i].bbox, &nodes[j].bbox);
                        let (ci, cj) = (nodes[i].class_id, nodes[j].class_id);
                        if rule.is_related(ci, cj, code) {
                            triplets.push(Triplet {
                                subject: i,
                                predicate: rule.predicate(ci, cj, code),
                                object: j,
                            });
                            triplets.push(Triplet {
                                subject: j,
                                predicate: rule.predicate(cj, ci, code),
                                object: i,
                            });
                        }
                    }
                }
                if !triplets.is_empty() {
                    break 'image (n, nodes, triplets);
                }
            }
            return Err(Error::Config(format!(
                "image {img}: no related pair after {MAX_IMAGE_ATTEMPTS} layouts; \
                 relatedness density too sparse for this config"
            )));
        };

        let mut x = Mat::zeros(n, config.dim);
        for (i, node) in nodes.iter().enumerate() {
            let row = x.row_mut(i);
            row.copy_from_slice(embeddings.row(node.class_id));
            if config.noise_sigma > 0.0 {
                for v in row.iter_mut() {
                    *v += config.noise_sigma * gauss(&mut rng);
                }
            }
        }
        let mut u = UnionFeatures::new(n, config.union_dim);
        for i in 0..n {
            for j in (i + 1)..n {
                let code = spatial_code(&nodes[i].bbox, &nodes[j].bbox);
                let v = union_feature(
                    embeddings.row(nodes[i].class_id),
                    embeddings.row(nodes[j].class_id),
                    code,
                    config.union_dim,
                    config.noise_sigma,
                    &mut rng,
                );
                u.set_pair(i, j, v)?;
            }
        }

        graphs.push(SceneGraph {
            image_id: format!("img{img:05}"),
            nodes,
            triplets,
        });
        features.push(ImageFeatures { x, u });
    }

    Ok(SyntheticCorpus {
        graphs,
        features,
        rule,
        embeddings,
        config: config.clone(),
    })
}

/// The canonical train/test partition: indices 0..n shuffled by the seed,
/// the first `floor(fraction * n)` of them forming the training half.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0 < train_fraction && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let cut = (train_fraction * n as f64).floor() as usize;
    let test = order.split_off(cut);
    Ok((order, test))
}

/// Deterministic disjoint split by shuffled image index;
/// `floor(fraction * n)` images land in the training half.
pub fn split(
    corpus: &SyntheticCorpus,
    train_fraction: f64,
    seed: u64,
) -> Result<(SyntheticCorpus, SyntheticCorpus)> {
    let (train_idx, test_idx) = split_indices(corpus.len(), train_fraction, seed)?;
    let pick = |idxs: &[usize]| SyntheticCorpus {
        graphs: idxs.iter().map(|&i| corpus.graphs[i].clone()).collect(),
        features: idxs.iter().map(|&i| corpus.features[i].clone()).collect(),
        rule: corpus.rule.clone(),
        embeddings: corpus.embeddings.clone(),
        config: corpus.config.clone(),
    };
    Ok((pick(&train_idx), pick(&test_idx)))
}

// Sidecar features file: one JSON object per image, aligned with the corpus
// JSONL by image_id.
#[derive(Serialize, Deserialize)]
struct FeatureRecord {
    image_id: String,
    x: Mat,
    union_dim: usize,
    u: Vec<PairFeature>,
}

#[derive(Serialize, Deserialize)]
struct PairFeature {
    i: usize,
    j: usize,
    v: Vec<f64>,
}

pub fn save_features(corpus: &SyntheticCorpus, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for (g, f) in corpus.graphs.iter().zip(&corpus.features) {
        let rec = FeatureRecord {
            image_id: g.image_id.clone(),
            x: f.x.clone(),
            union_dim: f.u.dim(),
            u: f
                .u
                .iter_upper()
                .map(|(i, j, v)| PairFeature {
                    i,
                    j,
                    v: v.to_vec(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| Error::json(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Loads the features sidecar; returns per-image features in file order
/// along with image ids for alignment checks.
pub fn load_features(path: &Path) -> Result<Vec<(String, ImageFeatures)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FeatureRecord = serde_json::from_str(&line).map_err(|e| Error::json(path, e))?;
        let n = rec.x.rows();
        let mut u = UnionFeatures::new(n, rec.union_dim);
        for pf in rec.u {
            u.set_pair(pf.i, pf.j, pf.v)?;
        }
        out.push((rec.image_id, ImageFeatures { x: rec.x, u }));
    }
    Ok(out)
}
