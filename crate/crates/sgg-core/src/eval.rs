//! The scene-graph metric stack: triplet matching, Recall@K under the three
//! evaluation protocols, per-predicate mean recall, per-predicate average
//! precision with relationship- and phrase-level box matching, frequency-
//! weighted mean AP, and the blended score.
//!
//! Matching is greedy by prediction confidence: predictions are walked in
//! descending confidence and each claims the first still-unmatched ground
//! truth it matches. Each ground-truth triplet is matched at most once.
//! Images with no ground-truth relationships are skipped by recall means.
//! The graph constraint keeps one predicate per ordered node pair before the
//! top-K cut; the k-per-pair variant relaxes that to k.

use crate::error::{Error, Result};
use crate::graph::{iou, union_box, BBox, SceneGraph};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub const DEFAULT_IOU_THRESH: f64 = 0.5;

/// Evaluation protocol. It determines what the predictor was given, not how
/// matching works: with ground-truth boxes the IoU test is identically one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Ground-truth boxes and labels; predict predicates only.
    Predcls,
    /// Ground-truth boxes; predict labels and predicates.
    Sgcls,
    /// Nothing given; here boxes still come from the corpus (no detector),
    /// and candidate pairs are restricted to overlapping boxes.
    Sgdet,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "predcls" => Ok(EvalMode::Predcls),
            "sgcls" => Ok(EvalMode::Sgcls),
            "sgdet" => Ok(EvalMode::Sgdet),
            other => Err(Error::Config(format!(
                "unknown eval mode {other:?} (expected predcls, sgcls, or sgdet)"
            ))),
        }
    }
}

impl std::fmt::Display for EvalMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalMode::Predcls => "predcls",
            EvalMode::Sgcls => "sgcls",
            EvalMode::Sgdet => "sgdet",
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredNode {
    pub class_id: usize,
    pub bbox: BBox,
    /// Class confidence; 1.0 when the label was given.
    pub score: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredTriplet {
    pub subject: usize,
    pub predicate: usize,
    pub object: usize,
    /// Subject score × predicate score × object score.
    pub confidence: f64,
}

/// One image's predictions. Triplets may contain several predicates per
/// ordered pair; metric functions apply their own per-pair cap.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictedGraph {
    pub image_id: String,
    pub nodes: Vec<PredNode>,
    pub triplets: Vec<PredTriplet>,
}

impl PredictedGraph {
    /// Sorts by descending confidence with a deterministic tie-break.
    pub fn sort_triplets(&mut self) {
        self.triplets.sort_by(|a, b| {
            b.confidence
                .total_cmp(&a.confidence)
                .then(a.subject.cmp(&b.subject))
                .then(a.object.cmp(&b.object))
                .then(a.predicate.cmp(&b.predicate))
        });
    }
}

/// Class-and-box agreement of one predicted triplet with one ground-truth
/// triplet. `rel` matching tests both boxes at the threshold; see
/// [`match_triplet_phrase`] for the union-box variant.
pub fn match_triplet(
    pred: &PredictedGraph,
    pt: &PredTriplet,
    gt: &SceneGraph,
    gt_idx: usize,
    iou_thresh: f64,
) -> bool {
    let g = &gt.triplets[gt_idx];
    let ps = &pred.nodes[pt.subject];
    let po = &pred.nodes[pt.object];
    let gs = &gt.nodes[g.subject];
    let go = &gt.nodes[g.object];
    pt.predicate == g.predicate
        && ps.class_id == gs.class_id
        && po.class_id == go.class_id
        && iou(&ps.bbox, &gs.bbox) >= iou_thresh
        && iou(&po.bbox, &go.bbox) >= iou_thresh
}

/// Phrase-level agreement: classes equal and the union boxes overlap at the
/// threshold.
pub fn match_triplet_phrase(
    pred: &PredictedGraph,
    pt: &PredTriplet,
    gt: &SceneGraph,
    gt_idx: usize,
    iou_thresh: f64,
) -> bool {
    let g = &gt.triplets[gt_idx];
    let ps = &pred.nodes[pt.subject];
    let po = &pred.nodes[pt.object];
    let gs = &gt.nodes[g.subject];
    let go = &gt.nodes[g.object];
    pt.predicate == g.predicate
        && ps.class_id == gs.class_id
        && po.class_id == go.class_id
        && iou(&union_box(&ps.bbox, &po.bbox), &union_box(&gs.bbox, &go.bbox)) >= iou_thresh
}

/// Keeps at most `cap` predicates per ordered pair (by confidence), then the
/// global top-`k`; assumes `pred` is sorted by descending confidence.
fn top_k_pool(pred: &PredictedGraph, k: usize, cap: usize) -> Vec<&PredTriplet> {
    let mut per_pair: HashMap<(usize, usize), usize> = HashMap::new();
    let mut pool = Vec::new();
    for t in &pred.triplets {
        let slot = per_pair.entry((t.subject, t.object)).or_insert(0);
        if *slot < cap {
            *slot += 1;
            pool.push(t);
            if pool.len() == k {
                break;
            }
        }
    }
    pool
}

/// Greedy matching of the pooled predictions against ground truth. Returns
/// which GT triplets were matched.
fn match_image(
    pred: &PredictedGraph,
    gt: &SceneGraph,
    k: usize,
    per_pair_cap: usize,
    iou_thresh: f64,
) -> Vec<bool> {
    let mut matched = vec![false; gt.triplets.len()];
    for pt in top_k_pool(pred, k, per_pair_cap) {
        for (gt_idx, m) in matched.iter_mut().enumerate() {
            if !*m && match_triplet(pred, pt, gt, gt_idx, iou_thresh) {
                *m = true;
                break;
            }
        }
    }
    matched
}

fn paired<'a>(
    preds: &'a [PredictedGraph],
    gts: &'a [SceneGraph],
) -> Result<Vec<(&'a PredictedGraph, &'a SceneGraph)>> {
    if preds.len() != gts.len() {
        return Err(Error::Data(format!(
            "{} prediction images vs {} ground-truth images",
            preds.len(),
            gts.len()
        )));
    }
    for (p, g) in preds.iter().zip(gts) {
        if p.image_id != g.image_id {
            return Err(Error::Data(format!(
                "prediction image {} does not align with ground truth {}",
                p.image_id, g.image_id
            )));
        }
    }
    Ok(preds.iter().zip(gts).collect())
}

/// Mean over images of (GT triplets matched by the top-K pool) / (GT
/// triplets). `mode` is carried for labeling; the matching itself already
/// reflects it through the predictions' boxes and labels.
pub fn recall_at_k(
    preds: &[PredictedGraph],
    gts: &[SceneGraph],
    k: usize,
    _mode: EvalMode,
    graph_constraint: bool,
) -> Result<f64> {
    let cap = if graph_constraint { 1 } else { usize::MAX };
    recall_with_cap(preds, gts, k, cap)
}

/// Recall with `k_per_pair` predicates retained per ordered pair before the
/// top-K cut. `k_per_pair = 1` is exactly graph-constrained recall.
pub fn recall_topk_per_pair(
    preds: &[PredictedGraph],
    gts: &[SceneGraph],
    k: usize,
    k_per_pair: usize,
    num_predicate_classes: usize,
) -> Result<f64> {
    if k_per_pair == 0 || k_per_pair > num_predicate_classes {
        return Err(Error::Range {
            what: "k_per_pair",
            index: k_per_pair,
            bound: num_predicate_classes,
        });
    }
    recall_with_cap(preds, gts, k, k_per_pair)
}

fn recall_with_cap(
    preds: &[PredictedGraph],
    gts: &[SceneGraph],
    k: usize,
    cap: usize,
) -> Result<f64> {
    let pairs = paired(preds, gts)?;
    let per_image = crate::par::map_items(&pairs, |(pred, gt)| {
        if gt.triplets.is_empty() {
            return None;
        }
        let matched = match_image(pred, gt, k, cap, DEFAULT_IOU_THRESH);
        let hits = matched.iter().filter(|m| **m).count();
        Some(hits as f64 / gt.triplets.len() as f64)
    });
    let kept: Vec<f64> = per_image.into_iter().flatten().collect();
    if kept.is_empty() {
        return Ok(0.0);
    }
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

/// Per-predicate recall entry of the mean-recall table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredicateRecall {
    pub predicate: usize,
    pub recall: f64,
    pub num_gt: usize,
}

/// Recall computed per predicate class (mean of per-image recalls over
/// images containing that class), then averaged without weights over the
/// classes present in ground truth.
pub fn mean_recall_at_k(
    preds: &[PredictedGraph],
    gts: &[SceneGraph],
    k: usize,
    mode: EvalMode,
    graph_constraint: bool,
) -> Result<(f64, Vec<PredicateRecall>)> {
    let _ = mode;
    let cap = if graph_constraint { 1 } else { usize::MAX };
    let pairs = paired(preds, gts)?;
    let per_image = crate::par::map_items(&pairs, |(pred, gt)| {
        let matched = match_image(pred, gt, k, cap, DEFAULT_IOU_THRESH);
        // predicate -> (matched, total) within this image
        let mut counts: HashMap<usize, (usize, usize)> = HashMap::new();
        for (t, m) in gt.triplets.iter().zip(&matched) {
            let entry = counts.entry(t.predicate).or_insert((0, 0));
            entry.1 += 1;
            if *m {
                entry.0 += 1;
            }
        }
        counts
    });

    // predicate -> (sum of per-image recalls, image count, gt count)
    let mut acc: HashMap<usize, (f64, usize, usize)> = HashMap::new();
    for counts in per_image {
        for (pred_class, (hit, total)) in counts {
            let entry = acc.entry(pred_class).or_insert((0.0, 0, 0));
            entry.0 += hit as f64 / total as f64;
            entry.1 += 1;
            entry.2 += total;
        }
    }
    let mut table: Vec<PredicateRecall> = acc
        .into_iter()
        .map(|(predicate, (sum, images, num_gt))| PredicateRecall {
            predicate,
            recall: sum / images as f64,
            num_gt,
        })
        .collect();
    table.sort_by_key(|e| e.predicate);
    if table.is_empty() {
        return Ok((0.0, table));
    }
    let mean = table.iter().map(|e| e.recall).sum::<f64>() / table.len() as f64;
    Ok((mean, table))
}

/// Box-matching flavor for average precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMatch {
    /// Subject and object boxes each at the IoU threshold.
    Rel,
    /// Union of the pair's boxes at the IoU threshold.
    Phr,
}

/// Per-predicate AP entry; `ap` is None for classes without ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredicateAp {
    pub predicate: usize,
    pub ap: Option<f64>,
    pub num_gt: usize,
}

/// Average precision per predicate class over the whole test set, all-point
/// interpolation. Predictions are ranked globally by confidence within each
/// class; every ground-truth triplet can satisfy at most one prediction.
pub fn ap_per_predicate(
    preds: &[PredictedGraph],
    gts: &[SceneGraph],
    match_kind: ApMatch,
    num_predicate_classes: usize,
) -> Result<Vec<PredicateAp>> {
    let pairs = paired(preds, gts)?;
    let mut gt_counts = vec![0usize; num_predicate_classes];
    for gt in gts {
        for t in &gt.triplets {
            gt_counts[t.predicate] += 1;
        }
    }

    let classes: Vec<usize> = (0..num_predicate_classes).collect();
    let aps = crate::par::map_items(&classes, |&class| {
        if gt_counts[class] == 0 {
            return None;
        }
        // (confidence, image index, triplet) over all images for this class.
        let mut dets: Vec<(f64, usize, &PredTriplet)> = Vec::new();
        for (img, (pred, _)) in pairs.iter().enumerate() {
            for t in &pred.triplets {
                if t.predicate == class {
                    dets.push((t.confidence, img, t));
                }
            }
        }
        dets.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut matched: Vec<Vec<bool>> = pairs
            .iter()
            .map(|(_, gt)| vec![false; gt.triplets.len()])
            .collect();
        let mut tp = Vec::with_capacity(dets.len());
        for (_, img, t) in &dets {
            let (pred, gt) = pairs[*img];
            let mut hit = false;
            for gt_idx in 0..gt.triplets.len() {
                if matched[*img][gt_idx] {
                    continue;
                }
                let ok = match match_kind {
                    ApMatch::Rel => match_triplet(pred, t, gt, gt_idx, DEFAULT_IOU_THRESH),
                    ApMatch::Phr => match_triplet_phrase(pred, t, gt, gt_idx, DEFAULT_IOU_THRESH),
                };
                if ok {
                    matched[*img][gt_idx] = true;
                    hit = true;
                    break;
                }
            }
            tp.push(hit);
        }
        Some(average_precision(&tp, gt_counts[class]))
    });

    Ok(classes
        .iter()
        .map(|&predicate| PredicateAp {
            predicate,
            ap: aps[predicate],
            num_gt: gt_counts[predicate],
        })
        .collect())
}

/// Area under the precision-recall curve by all-point interpolation: sum of
/// recall increments times the precision envelope to the right.
fn average_precision(tp: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let n = tp.len();
    let mut recall = Vec::with_capacity(n);
    let mut precision = Vec::with_capacity(n);
    let mut cum = 0usize;
    for (rank, hit) in tp.iter().enumerate() {
        if *hit {
            cum += 1;
        }
        recall.push(cum as f64 / num_gt as f64);
        precision.push(cum as f64 / (rank + 1) as f64);
    }
    let mut envelope = precision;
    for i in (0..n.saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for i in 0..n {
        if recall[i] > prev {
            ap += (recall[i] - prev) * envelope[i];
            prev = recall[i];
        }
    }
    ap
}

/// Frequency-weighted mean of per-class APs: weights are each class's share
/// of the ground-truth instances.
pub fn wmap(per_class: &[PredicateAp]) -> Result<f64> {
    let total: usize = per_class.iter().map(|e| e.num_gt).sum();
    if total == 0 {
        return Err(Error::Data(
            "weighted mAP undefined: no ground-truth instances in any class".into(),
        ));
    }
    Ok(per_class
        .iter()
        .filter_map(|e| e.ap.map(|ap| e.num_gt as f64 / total as f64 * ap))
        .sum())
}

/// The blended score `0.2·R@50 + 0.4·wmAP_rel + 0.4·wmAP_phr`, inputs on the
/// percent scale.
pub fn score_wtd(r50: f64, wmap_rel: f64, wmap_phr: f64) -> f64 {
    0.2 * r50 + 0.4 * wmap_rel + 0.4 * wmap_phr
}

/// Options controlling a metric run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalOptions {
    pub mode: EvalMode,
    pub ks: Vec<usize>,
    pub graph_constraint: bool,
    /// Predicates retained per ordered pair when the graph constraint is off.
    pub k_per_pair: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            mode: EvalMode::Predcls,
            ks: vec![20, 50, 100],
            graph_constraint: true,
            k_per_pair: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub mode: EvalMode,
    pub graph_constraint: bool,
    pub k_per_pair: usize,
    /// Recall@K in [0, 1], keyed by K (stringified for JSON).
    pub recall: Vec<(usize, f64)>,
    pub mean_recall: Vec<(usize, f64)>,
    /// Per-predicate recall at the largest K.
    pub per_predicate_recall: Vec<PredicateRecall>,
    pub wmap_rel: f64,
    pub wmap_phr: f64,
    pub per_predicate_ap_rel: Vec<PredicateAp>,
    pub per_predicate_ap_phr: Vec<PredicateAp>,
    /// Blend of R@50 and the two weighted mAPs, on the percent scale.
    pub score_wtd: f64,
}

/// Runs the full metric stack with one convention.
pub fn build_report(
    preds: &[PredictedGraph],
    gts: &[SceneGraph],
    num_predicate_classes: usize,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    let cap = if opts.graph_constraint { 1 } else { opts.k_per_pair };
    let mut recall = Vec::new();
    let mut mean_recall = Vec::new();
    let mut per_predicate_recall = Vec::new();
    for &k in &opts.ks {
        let r = recall_topk_per_pair(preds, gts, k, cap, num_predicate_classes)?;
        recall.push((k, r));
        let (mr, table) = mean_recall_at_k(preds, gts, k, opts.mode, opts.graph_constraint)?;
        mean_recall.push((k, mr));
        per_predicate_recall = table;
    }
    let per_predicate_ap_rel = ap_per_predicate(preds, gts, ApMatch::Rel, num_predicate_classes)?;
    let per_predicate_ap_phr = ap_per_predicate(preds, gts, ApMatch::Phr, num_predicate_classes)?;
    let wmap_rel = wmap(&per_predicate_ap_rel)?;
    let wmap_phr = wmap(&per_predicate_ap_phr)?;
    let r50 = recall_topk_per_pair(preds, gts, 50, cap, num_predicate_classes)?;
    Ok(MetricReport {
        mode: opts.mode,
        graph_constraint: opts.graph_constraint,
        k_per_pair: cap,
        recall,
        mean_recall,
        per_predicate_recall,
        wmap_rel,
        wmap_phr,
        per_predicate_ap_rel,
        per_predicate_ap_phr,
        score_wtd: score_wtd(100.0 * r50, 100.0 * wmap_rel, 100.0 * wmap_phr),
    })
}

impl MetricReport {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(file, self).map_err(|e| Error::json(path, e))
    }

    /// Aligned text table; predicate names resolved through `vocab` when
    /// available.
    pub fn render_text(&self, predicate_names: Option<&[String]>) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "mode: {}   graph constraint: {}   k per pair: {}\n",
            self.mode, self.graph_constraint, self.k_per_pair
        ));
        out.push_str(&format!("{:<12}{:>10}{:>10}\n", "K", "R@K", "mR@K"));
        for ((k, r), (_, mr)) in self.recall.iter().zip(&self.mean_recall) {
            out.push_str(&format!("{k:<12}{r:>10.4}{mr:>10.4}\n"));
        }
        out.push_str(&format!(
            "wmAP_rel: {:.4}   wmAP_phr: {:.4}   score_wtd: {:.2}\n",
            self.wmap_rel, self.wmap_phr, self.score_wtd
        ));
        out.push_str(&format!(
            "{:<16}{:>8}{:>10}{:>10}{:>10}\n",
            "predicate", "n_gt", "recall", "AP_rel", "AP_phr"
        ));
        for entry in &self.per_predicate_recall {
            let name = predicate_names
                .and_then(|names| names.get(entry.predicate))
                .cloned()
                .unwrap_or_else(|| format!("predicate{}", entry.predicate));
            let ap_rel = self
                .per_predicate_ap_rel
                .iter()
                .find(|e| e.predicate == entry.predicate)
                .and_then(|e| e.ap);
            let ap_phr = self
                .per_predicate_ap_phr
                .iter()
                .find(|e| e.predicate == entry.predicate)
                .and_then(|e| e.ap);
            out.push_str(&format!(
                "{:<16}{:>8}{:>10.4}{:>10}{:>10}\n",
                name,
                entry.num_gt,
                entry.recall,
                ap_rel.map_or("-".into(), |v| format!("{v:.4}")),
                ap_phr.map_or("-".into(), |v| format!("{v:.4}")),
            ));
        }
        out
    }
}

// Prediction JSONL: the corpus schema plus per-node scores and per-triplet
// confidences: {"image_id", "nodes": [{class_id, bbox, score}],
// "triplets": [[subject, predicate, object, confidence]]}.
#[derive(Serialize, Deserialize)]
struct PredRecord {
    image_id: String,
    nodes: Vec<PredNodeRecord>,
    triplets: Vec<(usize, usize, usize, f64)>,
}

#[derive(Serialize, Deserialize)]
struct PredNodeRecord {
    class_id: usize,
    bbox: [f64; 4],
    score: f64,
}

pub fn save_predictions(preds: &[PredictedGraph], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for p in preds {
        let rec = PredRecord {
            image_id: p.image_id.clone(),
            nodes: p
                .nodes
                .iter()
                .map(|n| PredNodeRecord {
                    class_id: n.class_id,
                    bbox: [n.bbox.x1, n.bbox.y1, n.bbox.x2, n.bbox.y2],
                    score: n.score,
                })
                .collect(),
            triplets: p
                .triplets
                .iter()
                .map(|t| (t.subject, t.predicate, t.object, t.confidence))
                .collect(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| Error::json(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn load_predictions(path: &Path) -> Result<Vec<PredictedGraph>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredRecord = serde_json::from_str(&line).map_err(|e| Error::json(path, e))?;
        let mut nodes = Vec::with_capacity(rec.nodes.len());
        for n in rec.nodes {
            nodes.push(PredNode {
                class_id: n.class_id,
                bbox: BBox::new(n.bbox[0], n.bbox[1], n.bbox[2], n.bbox[3])?,
                score: n.score,
            });
        }
        let mut graph = PredictedGraph {
            image_id: rec.image_id,
            nodes,
            triplets: rec
                .triplets
                .into_iter()
                .map(|(subject, predicate, object, confidence)| PredTriplet {
                    subject,
                    predicate,
                    object,
                    confidence,
                })
                .collect(),
        };
        graph.sort_triplets();
        out.push(graph);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Node, Triplet};

    fn unit_box(i: usize) -> BBox {
        let off = i as f64 * 3.0;
        BBox::new(off, 0.0, off + 1.0, 1.0).unwrap()
    }

    fn gt_graph(id: &str, classes: &[usize], triplets: &[(usize, usize, usize)]) -> SceneGraph {
        SceneGraph {
            image_id: id.into(),
            nodes: classes
                .iter()
                .enumerate()
                .map(|(i, &c)| Node::new(c, unit_box(i)))
                .collect(),
            triplets: triplets
                .iter()
                .map(|&(s, p, o)| Triplet {
                    subject: s,
                    predicate: p,
                    object: o,
                })
                .collect(),
        }
    }

    fn pred_graph(id: &str, classes: &[usize], triplets: &[(usize, usize, usize, f64)]) -> PredictedGraph {
        let mut g = PredictedGraph {
            image_id: id.into(),
            nodes: classes
                .iter()
                .enumerate()
                .map(|(i, &c)| PredNode {
                    class_id: c,
                    bbox: unit_box(i),
                    score: 1.0,
                })
                .collect(),
            triplets: triplets
                .iter()
                .map(|&(s, p, o, c)| PredTriplet {
                    subject: s,
                    predicate: p,
                    object: o,
                    confidence: c,
                })
                .collect(),
        };
        g.sort_triplets();
        g
    }

    #[test]
    fn match_triplet_cases() {
        let gt = gt_graph("a", &[1, 2], &[(0, 1, 1)]);
        let pred = pred_graph("a", &[1, 2], &[(0, 1, 1, 0.9)]);
        assert!(match_triplet(&pred, &pred.triplets[0], &gt, 0, 0.5));

        // Wrong predicate.
        let pred2 = pred_graph("a", &[1, 2], &[(0, 2, 1, 0.9)]);
        assert!(!match_triplet(&pred2, &pred2.triplets[0], &gt, 0, 0.5));

        // Subject box IoU below threshold.
        let mut pred3 = pred_graph("a", &[1, 2], &[(0, 1, 1, 0.9)]);
        pred3.nodes[0].bbox = BBox::new(0.6, 0.0, 1.6, 1.0).unwrap(); // IoU 0.25
        assert!(!match_triplet(&pred3, &pred3.triplets[0], &gt, 0, 0.5));
    }

    #[test]
    fn recall_trivial_cases() {
        let gts = vec![gt_graph("a", &[1, 2, 3], &[(0, 1, 1), (1, 2, 2)])];
        // Predictions contain all GT within top-K.
        let preds = vec![pred_graph(
            "a",
            &[1, 2, 3],
            &[(0, 1, 1, 0.9), (1, 2, 2, 0.8), (2, 1, 0, 0.7)],
        )];
        let r = recall_at_k(&preds, &gts, 20, EvalMode::Predcls, true).unwrap();
        assert_eq!(r, 1.0);

        let empty = vec![pred_graph("a", &[1, 2, 3], &[])];
        let r = recall_at_k(&empty, &gts, 20, EvalMode::Predcls, true).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn recall_respects_top_k_cut() {
        let gts = vec![gt_graph("a", &[1, 2], &[(0, 1, 1)])];
        // The correct triplet ranks below two wrong ones; K = 2 misses it.
        let preds = vec![pred_graph(
            "a",
            &[1, 2],
            &[(1, 1, 0, 0.9), (1, 2, 0, 0.8), (0, 1, 1, 0.2)],
        )];
        let r2 = recall_at_k(&preds, &gts, 2, EvalMode::Predcls, false).unwrap();
        assert_eq!(r2, 0.0);
        let r3 = recall_at_k(&preds, &gts, 3, EvalMode::Predcls, false).unwrap();
        assert_eq!(r3, 1.0);
    }

    #[test]
    fn graph_constraint_keeps_one_predicate_per_pair() {
        let gts = vec![gt_graph("a", &[1, 2], &[(0, 2, 1)])];
        // Two predicates on the same pair; the wrong one is more confident.
        let preds = vec![pred_graph("a", &[1, 2], &[(0, 1, 1, 0.9), (0, 2, 1, 0.5)])];
        let constrained = recall_at_k(&preds, &gts, 10, EvalMode::Predcls, true).unwrap();
        assert_eq!(constrained, 0.0);
        let relaxed = recall_at_k(&preds, &gts, 10, EvalMode::Predcls, false).unwrap();
        assert_eq!(relaxed, 1.0);
        // k_per_pair = 1 is bitwise the graph-constrained number.
        let k1 = recall_topk_per_pair(&preds, &gts, 10, 1, 3).unwrap();
        assert_eq!(k1, constrained);
        let k2 = recall_topk_per_pair(&preds, &gts, 10, 2, 3).unwrap();
        assert_eq!(k2, relaxed);
        assert!(recall_topk_per_pair(&preds, &gts, 10, 0, 3).is_err());
        assert!(recall_topk_per_pair(&preds, &gts, 10, 4, 3).is_err());
    }

    #[test]
    fn zero_gt_images_are_skipped() {
        let gts = vec![
            gt_graph("a", &[1, 2], &[]),
            gt_graph("b", &[1, 2], &[(0, 1, 1)]),
        ];
        let preds = vec![
            pred_graph("a", &[1, 2], &[(0, 1, 1, 0.9)]),
            pred_graph("b", &[1, 2], &[(0, 1, 1, 0.9)]),
        ];
        let r = recall_at_k(&preds, &gts, 10, EvalMode::Predcls, true).unwrap();
        assert_eq!(r, 1.0);
    }

    #[test]
    fn mean_recall_cases() {
        // Single predicate class present: mR equals recall.
        let gts = vec![gt_graph("a", &[1, 2, 3], &[(0, 1, 1), (1, 1, 2)])];
        let preds = vec![pred_graph("a", &[1, 2, 3], &[(0, 1, 1, 0.9)])];
        let r = recall_at_k(&preds, &gts, 10, EvalMode::Predcls, true).unwrap();
        let (mr, table) = mean_recall_at_k(&preds, &gts, 10, EvalMode::Predcls, true).unwrap();
        assert!((mr - r).abs() < 1e-12);
        assert_eq!(table.len(), 1);

        // Two classes, one fully recalled, one missed: mR = 0.5.
        let gts = vec![gt_graph("a", &[1, 2, 3], &[(0, 1, 1), (1, 2, 2)])];
        let preds = vec![pred_graph("a", &[1, 2, 3], &[(0, 1, 1, 0.9)])];
        let (mr, _) = mean_recall_at_k(&preds, &gts, 10, EvalMode::Predcls, true).unwrap();
        assert!((mr - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ap_trivial_cases() {
        let gts = vec![gt_graph("a", &[1, 2], &[(0, 1, 1)])];
        let perfect = vec![pred_graph("a", &[1, 2], &[(0, 1, 1, 0.9)])];
        let aps = ap_per_predicate(&perfect, &gts, ApMatch::Rel, 3).unwrap();
        assert_eq!(aps[1].ap, Some(1.0));
        assert_eq!(aps[0].ap, None);

        let wrong = vec![pred_graph("a", &[1, 2], &[(1, 1, 0, 0.9)])];
        let aps = ap_per_predicate(&wrong, &gts, ApMatch::Rel, 3).unwrap();
        assert_eq!(aps[1].ap, Some(0.0));
    }

    /// Four predictions, two GT, hand-walked precision/recall curve.
    #[test]
    fn ap_hand_case() {
        let gts = vec![gt_graph("a", &[1, 2, 1, 2], &[(0, 1, 1), (2, 1, 3)])];
        // Ranked: hit, miss, hit, miss.
        let preds = vec![pred_graph(
            "a",
            &[1, 2, 1, 2],
            &[
                (0, 1, 1, 0.9),
                (1, 1, 0, 0.8),
                (2, 1, 3, 0.7),
                (3, 1, 2, 0.6),
            ],
        )];
        let aps = ap_per_predicate(&preds, &gts, ApMatch::Rel, 2).unwrap();
        // PR points: (0.5, 1), (0.5, 0.5), (1.0, 2/3), (1.0, 0.5).
        // All-point AP = 0.5*1 + 0.5*(2/3).
        let want = 0.5 + 0.5 * (2.0 / 3.0);
        assert!((aps[1].ap.unwrap() - want).abs() < 1e-12);
    }

    /// Phrase matching accepts a prediction whose individual boxes are off
    /// but whose union matches.
    #[test]
    fn phrase_match_uses_union_boxes() {
        let mut gt = gt_graph("a", &[1, 2], &[(0, 1, 1)]);
        gt.nodes[0].bbox = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        gt.nodes[1].bbox = BBox::new(1.0, 0.0, 2.0, 1.0).unwrap();
        let mut pred = pred_graph("a", &[1, 2], &[(0, 1, 1, 0.9)]);
        // Swap the two boxes: per-box IoU is 0, union box identical.
        pred.nodes[0].bbox = BBox::new(1.0, 0.0, 2.0, 1.0).unwrap();
        pred.nodes[1].bbox = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        assert!(!match_triplet(&pred, &pred.triplets[0], &gt, 0, 0.5));
        assert!(match_triplet_phrase(&pred, &pred.triplets[0], &gt, 0, 0.5));
    }

    #[test]
    fn wmap_cases() {
        let entries = vec![
            PredicateAp { predicate: 1, ap: Some(1.0), num_gt: 3 },
            PredicateAp { predicate: 2, ap: Some(0.0), num_gt: 1 },
        ];
        assert!((wmap(&entries).unwrap() - 0.75).abs() < 1e-12);
        let single = vec![PredicateAp { predicate: 1, ap: Some(0.4), num_gt: 7 }];
        assert!((wmap(&single).unwrap() - 0.4).abs() < 1e-12);
        let equal = vec![
            PredicateAp { predicate: 1, ap: Some(0.2), num_gt: 5 },
            PredicateAp { predicate: 2, ap: Some(0.8), num_gt: 5 },
        ];
        assert!((wmap(&equal).unwrap() - 0.5).abs() < 1e-12);
        assert!(wmap(&[]).is_err());
    }

    #[test]
    fn score_wtd_paper_rows() {
        assert!((score_wtd(74.67, 34.63, 37.89) - 43.94).abs() < 0.005);
        assert!((score_wtd(74.94, 35.54, 38.52) - 44.61).abs() < 0.005);
        assert!((score_wtd(77.27, 38.78, 40.15) - 47.03).abs() < 0.005);
        assert_eq!(score_wtd(0.0, 0.0, 0.0), 0.0);
    }

    #[test]
    fn predictions_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("preds.jsonl");
        let preds = vec![pred_graph(
            "img0",
            &[1, 2],
            &[(0, 1, 1, 0.9), (1, 2, 0, 0.4)],
        )];
        save_predictions(&preds, &path).unwrap();
        let loaded = load_predictions(&path).unwrap();
        assert_eq!(loaded.len(), 1);
        assert_eq!(loaded[0].triplets.len(), 2);
        assert_eq!(loaded[0].triplets[0].confidence, 0.9);
        assert_eq!(loaded[0].nodes[1].class_id, 2);
    }

    /// A case where greedy-by-confidence matching is suboptimal: the most
    /// confident prediction claims the GT that a later prediction also
    /// matches exclusively. Documents the convention.
    #[test]
    fn greedy_matching_documented_suboptimal_case() {
        // Two GT triplets over identical boxes and classes; both match the
        // first prediction, only the first matches the second prediction.
        let gt = SceneGraph {
            image_id: "a".into(),
            nodes: vec![
                Node::new(1, unit_box(0)),
                Node::new(1, BBox::new(0.0, 0.05, 1.0, 1.05).unwrap()),
                Node::new(2, unit_box(2)),
            ],
            triplets: vec![
                Triplet { subject: 0, predicate: 1, object: 2 },
                Triplet { subject: 1, predicate: 1, object: 2 },
            ],
        };
        let mut pred = PredictedGraph {
            image_id: "a".into(),
            nodes: vec![
                PredNode { class_id: 1, bbox: unit_box(0), score: 1.0 },
                PredNode { class_id: 1, bbox: BBox::new(0.0, 0.05, 1.0, 1.05).unwrap(), score: 1.0 },
                PredNode { class_id: 2, bbox: unit_box(2), score: 1.0 },
            ],
            triplets: vec![
                // Matches both GT rows (boxes overlap at IoU > 0.5).
                PredTriplet { subject: 0, predicate: 1, object: 2, confidence: 0.9 },
                // Matches only GT row 0.
                PredTriplet { subject: 0, predicate: 1, object: 2, confidence: 0.8 },
            ],
        };
        pred.sort_triplets();
        let r = recall_at_k(&[pred], &[gt], 10, EvalMode::Predcls, false).unwrap();
        // Greedy assigns the first prediction to GT 0, the second finds GT 1
        // still open (same pair, both match), so here greedy reaches 1.0;
        // the convention point is that assignment order is by confidence and
        // first-open GT index, not by optimal matching.
        assert_eq!(r, 1.0);
    }
}
