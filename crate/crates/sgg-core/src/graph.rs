//! Scene-graph data model: boxed, labeled nodes joined by directed predicate
//! edges, plus node-priority accounting and box geometry.
//!
//! Corpora are stored as JSONL, one graph per line:
//! `{"image_id": .., "nodes": [{"class_id": c, "bbox": [x1,y1,x2,y2]}], "triplets": [[s,p,o]]}`
//! with a vocabulary header `{"object_classes": [..], "predicate_classes": [..]}`
//! where index 0 is `"__background__"` in both lists.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Axis-aligned box in image coordinates, `x1 < x2`, `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1 < x2 && y1 < y2) {
            return Err(Error::Data(format!(
                "degenerate box [{x1}, {y1}, {x2}, {y2}]: requires x1 < x2 and y1 < y2"
            )));
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }
}

/// Intersection-over-union; zero for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection_area(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

pub(crate) fn intersection_area(a: &BBox, b: &BBox) -> f64 {
    let w = a.x2.min(b.x2) - a.x1.max(b.x1);
    let h = a.y2.min(b.y2) - a.y1.max(b.y1);
    if w <= 0.0 || h <= 0.0 {
        0.0
    } else {
        w * h
    }
}

/// Smallest axis-aligned box containing both inputs.
pub fn union_box(a: &BBox, b: &BBox) -> BBox {
    BBox {
        x1: a.x1.min(b.x1),
        y1: a.y1.min(b.y1),
        x2: a.x2.max(b.x2),
        y2: a.y2.max(b.y2),
    }
}

/// An object node: class, box, and an optional class-score vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Node {
    pub class_id: usize,
    pub bbox: BBox,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
}

impl Node {
    pub fn new(class_id: usize, bbox: BBox) -> Self {
        Node {
            class_id,
            bbox,
            scores: None,
        }
    }
}

/// A directed edge `<subject, predicate, object>`; predicate 0 is the
/// background "non-relationship" class and never appears in ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub subject: usize,
    pub predicate: usize,
    pub object: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneGraph {
    pub image_id: String,
    pub nodes: Vec<Node>,
    pub triplets: Vec<Triplet>,
}

impl SceneGraph {
    /// Validates index bounds, class bounds, and ground-truth set semantics
    /// (no duplicate (subject, predicate, object) entries).
    pub fn validate(&self, num_object_classes: usize, num_predicate_classes: usize) -> Result<()> {
        for node in &self.nodes {
            if node.class_id >= num_object_classes {
                return Err(Error::Range {
                    what: "node class",
                    index: node.class_id,
                    bound: num_object_classes,
                });
            }
        }
        let mut seen = HashSet::new();
        for t in &self.triplets {
            if t.subject >= self.nodes.len() || t.object >= self.nodes.len() {
                return Err(Error::Range {
                    what: "triplet node index",
                    index: t.subject.max(t.object),
                    bound: self.nodes.len(),
                });
            }
            if t.subject == t.object {
                return Err(Error::Data(format!(
                    "image {}: triplet relates node {} to itself",
                    self.image_id, t.subject
                )));
            }
            if t.predicate >= num_predicate_classes {
                return Err(Error::Range {
                    what: "predicate class",
                    index: t.predicate,
                    bound: num_predicate_classes,
                });
            }
            if !seen.insert(*t) {
                return Err(Error::Data(format!(
                    "image {}: duplicate triplet ({}, {}, {})",
                    self.image_id, t.subject, t.predicate, t.object
                )));
            }
        }
        Ok(())
    }

    /// Number of triplets containing `node` as subject or object.
    pub fn count_triplets(&self, node: usize) -> Result<usize> {
        if node >= self.nodes.len() {
            return Err(Error::Range {
                what: "node index",
                index: node,
                bound: self.nodes.len(),
            });
        }
        Ok(self
            .triplets
            .iter()
            .filter(|t| t.subject == node || t.object == node)
            .count())
    }
}

/// Per-node priorities `theta_i = t_i / ||T||`: triplet membership counts
/// normalized by the graph's total triplet count.
#[derive(Debug, Clone)]
pub struct PriorityVector {
    pub theta: Vec<f64>,
    pub triplet_total: usize,
}

/// Computes node priorities; errors on graphs with no triplets, where the
/// ratio is undefined.
pub fn node_priority(graph: &SceneGraph) -> Result<PriorityVector> {
    let total = graph.triplets.len();
    if total == 0 {
        return Err(Error::Data(format!(
            "image {}: node priority undefined on a graph with zero triplets",
            graph.image_id
        )));
    }
    let mut counts = vec![0usize; graph.nodes.len()];
    for t in &graph.triplets {
        counts[t.subject] += 1;
        counts[t.object] += 1;
    }
    Ok(PriorityVector {
        theta: counts.iter().map(|c| *c as f64 / total as f64).collect(),
        triplet_total: total,
    })
}

/// Class-name vocabulary; index 0 is the background class in both lists.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    pub object_classes: Vec<String>,
    pub predicate_classes: Vec<String>,
}

impl Vocab {
    pub fn synthetic(num_object_classes: usize, num_predicate_classes: usize) -> Self {
        let mut object_classes = vec!["__background__".to_string()];
        object_classes.extend((1..num_object_classes).map(|i| format!("obj{i}")));
        let mut predicate_classes = vec!["__background__".to_string()];
        predicate_classes.extend((1..num_predicate_classes).map(|i| format!("rel{i}")));
        Vocab {
            object_classes,
            predicate_classes,
        }
    }

    pub fn num_object_classes(&self) -> usize {
        self.object_classes.len()
    }

    pub fn num_predicate_classes(&self) -> usize {
        self.predicate_classes.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(file, self).map_err(|e| Error::json(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_reader(file).map_err(|e| Error::json(path, e))
    }
}

// Wire form of one corpus line; triplets as [subject, predicate, object].
#[derive(Serialize, Deserialize)]
struct GraphRecord {
    image_id: String,
    nodes: Vec<NodeRecord>,
    triplets: Vec<[usize; 3]>,
}

#[derive(Serialize, Deserialize)]
struct NodeRecord {
    class_id: usize,
    bbox: [f64; 4],
}

pub fn save_corpus(graphs: &[SceneGraph], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for g in graphs {
        let rec = GraphRecord {
            image_id: g.image_id.clone(),
            nodes: g
                .nodes
                .iter()
                .map(|n| NodeRecord {
                    class_id: n.class_id,
                    bbox: [n.bbox.x1, n.bbox.y1, n.bbox.x2, n.bbox.y2],
                })
                .collect(),
            triplets: g
                .triplets
                .iter()
                .map(|t| [t.subject, t.predicate, t.object])
                .collect(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| Error::json(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Vec<SceneGraph>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut graphs = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GraphRecord = serde_json::from_str(&line).map_err(|e| Error::json(path, e))?;
        let mut nodes = Vec::with_capacity(rec.nodes.len());
        for n in rec.nodes {
            nodes.push(Node::new(
                n.class_id,
                BBox::new(n.bbox[0], n.bbox[1], n.bbox[2], n.bbox[3])?,
            ));
        }
        graphs.push(SceneGraph {
            image_id: rec.image_id,
            nodes,
            triplets: rec
                .triplets
                .iter()
                .map(|t| Triplet {
                    subject: t[0],
                    predicate: t[1],
                    object: t[2],
                })
                .collect(),
        });
    }
    Ok(graphs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn graph_with(triplets: &[(usize, usize, usize)], n: usize) -> SceneGraph {
        let nodes = (0..n)
            .map(|i| {
                Node::new(
                    1,
                    BBox::new(i as f64, 0.0, i as f64 + 1.0, 1.0).unwrap(),
                )
            })
            .collect();
        SceneGraph {
            image_id: "t".into(),
            nodes,
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

    #[test]
    fn count_triplets_cases() {
        let g = graph_with(&[(0, 1, 1), (0, 1, 2), (1, 1, 2)], 4);
        assert_eq!(g.count_triplets(0).unwrap(), 2);
        assert_eq!(g.count_triplets(3).unwrap(), 0);
        // node 1: subject in one, object in another
        assert_eq!(g.count_triplets(1).unwrap(), 2);
        assert!(g.count_triplets(9).is_err());
    }

    #[test]
    fn node_priority_cases() {
        let g = graph_with(&[(0, 1, 1)], 2);
        let p = node_priority(&g).unwrap();
        assert_eq!(p.theta, vec![1.0, 1.0]);

        let g = graph_with(&[(0, 1, 1), (0, 1, 2), (1, 1, 2)], 3);
        let p = node_priority(&g).unwrap();
        for theta in &p.theta {
            assert!((theta - 2.0 / 3.0).abs() < 1e-15);
        }

        let empty = graph_with(&[], 2);
        assert!(node_priority(&empty).is_err());
    }

    /// Triplet-count ordering mirrors the priority ordering.
    #[test]
    fn priority_ordering_follows_counts() {
        // counts: node 0 -> 4, node 1 -> 3, node 2 -> 2 ("man > dog > leg")
        let g = graph_with(
            &[(0, 1, 1), (0, 2, 1), (0, 1, 2), (0, 2, 3), (1, 1, 2), (3, 1, 4)],
            5,
        );
        let p = node_priority(&g).unwrap();
        assert!(p.theta[0] > p.theta[1]);
        assert!(p.theta[1] > p.theta[2]);
    }

    #[test]
    fn duplicate_triplets_rejected() {
        let g = graph_with(&[(0, 1, 1), (0, 1, 1)], 2);
        assert!(g.validate(3, 3).is_err());
    }

    #[test]
    fn iou_cases() {
        let a = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        assert_eq!(iou(&a, &a), 1.0);
        let far = BBox::new(5.0, 5.0, 6.0, 6.0).unwrap();
        assert_eq!(iou(&a, &far), 0.0);
        let shifted = BBox::new(0.5, 0.0, 1.5, 1.0).unwrap();
        assert!((iou(&a, &shifted) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn union_box_cases() {
        let a = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let b = BBox::new(2.0, 2.0, 3.0, 3.0).unwrap();
        assert_eq!(union_box(&a, &a), a);
        assert_eq!(union_box(&a, &b), union_box(&b, &a));
        assert_eq!(union_box(&a, &b), BBox::new(0.0, 0.0, 3.0, 3.0).unwrap());
    }

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        let graphs = vec![
            graph_with(&[(0, 1, 1)], 2),
            graph_with(&[(0, 2, 1), (1, 1, 2)], 3),
        ];
        save_corpus(&graphs, &path).unwrap();
        let loaded = load_corpus(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[1].triplets.len(), 2);
        assert_eq!(loaded[1].triplets[0].predicate, 2);
    }

    proptest! {
        /// Each triplet contributes to exactly two nodes: sum of counts = 2 * total.
        #[test]
        fn triplet_count_accounting(raw in proptest::collection::vec((0usize..6, 1usize..4, 0usize..6), 1..12)) {
            let triplets: Vec<(usize, usize, usize)> = raw
                .into_iter()
                .filter(|(s, _, o)| s != o)
                .collect();
            prop_assume!(!triplets.is_empty());
            let mut dedup = std::collections::HashSet::new();
            let triplets: Vec<_> = triplets.into_iter().filter(|t| dedup.insert(*t)).collect();
            let g = graph_with(&triplets, 6);
            let total: usize = (0..6).map(|i| g.count_triplets(i).unwrap()).sum();
            prop_assert_eq!(total, 2 * g.triplets.len());
            let p = node_priority(&g).unwrap();
            let theta_sum: f64 = p.theta.iter().sum();
            prop_assert!((theta_sum - 2.0).abs() < 1e-12);
        }

        /// IoU is symmetric, bounded by 1, and 1 only for identical boxes.
        #[test]
        fn iou_properties(
            ax in 0.0f64..5.0, ay in 0.0f64..5.0, aw in 0.1f64..3.0, ah in 0.1f64..3.0,
            bx in 0.0f64..5.0, by in 0.0f64..5.0, bw in 0.1f64..3.0, bh in 0.1f64..3.0,
        ) {
            let a = BBox::new(ax, ay, ax + aw, ay + ah).unwrap();
            let b = BBox::new(bx, by, bx + bw, by + bh).unwrap();
            let ab = iou(&a, &b);
            prop_assert!((ab - iou(&b, &a)).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
            if ab == 1.0 {
                prop_assert_eq!(a, b);
            }
            let u = union_box(&a, &b);
            prop_assert!(u.x1 <= a.x1 && u.x2 >= b.x2 && u.y1 <= a.y1.min(b.y1) && u.y2 >= a.y2.max(b.y2));
        }
    }
}
