//! Predicate-frequency statistics conditioned on (subject class, object
//! class) pairs, the prior the reasoning module softens and gates.

use crate::error::{Error, Result};
use crate::graph::SceneGraph;
use serde::{Deserialize, Serialize};

/// Additive smoothing applied per cell when normalizing counts. Keeps every
/// conditional a strictly positive distribution so downstream log-softmax
/// inputs are never degenerate.
pub const PRIOR_SMOOTHING: f64 = 1e-3;

/// O×O×R table of predicate occurrence counts and smoothed conditionals.
/// Lookup is direction-sensitive: `(s, o)` and `(o, s)` index different rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrequencyPrior {
    num_object_classes: usize,
    num_predicate_classes: usize,
    counts: Vec<u64>,
    probabilities: Vec<f64>,
}

impl FrequencyPrior {
    /// Tallies ground-truth triplets over `corpus` and normalizes each
    /// (subject, object) cell with additive smoothing. The background
    /// predicate (class 0) never occurs in ground truth, so its count stays
    /// zero and only smoothing gives it mass.
    pub fn build(corpus: &[SceneGraph], num_object_classes: usize, num_predicate_classes: usize) -> Result<Self> {
        Self::build_with_smoothing(corpus, num_object_classes, num_predicate_classes, PRIOR_SMOOTHING)
    }

    pub fn build_with_smoothing(
        corpus: &[SceneGraph],
        num_object_classes: usize,
        num_predicate_classes: usize,
        smoothing: f64,
    ) -> Result<Self> {
        let (o, r) = (num_object_classes, num_predicate_classes);
        let mut counts = vec![0u64; o * o * r];
        for graph in corpus {
            for t in &graph.triplets {
                let s_class = graph.nodes[t.subject].class_id;
                let o_class = graph.nodes[t.object].class_id;
                if s_class >= o || o_class >= o {
                    return Err(Error::Range {
                        what: "prior object class",
                        index: s_class.max(o_class),
                        bound: o,
                    });
                }
                if t.predicate >= r {
                    return Err(Error::Range {
                        what: "prior predicate class",
                        index: t.predicate,
                        bound: r,
                    });
                }
                counts[(s_class * o + o_class) * r + t.predicate] += 1;
            }
        }
        let mut probabilities = vec![0.0; o * o * r];
        for cell in 0..o * o {
            let slice = &counts[cell * r..(cell + 1) * r];
            let total: f64 = slice.iter().map(|c| *c as f64).sum::<f64>() + smoothing * r as f64;
            for (p, c) in probabilities[cell * r..(cell + 1) * r]
                .iter_mut()
                .zip(slice)
            {
                *p = (*c as f64 + smoothing) / total;
            }
        }
        Ok(FrequencyPrior {
            num_object_classes: o,
            num_predicate_classes: r,
            counts,
            probabilities,
        })
    }

    pub fn num_object_classes(&self) -> usize {
        self.num_object_classes
    }

    pub fn num_predicate_classes(&self) -> usize {
        self.num_predicate_classes
    }

    /// The smoothed predicate distribution for an ordered class pair.
    pub fn lookup(&self, subj_class: usize, obj_class: usize) -> Result<&[f64]> {
        if subj_class >= self.num_object_classes || obj_class >= self.num_object_classes {
            return Err(Error::Range {
                what: "prior lookup class",
                index: subj_class.max(obj_class),
                bound: self.num_object_classes,
            });
        }
        let cell = subj_class * self.num_object_classes + obj_class;
        let r = self.num_predicate_classes;
        Ok(&self.probabilities[cell * r..(cell + 1) * r])
    }

    pub fn count(&self, subj_class: usize, obj_class: usize, predicate: usize) -> u64 {
        let cell = subj_class * self.num_object_classes + obj_class;
        self.counts[cell * self.num_predicate_classes + predicate]
    }

    /// Total ground-truth occurrences per predicate class.
    pub fn predicate_totals(&self) -> Vec<u64> {
        let r = self.num_predicate_classes;
        let mut totals = vec![0u64; r];
        for (i, c) in self.counts.iter().enumerate() {
            totals[i % r] += c;
        }
        totals
    }
}
