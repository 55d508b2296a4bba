//! Predicate diversity statistics over a corpus of scene graphs.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::SceneGraph;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredicateStats {
    pub histogram: BTreeMap<String, usize>,
    pub total: usize,
    pub distinct_count: usize,
    pub k: usize,
    pub top_k_mass: f64,
    /// Shannon entropy of the empirical predicate distribution, in nats.
    pub entropy: f64,
}

impl PredicateStats {
    /// Share of all edges carried by the `k` most frequent predicates.
    pub fn mass_of_top(&self, k: usize) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        let mut counts: Vec<usize> = self.histogram.values().copied().collect();
        counts.sort_unstable_by(|a, b| b.cmp(a));
        let top: usize = counts.iter().take(k).sum();
        top as f64 / self.total as f64
    }

    /// Predicates by descending count, ties alphabetical.
    pub fn ranked(&self) -> Vec<(&str, usize)> {
        let mut v: Vec<_> = self.histogram.iter().map(|(p, c)| (p.as_str(), *c)).collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        v
    }
}

pub fn predicate_stats(graphs: &[SceneGraph], k: usize) -> Result<PredicateStats> {
    if k == 0 {
        return Err(Error::Invalid("top-k must be at least 1".into()));
    }
    let mut histogram = BTreeMap::new();
    for e in graphs.iter().flat_map(|g| &g.edges) {
        *histogram.entry(e.predicate.clone()).or_insert(0usize) += 1;
    }
    let total: usize = histogram.values().sum();
    let entropy = if total == 0 {
        0.0
    } else {
        let n = total as f64;
        let h: f64 = histogram
            .values()
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum();
        // a single category gives -1·ln 1 = -0.0
        h.max(0.0)
    };
    let mut stats = PredicateStats {
        distinct_count: histogram.len(),
        histogram,
        total,
        k,
        top_k_mass: 0.0,
        entropy,
    };
    stats.top_k_mass = stats.mass_of_top(k);
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{DetectedObject, Edge};

    fn graph_with(preds: &[(&str, usize)]) -> SceneGraph {
        let nodes = (0..2)
            .map(|i| DetectedObject {
                node_id: i,
                label: "thing".into(),
                bbox: [0., 0., 1., 1.].into(),
                score: 1.0,
            })
            .collect();
        let edges = preds
            .iter()
            .flat_map(|(p, c)| {
                (0..*c).map(move |_| Edge {
                    subject: 0,
                    predicate: p.to_string(),
                    object: 1,
                })
            })
            .collect();
        SceneGraph {
            image_id: "g".into(),
            width: 1,
            height: 1,
            nodes,
            edges,
        }
    }

    #[test]
    fn single_predicate() {
        let s = predicate_stats(&[graph_with(&[("of", 7)])], 1).unwrap();
        assert_eq!(s.distinct_count, 1);
        assert_eq!(s.top_k_mass, 1.0);
        assert_eq!(s.entropy, 0.0);
        assert!(s.entropy.is_sign_positive());
    }

    #[test]
    fn three_to_one() {
        let s = predicate_stats(&[graph_with(&[("a", 3), ("b", 1)])], 1).unwrap();
        assert_eq!(s.top_k_mass, 0.75);
        let expected = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        assert!((s.entropy - expected).abs() < 1e-12);
        assert_eq!(s.ranked()[0], ("a", 3));
    }

    #[test]
    fn uniform_hundred() {
        let names: Vec<String> = (0..100).map(|i| format!("p{i}")).collect();
        let preds: Vec<(&str, usize)> = names.iter().map(|n| (n.as_str(), 1)).collect();
        let s = predicate_stats(&[graph_with(&preds)], 50).unwrap();
        assert_eq!(s.top_k_mass, 0.5);
        assert_eq!(s.mass_of_top(100), 1.0);
        assert_eq!(s.mass_of_top(1000), 1.0);
    }

    #[test]
    fn empty_corpus_is_defined() {
        let s = predicate_stats(&[], 5).unwrap();
        assert_eq!((s.distinct_count, s.top_k_mass, s.entropy), (0, 0.0, 0.0));
        assert!(predicate_stats(&[], 0).is_err());
    }
}
