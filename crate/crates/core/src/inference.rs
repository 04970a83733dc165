//! Root-to-leaf prediction: the highest product of per-level child
//! probabilities over all paths, found exhaustively or by beam search.
//!
//! "Others" outputs are never path steps; they only take softmax mass away
//! from a classifier's children. Ties go to the lower node id.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::HierarchicalHead;
use crate::scalar::Scalar;
use crate::taxonomy::{LeafPath, NodeId, Taxonomy};

#[derive(Clone, Debug, PartialEq)]
pub struct PathPrediction<T> {
    pub leaf: NodeId,
    pub path: LeafPath,
    /// Child probability at levels `1..=depth`.
    pub level_probs: Vec<T>,
    /// Left-to-right product of `level_probs`.
    pub score: T,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeamConfig {
    pub width: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig { width: 3 }
    }
}

fn product<T: Scalar>(probs: &[T]) -> T {
    probs.iter().fold(T::one(), |acc, &p| acc * p)
}

/// Scores every root-to-leaf path.
pub fn exhaustive_predict<T: Scalar>(head: &HierarchicalHead<T>, t: &Taxonomy, x: &[T]) -> Result<PathPrediction<T>> {
    let mut probs: BTreeMap<NodeId, Vec<T>> = BTreeMap::new();
    for node in t.internal_nodes() {
        probs.insert(node, head.classify_node(node, x)?);
    }
    let mut best: Option<PathPrediction<T>> = None;
    for path in t.enumerate_paths() {
        let level_probs: Vec<T> = path
            .nodes()
            .windows(2)
            .map(|w| {
                let idx = t.nodes()[w[0].0].child_index(w[1]).expect("parent-child");
                probs[&w[0]][idx]
            })
            .collect();
        let score = product(&level_probs);
        if best.as_ref().is_none_or(|b| score > b.score) {
            best = Some(PathPrediction { leaf: path.leaf(), path, level_probs, score });
        }
    }
    best.ok_or_else(|| Error::InvalidParameter("taxonomy has no leaves".into()))
}

struct Partial<T> {
    nodes: Vec<NodeId>,
    level_probs: Vec<T>,
    score: T,
}

fn rank<T: Scalar>(a: &Partial<T>, b: &Partial<T>) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.nodes.last().cmp(&b.nodes.last()))
}

/// Level-synchronous beam search keeping the `width` best partial products.
pub fn beam_predict<T: Scalar>(head: &HierarchicalHead<T>, t: &Taxonomy, x: &[T], cfg: BeamConfig) -> Result<PathPrediction<T>> {
    if cfg.width == 0 {
        return Err(Error::InvalidParameter("beam width must be at least 1".into()));
    }
    let mut beam = vec![Partial { nodes: vec![t.root()], level_probs: Vec::new(), score: T::one() }];
    for _ in 0..t.depth() {
        let mut candidates = Vec::new();
        for partial in &beam {
            let node = *partial.nodes.last().expect("non-empty");
            let probs = head.classify_node(node, x)?;
            for (k, &child) in t.nodes()[node.0].children.iter().enumerate() {
                let mut nodes = partial.nodes.clone();
                nodes.push(child);
                let mut level_probs = partial.level_probs.clone();
                level_probs.push(probs[k]);
                candidates.push(Partial { nodes, level_probs, score: partial.score * probs[k] });
            }
        }
        candidates.sort_by(rank);
        candidates.truncate(cfg.width);
        beam = candidates;
    }
    let best = beam.into_iter().next().ok_or_else(|| Error::InvalidParameter("taxonomy has no leaves".into()))?;
    Ok(PathPrediction {
        leaf: *best.nodes.last().expect("non-empty"),
        path: LeafPath(best.nodes),
        level_probs: best.level_probs,
        score: best.score,
    })
}

/// Top-down argmax; beam search of width 1.
pub fn greedy_predict<T: Scalar>(head: &HierarchicalHead<T>, t: &Taxonomy, x: &[T]) -> Result<PathPrediction<T>> {
    beam_predict(head, t, x, BeamConfig { width: 1 })
}

pub fn predict_batch<T: Scalar>(head: &HierarchicalHead<T>, t: &Taxonomy, xs: &[Vec<T>], cfg: BeamConfig) -> Result<Vec<PathPrediction<T>>> {
    xs.iter().map(|x| beam_predict(head, t, x, cfg)).collect()
}
