//! Accuracy reports, greedy-vs-beam corrections, prototype geometry and
//! embedding export.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::Result;
use crate::inference::{beam_predict, BeamConfig, PathPrediction};
use crate::memory::MemoryBank;
use crate::numeric::cosine;
use crate::taxonomy::{NodeId, Taxonomy};
use crate::trainer::TrainState;

/// Beam prediction expressed in the state's active taxonomy.
pub fn predict(state: &TrainState, raw: &[f64], width: usize) -> Result<PathPrediction<f64>> {
    let x = state.adapter.embed(raw)?;
    if !state.flat {
        return beam_predict(&state.head, &state.taxonomy, &x, BeamConfig { width });
    }
    let p = beam_predict(&state.head, &state.taxonomy.flatten(), &x, BeamConfig { width })?;
    let leaf = state.from_head_leaf(p.leaf)?;
    Ok(PathPrediction { leaf, path: state.taxonomy.path_of(leaf)?, level_probs: p.level_probs, score: p.score })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub count: usize,
    /// Fraction with the whole root-to-leaf path right.
    pub full_path: f64,
    /// Fraction right at levels `1..=depth`.
    pub per_level: Vec<f64>,
}

#[derive(Default)]
struct Tally {
    count: usize,
    full: usize,
    levels: Vec<usize>,
}

impl Tally {
    fn finish(&self, depth: usize) -> GroupAccuracy {
        let frac = |k: usize| if self.count == 0 { 0.0 } else { k as f64 / self.count as f64 };
        GroupAccuracy {
            count: self.count,
            full_path: frac(self.full),
            per_level: (0..depth).map(|j| frac(self.levels.get(j).copied().unwrap_or(0))).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub beam_width: usize,
    pub overall: GroupAccuracy,
    pub base: GroupAccuracy,
    pub novel: GroupAccuracy,
    pub greedy_full_path: f64,
    /// Examples where greedy and beam disagree and beam is right.
    pub corrections: usize,
    pub correction_rate: f64,
}

/// Scores `dataset` (labels in the state's taxonomy); leaves in `novel`
/// count toward the novel group, all others toward base.
pub fn evaluate(state: &TrainState, dataset: &Dataset, width: usize, novel: &BTreeSet<NodeId>) -> Result<EvalReport> {
    dataset.check_against(&state.taxonomy)?;
    let depth = state.taxonomy.depth();
    let (mut all, mut base, mut nov) = (Tally::default(), Tally::default(), Tally::default());
    for t in [&mut all, &mut base, &mut nov] {
        t.levels = vec![0; depth];
    }
    let mut greedy_right = 0;
    let mut corrections = 0;
    for e in &dataset.examples {
        let truth = state.taxonomy.path_of(e.leaf)?;
        let beam = predict(state, &e.raw, width)?;
        let greedy = if width == 1 { beam.clone() } else { predict(state, &e.raw, 1)? };
        let right = beam.leaf == e.leaf;
        greedy_right += usize::from(greedy.leaf == e.leaf);
        corrections += usize::from(right && greedy.path != beam.path);
        let group = if novel.contains(&e.leaf) { &mut nov } else { &mut base };
        for tally in [&mut all, group] {
            tally.count += 1;
            tally.full += usize::from(right);
            for j in 1..=depth {
                tally.levels[j - 1] += usize::from(beam.path.at(j) == truth.at(j));
            }
        }
    }
    let n = dataset.len().max(1) as f64;
    Ok(EvalReport {
        beam_width: width,
        overall: all.finish(depth),
        base: base.finish(depth),
        novel: nov.finish(depth),
        greedy_full_path: greedy_right as f64 / n,
        corrections,
        correction_rate: corrections as f64 / n,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CosineSummary {
    /// Mean cosine over pairs of leaf prototypes with the same parent.
    pub sibling_leaves: f64,
    /// Mean cosine over pairs of leaf prototypes under different level-1 nodes.
    pub cross_top_leaves: f64,
    pub gap: f64,
    /// Mean cosine between each non-root prototype and its parent's.
    pub parent_child: f64,
    /// Mean cosine between each non-root prototype and the other nodes at its parent's level.
    pub cross_branch: f64,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn prototype_cosines(bank: &MemoryBank<f64>, t: &Taxonomy) -> Result<CosineSummary> {
    let leaves = t.leaves();
    let mut sib = Vec::new();
    let mut cross = Vec::new();
    for (i, &a) in leaves.iter().enumerate() {
        for &b in &leaves[i + 1..] {
            let c = cosine(bank.prototype(a), bank.prototype(b));
            if t.nodes()[a.0].parent == t.nodes()[b.0].parent {
                sib.push(c);
            }
            if t.depth() >= 1 && t.ancestor_at(a, 1)? != t.ancestor_at(b, 1)? {
                cross.push(c);
            }
        }
    }
    let mut pc = Vec::new();
    let mut cb = Vec::new();
    for n in t.nodes().iter().filter(|n| n.parent.is_some()) {
        let parent = n.parent.expect("non-root");
        pc.push(cosine(bank.prototype(n.id), bank.prototype(parent)));
        for other in t.nodes_at_level(n.level - 1) {
            if other != parent {
                cb.push(cosine(bank.prototype(n.id), bank.prototype(other)));
            }
        }
    }
    let (s, c) = (mean(&sib), mean(&cross));
    Ok(CosineSummary { sibling_leaves: s, cross_top_leaves: c, gap: s - c, parent_child: mean(&pc), cross_branch: mean(&cb) })
}

/// Tab-separated table: leaf name path, then one column per feature.
pub fn export_embeddings(state: &TrainState, dataset: &Dataset) -> Result<String> {
    dataset.check_against(&state.taxonomy)?;
    let mut out = String::from("path");
    for k in 0..state.adapter.feature_dim() {
        write!(out, "\tf{k}").expect("string write");
    }
    out.push('\n');
    for e in &dataset.examples {
        out.push_str(&state.taxonomy.name_path(e.leaf).join("/"));
        for v in state.adapter.embed(&e.raw)? {
            write!(out, "\t{v}").expect("string write");
        }
        out.push('\n');
    }
    Ok(out)
}
