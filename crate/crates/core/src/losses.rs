//! Hierarchical contrastive loss against the prototype memory, and the
//! probabilistic loss that trains each classifier's "others" output.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::MemoryBank;
use crate::model::HierarchicalHead;
use crate::numeric::{dot, log_sum_exp, norm, softmax, softmax_cross_entropy};
use crate::scalar::Scalar;
use crate::taxonomy::{LeafPath, NodeId, Taxonomy};

/// Level weighting 𝒢(j) for the attractive HiCL terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// 𝒢(j) = 1
    Constant,
    /// 𝒢(j) = j
    #[default]
    Linear,
    /// 𝒢(j) = j²
    Quadratic,
}

impl Aggregation {
    pub fn weight<T: Scalar>(self, level: usize) -> T {
        let j = T::of(level as f64);
        match self {
            Aggregation::Constant => T::one(),
            Aggregation::Linear => j,
            Aggregation::Quadratic => j * j,
        }
    }

    /// 𝒢(j) / Σ_{j'=0..=depth} 𝒢(j')
    pub fn normalized_weights<T: Scalar>(self, depth: usize) -> Result<Vec<T>> {
        let raw: Vec<T> = (0..=depth).map(|j| self.weight(j)).collect();
        let total: T = raw.iter().copied().sum();
        if total <= T::zero() {
            return Err(Error::InvalidParameter(format!("aggregation {self} sums to zero at depth {depth}")));
        }
        Ok(raw.into_iter().map(|w| w / total).collect())
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Constant => "constant",
            Aggregation::Linear => "linear",
            Aggregation::Quadratic => "quadratic",
        })
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" | "constant-1" | "const" | "1" => Ok(Aggregation::Constant),
            "linear" | "j" => Ok(Aggregation::Linear),
            "quadratic" | "j2" => Ok(Aggregation::Quadratic),
            other => Err(Error::UnknownAggregation(other.to_string())),
        }
    }
}

pub fn aggregation_weight<T: Scalar>(agg: &str, level: usize) -> Result<T> {
    Ok(agg.parse::<Aggregation>()?.weight(level))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiclConfig {
    pub tau: f64,
    pub agg: Aggregation,
}

impl Default for HiclConfig {
    fn default() -> Self {
        HiclConfig { tau: 0.2, agg: Aggregation::Linear }
    }
}

/// `N` features with their ground-truth paths.
#[derive(Clone, Debug)]
pub struct ForegroundBatch<T> {
    pub features: Vec<Vec<T>>,
    pub paths: Vec<LeafPath>,
}

impl<T: Scalar> ForegroundBatch<T> {
    pub fn new(features: Vec<Vec<T>>, paths: Vec<LeafPath>) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if features.len() != paths.len() {
            return Err(Error::Dimension { expected: features.len(), got: paths.len() });
        }
        Ok(ForegroundBatch { features, paths })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Weighted InfoNCE on the unit sphere.
///
/// For each feature `x` with `x̄ = x/‖x‖`, `s_m = x̄·p_m / tau` over all
/// prototypes and `targets` holding `(prototype, weight)` pairs with weights
/// summing to one, the per-example loss is `Σ_w w·(logΣexp(s) − s_target)`.
/// Returns the mean over examples and its gradient w.r.t. each raw `x`.
pub fn weighted_prototype_nce<T: Scalar>(
    features: &[Vec<T>],
    targets: &[Vec<(usize, T)>],
    prototypes: &[Vec<T>],
    tau: T,
) -> Result<(T, Vec<Vec<T>>)> {
    if features.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if tau <= T::zero() {
        return Err(Error::InvalidParameter("tau must be positive".into()));
    }
    let n = T::of(features.len() as f64);
    let mut loss = T::zero();
    let mut grads = Vec::with_capacity(features.len());
    for (x, tgt) in features.iter().zip(targets) {
        let len = norm(x);
        if len == T::zero() || !len.is_finite() {
            return Err(Error::ZeroNorm);
        }
        let xbar: Vec<T> = x.iter().map(|&v| v / len).collect();
        let scores: Vec<T> = prototypes.iter().map(|p| dot(&xbar, p) / tau).collect();
        let lse = log_sum_exp(&scores);
        let mut li = T::zero();
        // dℓ/ds_m = p_m − w_m
        let mut ds = softmax(&scores);
        for &(m, w) in tgt {
            li += w * (lse - scores[m]);
            ds[m] -= w;
        }
        loss += li;
        // dℓ/dx̄ = (1/τ) Σ_m ds_m·p_m
        let mut gbar = vec![T::zero(); x.len()];
        for (d, p) in ds.iter().zip(prototypes) {
            for (g, &pv) in gbar.iter_mut().zip(p) {
                *g += *d * pv;
            }
        }
        // through x̄ = x/‖x‖: (I − x̄x̄ᵀ)·g / ‖x‖
        let radial = dot(&gbar, &xbar);
        let scale = n * tau * len;
        grads.push(gbar.iter().zip(&xbar).map(|(&g, &xb)| (g - radial * xb) / scale).collect());
    }
    Ok((loss / n, grads))
}

/// Hierarchical contrastive loss over the whole memory bank. Prototypes are
/// constants here; gradients are w.r.t. the un-normalized features.
pub fn hicl_loss<T: Scalar>(batch: &ForegroundBatch<T>, bank: &MemoryBank<T>, cfg: &HiclConfig) -> Result<(T, Vec<Vec<T>>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let weights: Vec<T> = cfg.agg.normalized_weights(bank.depth())?;
    let targets = batch
        .paths
        .iter()
        .map(|path| {
            if path.len() != weights.len() {
                return Err(Error::InvalidParameter(format!("path length {} for bank depth {}", path.len(), bank.depth())));
            }
            Ok(path
                .nodes()
                .iter()
                .zip(&weights)
                .filter(|(_, w)| **w != T::zero())
                .map(|(n, &w)| {
                    if n.0 >= bank.len() {
                        Err(Error::UnknownNode(*n))
                    } else {
                        Ok((n.0, w))
                    }
                })
                .collect::<Result<Vec<_>>>()?)
        })
        .collect::<Result<Vec<_>>>()?;
    weighted_prototype_nce(&batch.features, &targets, bank.prototypes(), T::of(cfg.tau))
}

/// "Others" training probability per internal node:
/// `(subtree instances / all instances) · beta`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbTable<T> {
    values: BTreeMap<NodeId, T>,
    pub beta: T,
    pub total: u64,
}

impl<T: Scalar> ProbTable<T> {
    pub fn get(&self, node: NodeId) -> Option<T> {
        self.values.get(&node).copied()
    }

    pub fn values(&self) -> &BTreeMap<NodeId, T> {
        &self.values
    }
}

pub fn compute_node_probabilities<T: Scalar>(t: &Taxonomy, beta: T) -> Result<ProbTable<T>> {
    if !(beta >= T::zero() && beta <= T::one()) {
        return Err(Error::InvalidParameter(format!("beta must lie in [0, 1], got {beta}")));
    }
    let total = t.node(t.root())?.instance_count;
    if total == 0 {
        return Err(Error::NoInstances);
    }
    let n = T::of(total as f64);
    let values = t
        .internal_nodes()
        .into_iter()
        .map(|id| (id, T::of(t.nodes()[id.0].instance_count as f64) / n * beta))
        .collect();
    Ok(ProbTable { values, beta, total })
}

/// One cross-entropy term of the probabilistic loss: classifier `node` on
/// example `example` with one-hot `target` (a child index, or the others index).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProbTerm {
    pub node: NodeId,
    pub example: usize,
    pub target: usize,
    pub others: bool,
}

/// Bernoulli outcomes of the "others" indicator for every off-path
/// (classifier, example) pair, in classifier-id then example order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OthersDraws {
    pub fired: BTreeMap<NodeId, Vec<bool>>,
}

impl OthersDraws {
    /// One uniform draw per off-path pair (on-path pairs consume nothing);
    /// the pair fires when the draw falls below the node's probability.
    pub fn sample<T: Scalar, R: Rng + ?Sized>(t: &Taxonomy, paths: &[LeafPath], table: &ProbTable<T>, rng: &mut R) -> Self {
        let mut fired = BTreeMap::new();
        for node in t.internal_nodes() {
            let p = table.get(node).map_or(0.0, Scalar::as_f64);
            let row = paths
                .iter()
                .map(|path| {
                    if path.contains(node) {
                        false
                    } else {
                        let u: f64 = rng.random();
                        u < p
                    }
                })
                .collect();
            fired.insert(node, row);
        }
        OthersDraws { fired }
    }

    pub fn count(&self) -> usize {
        self.fired.values().flatten().filter(|&&f| f).count()
    }
}

/// Enumerates the cross-entropy terms: every on-path classifier trains its
/// child index, every fired off-path classifier trains its others index.
pub fn prob_terms(t: &Taxonomy, paths: &[LeafPath], draws: &OthersDraws) -> Result<Vec<ProbTerm>> {
    for path in paths {
        let ok = t.is_leaf(path.leaf()) && t.path_of(path.leaf()).is_ok_and(|p| &p == path);
        if !ok {
            let names = path.nodes().iter().map(|n| n.to_string()).collect::<Vec<_>>().join("/");
            return Err(Error::LabelNotInTaxonomy(names));
        }
    }
    let mut terms = Vec::new();
    for node in t.internal_nodes() {
        let tn = &t.nodes()[node.0];
        let fired = draws.fired.get(&node);
        for (i, path) in paths.iter().enumerate() {
            if path.contains(node) {
                let next = path.at(tn.level + 1);
                let target = tn.child_index(next).expect("path steps to a child");
                terms.push(ProbTerm { node, example: i, target, others: false });
            } else if fired.and_then(|f| f.get(i)).copied().unwrap_or(false) {
                terms.push(ProbTerm { node, example: i, target: tn.children.len(), others: true });
            }
        }
    }
    Ok(terms)
}

/// Loss and per-term logit gradients given the logits of each term.
/// `classifiers` is M, the normalizer is `M·N`.
pub fn prob_loss_from_logits<T: Scalar>(terms: &[ProbTerm], logits: &[Vec<T>], classifiers: usize, n: usize) -> (T, Vec<Vec<T>>) {
    let denom = T::of((classifiers * n) as f64);
    let mut loss = T::zero();
    let mut grads = Vec::with_capacity(terms.len());
    for (term, z) in terms.iter().zip(logits) {
        let (l, mut g) = softmax_cross_entropy(z, term.target);
        loss += l;
        for v in g.iter_mut() {
            *v /= denom;
        }
        grads.push(g);
    }
    (loss / denom, grads)
}

#[derive(Clone, Debug)]
pub struct ProbLossOutput<T> {
    pub loss: T,
    pub terms: Vec<ProbTerm>,
    /// d loss / d logits, aligned with `terms`.
    pub logit_grads: Vec<Vec<T>>,
    pub others_events: usize,
}

/// Probabilistic loss with pre-drawn indicator outcomes.
pub fn prob_loss_with_draws<T: Scalar>(
    batch: &ForegroundBatch<T>,
    head: &HierarchicalHead<T>,
    t: &Taxonomy,
    draws: &OthersDraws,
) -> Result<ProbLossOutput<T>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let terms = prob_terms(t, &batch.paths, draws)?;
    let logits = terms
        .iter()
        .map(|term| head.logits(term.node, &batch.features[term.example]))
        .collect::<Result<Vec<_>>>()?;
    let (loss, logit_grads) = prob_loss_from_logits(&terms, &logits, head.len(), batch.len());
    let others_events = terms.iter().filter(|t| t.others).count();
    Ok(ProbLossOutput { loss, terms, logit_grads, others_events })
}

/// Probabilistic loss, drawing the "others" indicators from `rng`.
pub fn prob_loss<T: Scalar, R: Rng + ?Sized>(
    batch: &ForegroundBatch<T>,
    head: &HierarchicalHead<T>,
    t: &Taxonomy,
    table: &ProbTable<T>,
    rng: &mut R,
) -> Result<ProbLossOutput<T>> {
    let draws = OthersDraws::sample(t, &batch.paths, table, rng);
    prob_loss_with_draws(batch, head, t, &draws)
}

/// In-scope part of the joint objective: `λ₁·HiCL + λ₂·prob`.
pub fn total_loss<T: Scalar>(hicl: T, prob: T, lambda1: T, lambda2: T) -> T {
    lambda1 * hicl + lambda2 * prob
}
