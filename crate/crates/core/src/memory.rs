//! Prototype memory: one unit-norm vector per taxonomy node, updated by an
//! exponential moving average along each example's ground-truth path.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::FeatureAdapter;
use crate::numeric::{norm, normalized};
use crate::rng;
use crate::scalar::Scalar;
use crate::taxonomy::{LeafPath, NodeId, Taxonomy};

/// EMA retention for a level-`level` memory: `1 − eps^(depth − level + 1)`.
/// Leaf-level memories (level = depth) move fastest.
pub fn momentum_coefficient<T: Scalar>(level: usize, depth: usize, eps: T) -> Result<T> {
    if !(eps > T::zero() && eps < T::one()) {
        return Err(Error::InvalidParameter(format!("eps must lie in (0, 1), got {eps}")));
    }
    if level > depth {
        return Err(Error::InvalidParameter(format!("level {level} exceeds depth {depth}")));
    }
    Ok(T::one() - eps.powi((depth - level + 1) as i32))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitMode {
    /// Every leaf must have at least one example.
    Strict,
    /// Nodes without examples get a seeded random unit vector.
    Fallback,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank<T> {
    prototypes: Vec<Vec<T>>,
    dim: usize,
    depth: usize,
    eps: T,
    renormalize: bool,
}

fn random_unit<T: Scalar>(dim: usize, seed: u64, node: NodeId) -> Vec<T> {
    let mut r = rng::derive(seed, &[rng::MEMORY, node.0 as u64]);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 0.0 {
            return v.into_iter().map(|a| T::of(a / n)).collect();
        }
    }
}

/// Unit-normalized mean of the normalized features that fall in each node's subtree.
fn subtree_means<T: Scalar>(t: &Taxonomy, dim: usize, features: &[(NodeId, Vec<T>)]) -> Result<Vec<Option<Vec<T>>>> {
    let mut sums: Vec<Option<Vec<T>>> = vec![None; t.len()];
    for (leaf, x) in features {
        if x.len() != dim {
            return Err(Error::Dimension { expected: dim, got: x.len() });
        }
        let xbar = normalized(x)?;
        for &node in t.path_of(*leaf)?.nodes() {
            let acc = sums[node.0].get_or_insert_with(|| vec![T::zero(); dim]);
            for (a, &v) in acc.iter_mut().zip(&xbar) {
                *a += v;
            }
        }
    }
    Ok(sums.into_iter().map(|s| s.and_then(|v| normalized(&v).ok())).collect())
}

impl<T: Scalar> MemoryBank<T> {
    /// Builds a bank whose prototypes are the normalized subtree means of
    /// `features` (leaf label, feature vector).
    pub fn from_features(
        t: &Taxonomy,
        dim: usize,
        features: &[(NodeId, Vec<T>)],
        eps: T,
        renormalize: bool,
        mode: InitMode,
        seed: u64,
    ) -> Result<Self> {
        momentum_coefficient(0, t.depth(), eps)?;
        if mode == InitMode::Strict {
            if features.is_empty() {
                return Err(Error::EmptyFeatureSet);
            }
            for leaf in t.leaves() {
                if !features.iter().any(|(l, _)| *l == leaf) {
                    return Err(Error::InvalidParameter(format!("leaf {leaf} has no example for memory initialization")));
                }
            }
        }
        let means = subtree_means(t, dim, features)?;
        let prototypes = means
            .into_iter()
            .enumerate()
            .map(|(i, m)| m.unwrap_or_else(|| random_unit(dim, seed, NodeId(i))))
            .collect();
        Ok(MemoryBank { prototypes, dim, depth: t.depth(), eps, renormalize })
    }

    /// Adds prototypes for nodes of `new_t` beyond `old_t`'s ids, initialized
    /// from `features` (labels in `new_t`); existing prototypes are untouched.
    pub fn extend(&self, new_t: &Taxonomy, features: &[(NodeId, Vec<T>)], seed: u64) -> Result<Self> {
        if new_t.len() < self.prototypes.len() || new_t.depth() != self.depth {
            return Err(Error::InvalidParameter("bank does not embed into the new taxonomy".into()));
        }
        let means = subtree_means(new_t, self.dim, features)?;
        let mut out = self.clone();
        for (i, m) in means.into_iter().enumerate().skip(self.prototypes.len()) {
            out.prototypes.push(m.unwrap_or_else(|| random_unit(self.dim, seed, NodeId(i))));
        }
        Ok(out)
    }

    pub fn from_prototypes(prototypes: Vec<Vec<T>>, depth: usize, eps: T, renormalize: bool) -> Result<Self> {
        let dim = prototypes.first().map_or(0, Vec::len);
        if prototypes.iter().any(|p| p.len() != dim) {
            return Err(Error::InvalidParameter("prototype dimensions differ".into()));
        }
        momentum_coefficient(0, depth, eps)?;
        Ok(MemoryBank { prototypes, dim, depth, eps, renormalize })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn eps(&self) -> T {
        self.eps
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn prototype(&self, id: NodeId) -> &[T] {
        &self.prototypes[id.0]
    }

    pub fn prototypes(&self) -> &[Vec<T>] {
        &self.prototypes
    }

    pub fn set_renormalize(&mut self, on: bool) {
        self.renormalize = on;
    }

    /// `M ← f(j)·M + (1 − f(j))·x̄` for every node on `path`, then (by
    /// default) back onto the unit sphere. Nodes off the path are untouched.
    pub fn ema_update(&mut self, x: &[T], path: &LeafPath) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Dimension { expected: self.dim, got: x.len() });
        }
        if path.len() != self.depth + 1 {
            return Err(Error::InvalidParameter(format!("path length {} for depth {}", path.len(), self.depth)));
        }
        if let Some(bad) = path.nodes().iter().find(|n| n.0 >= self.prototypes.len()) {
            return Err(Error::UnknownNode(*bad));
        }
        let xbar = normalized(x)?;
        for (level, &node) in path.nodes().iter().enumerate() {
            let f = momentum_coefficient(level, self.depth, self.eps)?;
            let keep = T::one() - f;
            let m = &mut self.prototypes[node.0];
            for (mi, &xi) in m.iter_mut().zip(&xbar) {
                *mi = f * *mi + keep * xi;
            }
            if self.renormalize {
                let n = norm(m);
                if n > T::zero() {
                    for mi in m.iter_mut() {
                        *mi /= n;
                    }
                } else {
                    m.copy_from_slice(&xbar);
                }
            }
        }
        Ok(())
    }
}

/// Embeds every `(leaf, raw)` example with `adapter` and builds the bank
/// from the resulting features.
pub fn init_memories(
    t: &Taxonomy,
    examples: &[(NodeId, Vec<f64>)],
    adapter: &FeatureAdapter<f64>,
    eps: f64,
    renormalize: bool,
    mode: InitMode,
    seed: u64,
) -> Result<MemoryBank<f64>> {
    let features = examples
        .iter()
        .map(|(l, raw)| Ok((*l, adapter.embed(raw)?)))
        .collect::<Result<Vec<_>>>()?;
    MemoryBank::from_features(t, adapter.feature_dim(), &features, eps, renormalize, mode, seed)
}
