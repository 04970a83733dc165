//! Feature adapter and hierarchical head.
//!
//! The head owns one [`NodeClassifier`] per internal taxonomy node. A
//! classifier for a node with `d` children has `d + 1` outputs: indices
//! `0..d` follow the node's child order and index `d` is the "others" class.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numeric::{softmax, TwoLayerNet};
use crate::rng;
use crate::scalar::Scalar;
use crate::taxonomy::{NodeId, Taxonomy};

/// Trainable map from raw inputs to box-feature analogues. The exported
/// feature is the final-layer output with no trailing nonlinearity.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureAdapter<T> {
    pub net: TwoLayerNet<T>,
}

impl<T: Scalar> FeatureAdapter<T> {
    pub fn new(input_dim: usize, hidden: usize, feature_dim: usize, seed: u64) -> Self {
        let mut r = rng::derive(seed, &[rng::INIT, u64::MAX]);
        FeatureAdapter { net: TwoLayerNet::random(input_dim, hidden, feature_dim, &mut r) }
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.net.output_dim()
    }

    pub fn embed(&self, raw: &[T]) -> Result<Vec<T>> {
        self.net.apply(raw)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeClassifier<T> {
    pub node: NodeId,
    pub net: TwoLayerNet<T>,
}

impl<T: Scalar> NodeClassifier<T> {
    pub fn child_count(&self) -> usize {
        self.net.output_dim() - 1
    }

    pub fn others_index(&self) -> usize {
        self.child_count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HierarchicalHead<T> {
    classifiers: BTreeMap<NodeId, NodeClassifier<T>>,
    feature_dim: usize,
    hidden: usize,
}

fn fresh_classifier<T: Scalar>(node: NodeId, children: usize, feature_dim: usize, hidden: usize, seed: u64) -> NodeClassifier<T> {
    let mut r = rng::derive(seed, &[rng::INIT, node.0 as u64]);
    NodeClassifier { node, net: TwoLayerNet::random(feature_dim, hidden, children + 1, &mut r) }
}

impl<T: Scalar> HierarchicalHead<T> {
    /// One seeded classifier per internal node of `t`.
    pub fn build(t: &Taxonomy, feature_dim: usize, hidden: usize, seed: u64) -> Self {
        let classifiers = t
            .internal_nodes()
            .into_iter()
            .map(|id| {
                let d = t.nodes()[id.0].children.len();
                (id, fresh_classifier(id, d, feature_dim, hidden, seed))
            })
            .collect();
        HierarchicalHead { classifiers, feature_dim, hidden }
    }

    pub fn from_classifiers(classifiers: BTreeMap<NodeId, NodeClassifier<T>>, feature_dim: usize, hidden: usize) -> Self {
        HierarchicalHead { classifiers, feature_dim, hidden }
    }

    /// Grows the head from `old_t` to `new_t`, where `new_t` extends `old_t`
    /// (same ids and name paths for old nodes, child lists only appended to).
    /// Existing output rows are kept bit-for-bit; new child rows go in front
    /// of the "others" row, which stays last.
    pub fn extend(&self, old_t: &Taxonomy, new_t: &Taxonomy, seed: u64) -> Result<Self> {
        for old in old_t.nodes() {
            let new = new_t.node(old.id).map_err(|_| Error::ChildOrderRegression(old.id))?;
            if old_t.name_path(old.id) != new_t.name_path(old.id)
                || new.children.len() < old.children.len()
                || new.children[..old.children.len()] != old.children[..]
            {
                return Err(Error::ChildOrderRegression(old.id));
            }
        }
        let mut out = self.clone();
        for id in new_t.internal_nodes() {
            let d = new_t.nodes()[id.0].children.len();
            match out.classifiers.get_mut(&id) {
                Some(c) => {
                    let old_d = c.child_count();
                    if d < old_d {
                        return Err(Error::ChildOrderRegression(id));
                    }
                    for k in old_d..d {
                        let mut r = rng::derive(seed, &[rng::INIT, id.0 as u64, k as u64 + 1]);
                        let fresh: TwoLayerNet<T> = TwoLayerNet::random(1, self.hidden, 1, &mut r);
                        // insert before the others row so it stays last
                        c.net.w2.insert_row(k, fresh.w2.row(0));
                        c.net.b2.insert(k, T::zero());
                    }
                }
                None => {
                    out.classifiers.insert(id, fresh_classifier(id, d, self.feature_dim, self.hidden, seed));
                }
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.classifiers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classifiers.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn classifiers(&self) -> &BTreeMap<NodeId, NodeClassifier<T>> {
        &self.classifiers
    }

    pub fn classifiers_mut(&mut self) -> &mut BTreeMap<NodeId, NodeClassifier<T>> {
        &mut self.classifiers
    }

    pub fn classifier(&self, node: NodeId) -> Result<&NodeClassifier<T>> {
        self.classifiers.get(&node).ok_or(Error::IsALeaf(node))
    }

    pub fn logits(&self, node: NodeId, x: &[T]) -> Result<Vec<T>> {
        self.classifier(node)?.net.apply(x)
    }

    /// Softmax over the `d + 1` outputs of `node`'s classifier.
    pub fn classify_node(&self, node: NodeId, x: &[T]) -> Result<Vec<T>> {
        Ok(softmax(&self.logits(node, x)?))
    }

    /// True when the classifier keys and output sizes mirror `t`.
    pub fn matches(&self, t: &Taxonomy) -> bool {
        let internal = t.internal_nodes();
        internal.len() == self.classifiers.len()
            && internal.iter().all(|id| {
                self.classifiers
                    .get(id)
                    .is_some_and(|c| c.child_count() == t.nodes()[id.0].children.len())
            })
    }
}

/// See [`HierarchicalHead::build`].
pub fn build_head<T: Scalar>(t: &Taxonomy, feature_dim: usize, hidden: usize, seed: u64) -> HierarchicalHead<T> {
    HierarchicalHead::build(t, feature_dim, hidden, seed)
}

/// See [`HierarchicalHead::extend`].
pub fn extend_head<T: Scalar>(head: &HierarchicalHead<T>, old_t: &Taxonomy, new_t: &Taxonomy, seed: u64) -> Result<HierarchicalHead<T>> {
    head.extend(old_t, new_t, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::DenseMat;
    use crate::taxonomy::balanced;
    use std::collections::BTreeSet;

    #[test]
    fn chain_head_has_binary_classifiers() {
        let t = balanced(&[1, 1, 1, 1], 1);
        let head = HierarchicalHead::<f64>::build(&t, 4, 8, 0);
        assert_eq!(head.len(), 4);
        assert!(head.classifiers().values().all(|c| c.net.output_dim() == 2));
        assert!(head.matches(&t));
    }

    #[test]
    fn fanout_three_depth_two() {
        let t = balanced(&[3, 3], 1);
        let head = HierarchicalHead::<f64>::build(&t, 4, 8, 0);
        assert_eq!(head.len(), 4);
        assert_eq!(head.classifier(t.root()).unwrap().net.output_dim(), 4);
    }

    #[test]
    fn build_is_deterministic() {
        let t = balanced(&[2, 2], 1);
        assert_eq!(HierarchicalHead::<f64>::build(&t, 3, 5, 7), HierarchicalHead::<f64>::build(&t, 3, 5, 7));
        assert_ne!(HierarchicalHead::<f64>::build(&t, 3, 5, 7), HierarchicalHead::<f64>::build(&t, 3, 5, 8));
    }

    #[test]
    fn zero_classifier_is_uniform() {
        let t = balanced(&[3], 1);
        let mut head = HierarchicalHead::<f64>::build(&t, 2, 4, 0);
        let c = head.classifiers_mut().get_mut(&t.root()).unwrap();
        c.net = TwoLayerNet::zeros(2, 4, 4);
        let p = head.classify_node(t.root(), &[0.3, -0.2]).unwrap();
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!(matches!(head.classify_node(NodeId(1), &[0.0, 0.0]), Err(Error::IsALeaf(_))));
    }

    #[test]
    fn hand_set_two_logits() {
        let t = balanced(&[1], 1);
        let mut head = HierarchicalHead::<f64>::build(&t, 1, 1, 0);
        let c = head.classifiers_mut().get_mut(&t.root()).unwrap();
        c.net = TwoLayerNet::zeros(1, 1, 2);
        c.net.b2 = vec![0.0, 3.0f64.ln()];
        let p = head.classify_node(t.root(), &[1.0]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15 && (p[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn identity_adapter_embeds_nonnegative_input() {
        let mut a = FeatureAdapter::<f64>::new(3, 3, 3, 0);
        a.net.w1 = DenseMat::identity(3);
        a.net.w2 = DenseMat::identity(3);
        assert_eq!(a.embed(&[1.0, 0.0, 2.5]).unwrap(), vec![1.0, 0.0, 2.5]);
        a.net = TwoLayerNet::zeros(3, 3, 3);
        assert_eq!(a.embed(&[1.0, 0.0, 2.5]).unwrap(), vec![0.0; 3]);
        assert!(a.embed(&[1.0]).is_err());
    }

    #[test]
    fn extend_preserves_old_logits() {
        let full = balanced(&[3, 2], 1);
        let leaves = full.leaves();
        let base_leaves: BTreeSet<_> = leaves[..4].iter().copied().collect();
        let novel_leaves: BTreeSet<_> = leaves[4..].iter().copied().collect();
        let base = full.restrict(&base_leaves).unwrap();
        let all = base.merge(&full.restrict(&novel_leaves).unwrap()).unwrap();
        let head = HierarchicalHead::<f64>::build(&base, 3, 6, 1);
        let grown = head.extend(&base, &all, 1).unwrap();
        assert_eq!(grown.len(), 4);
        assert!(grown.matches(&all));
        let x = [0.4, -1.0, 0.3];
        let before = head.logits(base.root(), &x).unwrap();
        let after = grown.logits(all.root(), &x).unwrap();
        assert_eq!(after.len(), 4);
        assert_eq!(before[..2], after[..2]);
        // the others logit moved to the end unchanged
        assert_eq!(before[2], after[3]);
        assert_eq!(head.extend(&base, &base, 1).unwrap(), head);
    }

    #[test]
    fn extend_rejects_reordered_children() {
        let t = balanced(&[2, 1], 1);
        let head = HierarchicalHead::<f64>::build(&t, 2, 2, 0);
        let swapped = Taxonomy::parse(&t.to_text().replace("n1_1", "tmp").replace("n1_2", "n1_1").replace("tmp", "n1_2")).unwrap();
        assert!(matches!(head.extend(&t, &swapped, 0), Err(Error::ChildOrderRegression(_))));
    }
}
