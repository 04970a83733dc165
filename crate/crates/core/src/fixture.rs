//! A small hand-built case where greedy descent goes wrong and beam search,
//! helped by a trained "others" output, recovers.
//!
//! Three level-1 branches `a`, `b`, `c` with two leaves each. The root
//! classifier ignores its input and always prefers `a` (0.55) over `b`
//! (0.40). The three child classifiers are trained with the probabilistic
//! loss at `beta = 1`, so `a`'s classifier learns to answer "others" on
//! features from `b`'s region. For a query from `b`, greedy follows `a`
//! while the beam keeps `b` and finds the right leaf.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::inference::{beam_predict, greedy_predict, BeamConfig, PathPrediction};
use crate::losses::{compute_node_probabilities, prob_loss_from_logits, prob_terms, OthersDraws};
use crate::model::HierarchicalHead;
use crate::numeric::{NetGrads, Sgd};
use crate::rng;
use crate::taxonomy::{balanced, LeafPath, NodeId, Taxonomy};

const FEATURE_DIM: usize = 4;
const HIDDEN: usize = 8;
const ROOT_PROBS: [f64; 4] = [0.55, 0.40, 0.04, 0.01];
const PER_LEAF: usize = 6;
const ITERATIONS: usize = 400;

#[derive(Clone, Debug)]
pub struct CorrectionFixture {
    pub taxonomy: Taxonomy,
    pub head: HierarchicalHead<f64>,
    pub query: Vec<f64>,
    pub truth: NodeId,
    /// Level-1 node the root prefers for `query`.
    pub wrong_branch: NodeId,
}

/// Branch `k` in dims 0..3, leaf side in dim 3.
fn center(branch: usize, side: usize) -> Vec<f64> {
    let mut x = vec![0.0; FEATURE_DIM];
    x[branch] = 1.0;
    x[3] = if side == 0 { 0.5 } else { -0.5 };
    x
}

impl CorrectionFixture {
    pub fn build() -> Result<Self> {
        let taxonomy = balanced(&[3, 2], PER_LEAF as u64);
        let mut head = HierarchicalHead::<f64>::build(&taxonomy, FEATURE_DIM, HIDDEN, 7);
        let root = taxonomy.root();
        {
            let net = &mut head.classifiers_mut().get_mut(&root).expect("root classifier").net;
            for v in net.w1.as_mut_slice().iter_mut().chain(net.b1.iter_mut()).chain(net.w2.as_mut_slice().iter_mut()) {
                *v = 0.0;
            }
            net.b2 = ROOT_PROBS.iter().map(|p| p.ln()).collect();
        }

        let mut jitter = rng::derive(0, &[rng::DATA]);
        let mut features = Vec::new();
        let mut paths: Vec<LeafPath> = Vec::new();
        for (k, &leaf) in taxonomy.leaves().iter().enumerate() {
            for _ in 0..PER_LEAF {
                let x: Vec<f64> =
                    center(k / 2, k % 2).into_iter().map(|v| v + 0.05 * jitter.sample::<f64, _>(StandardNormal)).collect();
                features.push(x);
                paths.push(taxonomy.path_of(leaf)?);
            }
        }

        let table = compute_node_probabilities(&taxonomy, 1.0)?;
        let mut draws_rng = rng::derive(0, &[rng::OTHERS]);
        let mut sgd = Sgd::new(1.0);
        for _ in 0..ITERATIONS {
            let draws = OthersDraws::sample(&taxonomy, &paths, &table, &mut draws_rng);
            let terms = prob_terms(&taxonomy, &paths, &draws)?;
            let mut grads: Vec<(NodeId, NetGrads<f64>)> = Vec::new();
            let mut caches = Vec::with_capacity(terms.len());
            let mut logits = Vec::with_capacity(terms.len());
            for term in &terms {
                let (z, cache) = head.classifier(term.node)?.net.forward(&features[term.example], false)?;
                logits.push(z);
                caches.push(cache);
            }
            let (_, logit_grads) = prob_loss_from_logits(&terms, &logits, head.len(), paths.len());
            for ((term, cache), g) in terms.iter().zip(&caches).zip(&logit_grads) {
                if term.node == root {
                    continue;
                }
                let net = &head.classifier(term.node)?.net;
                let (pg, _) = net.backward(cache, g)?;
                match grads.iter_mut().find(|(id, _)| *id == term.node) {
                    Some((_, acc)) => acc.accumulate(&pg),
                    None => grads.push((term.node, pg)),
                }
            }
            for (id, g) in &grads {
                let c = head.classifiers_mut().get_mut(id).expect("classifier");
                sgd.step_net(&format!("head.{}", id.0), &mut c.net, g)?;
            }
        }

        let level1 = taxonomy.nodes_at_level(1);
        let truth = taxonomy.subtree_leaves(level1[1])?[0];
        Ok(CorrectionFixture { query: center(1, 0), truth, wrong_branch: level1[0], taxonomy, head })
    }

    pub fn greedy(&self) -> Result<PathPrediction<f64>> {
        greedy_predict(&self.head, &self.taxonomy, &self.query)
    }

    pub fn beam(&self, width: usize) -> Result<PathPrediction<f64>> {
        beam_predict(&self.head, &self.taxonomy, &self.query, BeamConfig { width })
    }

    /// "Others" probability of the wrong branch's classifier on the query.
    pub fn others_probability(&self) -> Result<f64> {
        let p = self.head.classify_node(self.wrong_branch, &self.query)?;
        Ok(p[p.len() - 1])
    }
}
