//! Labeled feature datasets: a synthetic hierarchical-Gaussian generator,
//! K-shot episode sampling, the per-class test reservation rule, and the
//! JSON dataset container.
//!
//! Container layout:
//!
//! ```json
//! {
//!   "format": "hiclpl-dataset",
//!   "version": 1,
//!   "taxonomy_fingerprint": "<sha256 hex>",
//!   "input_dim": 64,
//!   "examples": [{"id": 0, "leaf": 5, "split": "train", "source": "synthetic"}],
//!   "features": [[0.1, -0.3, ...]]
//! }
//! ```
//!
//! `features[i]` belongs to `examples[i]`; `leaf` is a node id of the
//! taxonomy named by the fingerprint.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::taxonomy::{NodeId, SplitSpec, Taxonomy};

pub const FORMAT: &str = "hiclpl-dataset";
pub const VERSION: u32 = 1;
/// Examples per class kept out of the test reservation (supports 10-shot runs).
pub const TEST_RESERVE: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceTag {
    Synthetic,
    Ingested,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledExample {
    pub id: u64,
    pub raw: Vec<f64>,
    pub leaf: NodeId,
    pub split: SplitTag,
    pub source: SourceTag,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub taxonomy_fingerprint: String,
    pub input_dim: usize,
    pub examples: Vec<LabeledExample>,
}

#[derive(Serialize, Deserialize)]
struct ExampleRecord {
    id: u64,
    leaf: NodeId,
    split: SplitTag,
    source: SourceTag,
}

#[derive(Serialize, Deserialize)]
struct DatasetDocument {
    format: String,
    version: u32,
    taxonomy_fingerprint: String,
    input_dim: usize,
    examples: Vec<ExampleRecord>,
    features: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn empty(t: &Taxonomy, input_dim: usize) -> Self {
        Dataset { taxonomy_fingerprint: t.fingerprint(), input_dim, examples: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn to_json(&self) -> String {
        let doc = DatasetDocument {
            format: FORMAT.into(),
            version: VERSION,
            taxonomy_fingerprint: self.taxonomy_fingerprint.clone(),
            input_dim: self.input_dim,
            examples: self
                .examples
                .iter()
                .map(|e| ExampleRecord { id: e.id, leaf: e.leaf, split: e.split, source: e.source })
                .collect(),
            features: self.examples.iter().map(|e| e.raw.clone()).collect(),
        };
        serde_json::to_string(&doc).expect("dataset serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: DatasetDocument =
            serde_json::from_str(text).map_err(|e| Error::MalformedDocument(format!("dataset: {e}")))?;
        if doc.format != FORMAT || doc.version != VERSION {
            return Err(Error::MalformedDocument(format!("unsupported dataset format {} v{}", doc.format, doc.version)));
        }
        if doc.examples.len() != doc.features.len() {
            return Err(Error::MalformedDocument("example and feature counts differ".into()));
        }
        let examples = doc
            .examples
            .into_iter()
            .zip(doc.features)
            .map(|(r, raw)| {
                if raw.len() != doc.input_dim {
                    return Err(Error::Dimension { expected: doc.input_dim, got: raw.len() });
                }
                Ok(LabeledExample { id: r.id, raw, leaf: r.leaf, split: r.split, source: r.source })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { taxonomy_fingerprint: doc.taxonomy_fingerprint, input_dim: doc.input_dim, examples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Fails unless the dataset was labeled against `t` and every label is a leaf of it.
    pub fn check_against(&self, t: &Taxonomy) -> Result<()> {
        let fp = t.fingerprint();
        if fp != self.taxonomy_fingerprint {
            return Err(Error::FingerprintMismatch { expected: fp, found: self.taxonomy_fingerprint.clone() });
        }
        for e in &self.examples {
            if !t.is_leaf(e.leaf) {
                return Err(Error::LabelNotInTaxonomy(format!("example {} has non-leaf label {}", e.id, e.leaf)));
            }
        }
        Ok(())
    }

    /// Re-expresses labels from `from` in `to` by leaf name path.
    pub fn relabel(&self, from: &Taxonomy, to: &Taxonomy) -> Result<Self> {
        let mut out = self.clone();
        out.taxonomy_fingerprint = to.fingerprint();
        for e in &mut out.examples {
            e.leaf = to.translate(from, e.leaf)?;
        }
        Ok(out)
    }

    pub fn filter(&self, keep: impl Fn(&LabeledExample) -> bool) -> Self {
        Dataset {
            taxonomy_fingerprint: self.taxonomy_fingerprint.clone(),
            input_dim: self.input_dim,
            examples: self.examples.iter().filter(|e| keep(e)).cloned().collect(),
        }
    }

    pub fn with_split(&self, split: SplitTag) -> Self {
        self.filter(|e| e.split == split)
    }

    pub fn restricted_to(&self, leaves: &BTreeSet<NodeId>) -> Self {
        self.filter(|e| leaves.contains(&e.leaf))
    }

    pub fn leaf_counts(&self) -> BTreeMap<NodeId, u64> {
        let mut counts = BTreeMap::new();
        for e in &self.examples {
            *counts.entry(e.leaf).or_insert(0) += 1;
        }
        counts
    }

    /// Example indices grouped by leaf, in dataset order.
    pub fn indices_by_leaf(&self) -> BTreeMap<NodeId, Vec<usize>> {
        let mut out: BTreeMap<NodeId, Vec<usize>> = BTreeMap::new();
        for (i, e) in self.examples.iter().enumerate() {
            out.entry(e.leaf).or_default().push(i);
        }
        out
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Dataset {
            taxonomy_fingerprint: self.taxonomy_fingerprint.clone(),
            input_dim: self.input_dim,
            examples: idx.iter().map(|&i| self.examples[i].clone()).collect(),
        }
    }

    pub fn concat(&self, other: &Dataset) -> Result<Self> {
        if self.taxonomy_fingerprint != other.taxonomy_fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: self.taxonomy_fingerprint.clone(),
                found: other.taxonomy_fingerprint.clone(),
            });
        }
        let mut out = self.clone();
        out.examples.extend(other.examples.iter().cloned());
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    /// Standard deviation of the mean offset drawn for nodes at each level `0..=depth`.
    pub level_scales: Vec<f64>,
    /// Within-class standard deviation.
    pub noise: f64,
    pub examples_per_leaf: usize,
    /// Draw `instance_count` examples per leaf instead of `examples_per_leaf`.
    pub counts_from_taxonomy: bool,
    pub input_dim: usize,
    /// Class offsets occupy only the first `signal_dim` coordinates (all when `None`).
    pub signal_dim: Option<usize>,
    /// Standard deviation of the class-independent remaining coordinates.
    pub nuisance: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig::for_depth(4)
    }
}

impl GenConfig {
    /// Offsets shrink with depth, so coarse splits are the widest apart.
    pub fn for_depth(depth: usize) -> Self {
        let mut level_scales = vec![1.0];
        level_scales.extend((1..=depth).map(|j| 2.0 * 0.75f64.powi(j as i32 - 1)));
        GenConfig {
            level_scales,
            noise: 1.0,
            examples_per_leaf: 20,
            counts_from_taxonomy: false,
            input_dim: 64,
            signal_dim: None,
            nuisance: 0.0,
            seed: 0,
        }
    }

    fn validate(&self, t: &Taxonomy) -> Result<()> {
        if self.level_scales.len() != t.depth() + 1 {
            return Err(Error::InvalidParameter(format!(
                "need {} level scales, got {}",
                t.depth() + 1,
                self.level_scales.len()
            )));
        }
        if self.level_scales.iter().any(|&s| !(s > 0.0) || !s.is_finite()) || !(self.noise >= 0.0) || self.input_dim == 0 {
            return Err(Error::InvalidParameter("scales must be positive and input_dim nonzero".into()));
        }
        if self.signal_dim.is_some_and(|d| d == 0 || d > self.input_dim) || !(self.nuisance >= 0.0) {
            return Err(Error::InvalidParameter("signal_dim must lie in 1..=input_dim and nuisance be non-negative".into()));
        }
        Ok(())
    }
}

fn gaussian(dim: usize, std: f64, r: &mut impl rand::Rng) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(r);
            std * z
        })
        .collect()
}

/// Dataset plus the true class means it was drawn around.
pub struct Generated {
    pub dataset: Dataset,
    pub leaf_means: BTreeMap<NodeId, Vec<f64>>,
}

/// Every node draws an offset `~ N(0, σ_level²·I)` (in node-id order); a
/// leaf's mean is the sum of offsets along its path, and its examples are
/// `~ N(mean, noise²·I)`. With `signal_dim` set, offsets and `noise` cover
/// only the leading coordinates and the rest are `~ N(0, nuisance²)` for
/// every class. Pure function of `(t, cfg)`.
pub fn generate_hierarchical_gaussian(t: &Taxonomy, cfg: &GenConfig) -> Result<Generated> {
    cfg.validate(t)?;
    let signal = cfg.signal_dim.unwrap_or(cfg.input_dim);
    let mut r = rng::derive(cfg.seed, &[rng::DATA]);
    let offsets: Vec<Vec<f64>> = t.nodes().iter().map(|n| gaussian(signal, cfg.level_scales[n.level], &mut r)).collect();
    let mut leaf_means = BTreeMap::new();
    let mut examples = Vec::new();
    for leaf in t.leaves() {
        let mut mean = vec![0.0; cfg.input_dim];
        for node in t.path_of(leaf)?.nodes() {
            for (m, o) in mean.iter_mut().zip(&offsets[node.0]) {
                *m += o;
            }
        }
        let count = if cfg.counts_from_taxonomy { t.nodes()[leaf.0].instance_count as usize } else { cfg.examples_per_leaf };
        for _ in 0..count {
            let mut noise = gaussian(signal, cfg.noise, &mut r);
            noise.extend(gaussian(cfg.input_dim - signal, cfg.nuisance, &mut r));
            let raw = mean.iter().zip(noise).map(|(m, z)| m + z).collect();
            examples.push(LabeledExample {
                id: examples.len() as u64,
                raw,
                leaf,
                split: SplitTag::Train,
                source: SourceTag::Synthetic,
            });
        }
        leaf_means.insert(leaf, mean);
    }
    Ok(Generated {
        dataset: Dataset { taxonomy_fingerprint: t.fingerprint(), input_dim: cfg.input_dim, examples },
        leaf_means,
    })
}

fn shuffled(idx: &[usize], seed: u64, leaf: NodeId) -> Vec<usize> {
    let mut v = idx.to_vec();
    v.shuffle(&mut rng::derive(seed, &[rng::SAMPLING, leaf.0 as u64]));
    v
}

/// K-shot fine-tuning episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub k: usize,
    /// Exactly `k` examples per novel leaf.
    pub support: Dataset,
    /// Novel supports plus `k` sampled examples per base leaf.
    pub train: Dataset,
    /// Every novel example not in `support`.
    pub test: Dataset,
}

/// Draws `k` support examples per novel leaf (the rest of each novel leaf
/// becomes test data) and `k` examples per base leaf for the balanced set.
pub fn sample_k_shot(dataset: &Dataset, split: &SplitSpec, k: usize, seed: u64) -> Result<Episode> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    let by_leaf = dataset.indices_by_leaf();
    let empty = Vec::new();
    let mut support = Vec::new();
    let mut base = Vec::new();
    let mut test = Vec::new();
    for &leaf in &split.novel_leaf_ids {
        let idx = by_leaf.get(&leaf).unwrap_or(&empty);
        if idx.len() < k + 1 {
            return Err(Error::InsufficientExamples { leaf: leaf.to_string(), available: idx.len(), required: k + 1 });
        }
        let order = shuffled(idx, seed, leaf);
        support.extend_from_slice(&order[..k]);
        test.extend_from_slice(&order[k..]);
    }
    for &leaf in &split.base_leaf_ids {
        let idx = by_leaf.get(&leaf).unwrap_or(&empty);
        if idx.len() < k {
            return Err(Error::InsufficientExamples { leaf: leaf.to_string(), available: idx.len(), required: k });
        }
        base.extend_from_slice(&shuffled(idx, seed, leaf)[..k]);
    }
    support.sort_unstable();
    test.sort_unstable();
    let mut train_idx: Vec<usize> = base.iter().chain(&support).copied().collect();
    train_idx.sort_unstable();
    let mut test_set = dataset.subset(&test);
    for e in &mut test_set.examples {
        e.split = SplitTag::Test;
    }
    Ok(Episode { k, support: dataset.subset(&support), train: dataset.subset(&train_idx), test: test_set })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TestSplit {
    pub train: Dataset,
    pub test: Dataset,
}

/// Reserves `min(per_class_cap, k_c − 10)` examples of each class `c` for
/// testing (none when that is not positive), chosen uniformly with `seed`.
pub fn test_split_builder(dataset: &Dataset, per_class_cap: usize, seed: u64) -> TestSplit {
    let mut test = Vec::new();
    for (leaf, idx) in dataset.indices_by_leaf() {
        let n = per_class_cap.min(idx.len().saturating_sub(TEST_RESERVE));
        if n > 0 {
            test.extend_from_slice(&shuffled(&idx, seed, leaf)[..n]);
        }
    }
    let test: BTreeSet<usize> = test.into_iter().collect();
    let train_idx: Vec<usize> = (0..dataset.len()).filter(|i| !test.contains(i)).collect();
    let test_idx: Vec<usize> = test.into_iter().collect();
    let mut test_set = dataset.subset(&test_idx);
    for e in &mut test_set.examples {
        e.split = SplitTag::Test;
    }
    let mut train = dataset.subset(&train_idx);
    for e in &mut train.examples {
        e.split = SplitTag::Train;
    }
    TestSplit { train, test: test_set }
}
