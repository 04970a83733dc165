//! Paired component ablations on synthetic hierarchical data.
//!
//! For each seed one dataset and one K-shot episode are drawn; every variant
//! is then trained with that seed on exactly the same data and scored on the
//! same held-out base and novel examples.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{generate_hierarchical_gaussian, sample_k_shot, test_split_builder, Dataset, Episode, GenConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate, prototype_cosines, CosineSummary, EvalReport};
use crate::losses::Aggregation;
use crate::taxonomy::{balanced, NodeId, SplitSpec, Taxonomy};
use crate::trainer::{finetune_from, train_stage, Ablation, Stage, TrainConfig, TrainState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    /// Complete tree shape: `fanout[j]` children per level-`j` node.
    pub fanout: Vec<usize>,
    /// Root children (by instance count) whose leaves are base classes.
    pub base_top_k: usize,
    pub shots: usize,
    /// Held-out examples per base leaf.
    pub test_cap: usize,
    pub gen: GenConfig,
}

/// Eight orders of four leaves each; the six most populous orders are base.
/// Only 16 of the 64 raw dimensions carry class signal.
impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            fanout: vec![8, 2, 2],
            base_top_k: 6,
            shots: 5,
            test_cap: 20,
            gen: GenConfig {
                level_scales: vec![0.1, 0.075, 0.075, 0.5],
                noise: 1.0 / 3.0,
                examples_per_leaf: 150,
                counts_from_taxonomy: false,
                input_dim: 64,
                signal_dim: Some(16),
                nuisance: 1.0,
                seed: 0,
            },
        }
    }
}

/// Training settings used with the default scenario.
pub fn desk_config() -> TrainConfig {
    TrainConfig { learning_rate: 0.05, finetune_learning_rate: 0.1, max_grad_norm: Some(0.5), ..TrainConfig::default() }
}

/// One seed's data, relabeled for each stage.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub t_full: Taxonomy,
    pub t_base: Taxonomy,
    pub t_all: Taxonomy,
    /// Leaf ids of `t_full`.
    pub split: SplitSpec,
    /// Stage-1 training data, labels in `t_base`.
    pub base_train: Dataset,
    /// Labels in `t_all`.
    pub episode: Episode,
    /// Held-out base examples, labels in `t_all`.
    pub base_test: Dataset,
    /// Novel leaf ids of `t_all`.
    pub novel_leaves: BTreeSet<NodeId>,
}

impl Prepared {
    /// Base test examples followed by the episode's novel test examples.
    pub fn test_set(&self) -> Result<Dataset> {
        self.base_test.concat(&self.episode.test)
    }
}

/// Splits `data` (labels in `t_full`) into base and novel classes, holds out
/// base test examples, samples the K-shot episode and relabels everything.
pub fn prepare(t_full: &Taxonomy, data: &Dataset, base_top_k: usize, shots: usize, test_cap: usize, seed: u64) -> Result<Prepared> {
    data.check_against(t_full)?;
    let t_full = t_full.with_leaf_counts(&data.leaf_counts());
    let split = t_full.split_base_novel(base_top_k)?;
    let base_pool = data.restricted_to(&split.base_leaf_ids);
    let held = test_split_builder(&base_pool, test_cap, seed);
    let pool = held.train.concat(&data.restricted_to(&split.novel_leaf_ids))?;
    let episode = sample_k_shot(&pool, &split, shots, seed)?;

    let t_base = t_full.restrict(&split.base_leaf_ids)?;
    let t_novel = t_full.restrict(&split.novel_leaf_ids)?;
    let t_all = t_base.merge(&t_novel)?;
    let relabel = |d: &Dataset, to: &Taxonomy| d.relabel(&t_full, to);
    let episode = Episode {
        k: episode.k,
        support: relabel(&episode.support, &t_all)?,
        train: relabel(&episode.train, &t_all)?,
        test: relabel(&episode.test, &t_all)?,
    };
    let novel_leaves =
        split.novel_leaf_ids.iter().map(|&l| t_all.translate(&t_full, l)).collect::<Result<BTreeSet<_>>>()?;
    Ok(Prepared {
        base_train: relabel(&held.train, &t_base)?,
        base_test: relabel(&held.test, &t_all)?,
        t_full,
        t_base,
        t_all,
        split,
        episode,
        novel_leaves,
    })
}

impl Scenario {
    pub fn taxonomy(&self) -> Taxonomy {
        balanced(&self.fanout, 1)
    }

    pub fn prepare(&self, seed: u64) -> Result<Prepared> {
        let t = self.taxonomy();
        let gen = GenConfig { seed, ..self.gen.clone() };
        let data = generate_hierarchical_gaussian(&t, &gen)?.dataset;
        prepare(&t, &data, self.base_top_k, self.shots, self.test_cap, seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub label: String,
    pub ablation: Ablation,
    pub agg: Aggregation,
    /// Whether the adapter keeps training during fine-tuning.
    #[serde(default = "yes")]
    pub finetune_adapter: bool,
}

fn yes() -> bool {
    true
}

impl Variant {
    pub fn new(ablation: Ablation, agg: Aggregation) -> Self {
        let label = if ablation.hicl { format!("{} ({agg})", ablation.label()) } else { ablation.label() };
        Variant { label, ablation, agg, finetune_adapter: true }
    }

    /// Flat head; fine-tuning touches only the classifier.
    pub fn flat_frozen() -> Self {
        Variant { label: "flat (frozen adapter)".into(), finetune_adapter: false, ..Variant::new(Ablation::FLAT, Aggregation::Linear) }
    }

    /// Flat baseline, then the head, contrastive and probabilistic components added one at a time.
    pub fn component_ladder() -> Vec<Variant> {
        let a = |s: &str| s.parse::<Ablation>().expect("valid ablation");
        vec![
            Variant::flat_frozen(),
            Variant::new(a("hihead"), Aggregation::Linear),
            Variant::new(a("hihead,hicl"), Aggregation::Linear),
            Variant::new(Ablation::FULL, Aggregation::Linear),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub base_accuracy: f64,
    pub novel_accuracy: f64,
    pub eval: EvalReport,
    pub prototypes: CosineSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub per_seed: Vec<SeedResult>,
    pub mean_base: f64,
    pub mean_novel: f64,
}

impl AblationRow {
    pub fn novel(&self) -> Vec<f64> {
        self.per_seed.iter().map(|s| s.novel_accuracy).collect()
    }

    pub fn base(&self) -> Vec<f64> {
        self.per_seed.iter().map(|s| s.base_accuracy).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant.label == label)
    }

    /// Plain-text table of full-path accuracy (percent): per-seed base/novel and means.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<28}", "variant");
        for s in &self.seeds {
            write!(out, " {:>13}", format!("seed {s}")).expect("write");
        }
        writeln!(out, " {:>13}", "mean").expect("write");
        for row in &self.rows {
            write!(out, "{:<28}", row.variant.label).expect("write");
            for r in &row.per_seed {
                write!(out, " {:>13}", format!("{:.1}/{:.1}", 100.0 * r.base_accuracy, 100.0 * r.novel_accuracy))
                    .expect("write");
            }
            writeln!(out, " {:>13}", format!("{:.1}/{:.1}", 100.0 * row.mean_base, 100.0 * row.mean_novel)).expect("write");
        }
        out
    }
}

/// Trains a single variant on one prepared seed and scores it.
pub fn run_variant(prepared: &Prepared, cfg: &TrainConfig, variant: &Variant, seed: u64) -> Result<(TrainState, SeedResult)> {
    let cfg = TrainConfig { seed, ablation: variant.ablation.validate()?, agg: variant.agg, ..cfg.clone() };
    let stage1 = train_stage(&prepared.base_train, &prepared.t_base, &TrainConfig { stage: Stage::Base, ..cfg.clone() }, None)?;
    let ft = TrainConfig { adapter_trainable: cfg.adapter_trainable && variant.finetune_adapter, ..cfg.clone() };
    let state = finetune_from(stage1, &prepared.episode, &prepared.t_all, &ft)?;
    let eval = evaluate(&state, &prepared.test_set()?, cfg.beam_width, &prepared.novel_leaves)?;
    let prototypes = prototype_cosines(&state.bank, &state.taxonomy)?;
    Ok((
        state,
        SeedResult { seed, base_accuracy: eval.base.full_path, novel_accuracy: eval.novel.full_path, eval, prototypes },
    ))
}

/// Trains every variant on every seed's shared data.
pub fn ablation_run(scenario: &Scenario, cfg: &TrainConfig, variants: &[Variant], seeds: &[u64]) -> Result<AblationReport> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::InvalidParameter("need at least one variant and one seed".into()));
    }
    for v in variants {
        v.ablation.validate()?;
    }
    let mut per_variant: Vec<Vec<SeedResult>> = vec![Vec::new(); variants.len()];
    for &seed in seeds {
        let prepared = scenario.prepare(seed)?;
        for (v, results) in variants.iter().zip(per_variant.iter_mut()) {
            results.push(run_variant(&prepared, cfg, v, seed)?.1);
        }
    }
    let rows = variants
        .iter()
        .zip(per_variant)
        .map(|(v, per_seed)| {
            let n = per_seed.len() as f64;
            AblationRow {
                variant: v.clone(),
                mean_base: per_seed.iter().map(|r| r.base_accuracy).sum::<f64>() / n,
                mean_novel: per_seed.iter().map(|r| r.novel_accuracy).sum::<f64>() / n,
                per_seed,
            }
        })
        .collect();
    Ok(AblationReport { seeds: seeds.to_vec(), rows })
}
