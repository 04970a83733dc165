//! Two-stage training: base training on abundant classes, then balanced
//! fine-tuning after growing the head and memory to the merged taxonomy.
//!
//! Every iteration draws its batch and its "others" indicators from streams
//! derived from `(seed, stage, iteration)`, so a run resumed from a
//! checkpoint replays exactly what the uninterrupted run would have done.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::container::{Container, Tensor};
use crate::data::{Dataset, Episode};
use crate::error::{Error, Result};
use crate::losses::{
    compute_node_probabilities, hicl_loss, prob_loss_from_logits, prob_terms, Aggregation, ForegroundBatch, HiclConfig,
    OthersDraws, ProbTable,
};
use crate::memory::{init_memories, InitMode, MemoryBank};
use crate::model::{FeatureAdapter, HierarchicalHead, NodeClassifier};
use crate::numeric::{DenseMat, NetGrads, Sgd, TwoLayerNet};
use crate::rng;
use crate::taxonomy::{LeafPath, NodeId, Taxonomy};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    #[default]
    Base,
    Finetune,
}

impl Stage {
    fn tag(self) -> u64 {
        match self {
            Stage::Base => 0,
            Stage::Finetune => 1,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Base => "base",
            Stage::Finetune => "finetune",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Stage::Base),
            "finetune" => Ok(Stage::Finetune),
            other => Err(Error::InvalidParameter(format!("unknown stage {other:?}"))),
        }
    }
}

/// Which components are switched on. With `hihead` off the head is a single
/// softmax over all leaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub hihead: bool,
    pub hicl: bool,
    pub probloss: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation::FULL
    }
}

impl Ablation {
    pub const FULL: Ablation = Ablation { hihead: true, hicl: true, probloss: true };
    pub const FLAT: Ablation = Ablation { hihead: false, hicl: false, probloss: false };

    pub fn validate(self) -> Result<Self> {
        if self.probloss && !self.hihead {
            return Err(Error::InvalidAblation("probloss requires hihead".into()));
        }
        Ok(self)
    }

    pub fn label(self) -> String {
        let on: Vec<&str> = [(self.hihead, "hihead"), (self.hicl, "hicl"), (self.probloss, "probloss")]
            .into_iter()
            .filter_map(|(b, n)| b.then_some(n))
            .collect();
        if on.is_empty() {
            "flat".into()
        } else {
            on.join("+")
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    /// Comma list of enabled components; `flat` or `none` for all off.
    fn from_str(s: &str) -> Result<Self> {
        let mut a = Ablation::FLAT;
        for part in s.split([',', '+']).map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "hihead" => a.hihead = true,
                "hicl" => a.hicl = true,
                "probloss" => a.probloss = true,
                "flat" | "none" => {}
                other => return Err(Error::InvalidAblation(format!("unknown component {other:?}"))),
            }
        }
        a.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub tau: f64,
    pub eps: f64,
    pub beta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub agg: Aggregation,
    pub beam_width: usize,
    pub learning_rate: f64,
    pub iterations: u64,
    pub finetune_learning_rate: f64,
    pub finetune_iterations: u64,
    /// Multiply the learning rate by `lr_decay` every `lr_decay_every` iterations (0 = constant).
    pub lr_decay_every: u64,
    pub lr_decay: f64,
    /// L2 penalty added to every gradient.
    pub weight_decay: f64,
    /// Rescales the joint adapter and head gradient to at most this norm.
    pub max_grad_norm: Option<f64>,
    pub batch_size: usize,
    pub seed: u64,
    pub stage: Stage,
    pub adapter_trainable: bool,
    pub feature_dim: usize,
    pub adapter_hidden: usize,
    pub head_hidden: usize,
    pub renormalize: bool,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tau: 0.2,
            eps: 0.1,
            beta: 0.5,
            lambda1: 0.5,
            lambda2: 1.0,
            agg: Aggregation::Linear,
            beam_width: 3,
            learning_rate: 0.05,
            iterations: 1000,
            finetune_learning_rate: 0.02,
            finetune_iterations: 200,
            lr_decay_every: 0,
            lr_decay: 0.1,
            weight_decay: 0.0,
            max_grad_norm: None,
            batch_size: 32,
            seed: 0,
            stage: Stage::Base,
            adapter_trainable: true,
            feature_dim: 32,
            adapter_hidden: 64,
            head_hidden: 32,
            renormalize: true,
            ablation: Ablation::FULL,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidParameter(what.to_string()));
        if !(self.tau > 0.0) {
            return bad("tau must be positive");
        }
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return bad("eps must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad("beta must lie in [0, 1]");
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if !(self.learning_rate > 0.0 && self.finetune_learning_rate > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.max_grad_norm.is_some_and(|m| !(m > 0.0)) {
            return bad("max_grad_norm must be positive");
        }
        if !(self.lr_decay > 0.0) {
            return bad("lr_decay must be positive");
        }
        if self.batch_size == 0 || self.beam_width == 0 {
            return bad("batch size and beam width must be at least 1");
        }
        if self.feature_dim == 0 || self.adapter_hidden == 0 || self.head_hidden == 0 {
            return bad("layer sizes must be at least 1");
        }
        self.ablation.validate()?;
        Ok(())
    }

    pub fn iterations_for(&self, stage: Stage) -> u64 {
        match stage {
            Stage::Base => self.iterations,
            Stage::Finetune => self.finetune_iterations,
        }
    }

    pub fn learning_rate_at(&self, stage: Stage, iteration: u64) -> f64 {
        let base = match stage {
            Stage::Base => self.learning_rate,
            Stage::Finetune => self.finetune_learning_rate,
        };
        if self.lr_decay_every == 0 {
            base
        } else {
            base * self.lr_decay.powi((iteration / self.lr_decay_every) as i32)
        }
    }

    fn effective_beta(&self) -> f64 {
        if self.ablation.probloss {
            self.beta
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub stage: Stage,
    pub iteration: u64,
    pub learning_rate: f64,
    pub hicl: f64,
    pub prob: f64,
    pub total: f64,
    pub others_events: usize,
}

/// Everything a run carries between iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Active class hierarchy (memory bank and labels live here).
    pub taxonomy: Taxonomy,
    /// Head is a single classifier over `taxonomy.flatten()`.
    pub flat: bool,
    pub adapter: FeatureAdapter<f64>,
    pub head: HierarchicalHead<f64>,
    pub bank: MemoryBank<f64>,
    pub optimizer: Sgd<f64>,
    pub stage: Stage,
    /// Iterations completed in `stage`.
    pub iteration: u64,
    pub metrics: Vec<IterationMetrics>,
}

impl TrainState {
    /// Fresh seeded parameters; prototypes start at the normalized per-node
    /// feature means of `dataset` under the initial adapter.
    pub fn init(t: &Taxonomy, dataset: &Dataset, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let flat = !cfg.ablation.hihead;
        let adapter = FeatureAdapter::new(dataset.input_dim, cfg.adapter_hidden, cfg.feature_dim, cfg.seed);
        let head_t = if flat { t.flatten() } else { t.clone() };
        let head = HierarchicalHead::build(&head_t, cfg.feature_dim, cfg.head_hidden, cfg.seed);
        let examples: Vec<(NodeId, Vec<f64>)> = dataset.examples.iter().map(|e| (e.leaf, e.raw.clone())).collect();
        let bank = init_memories(t, &examples, &adapter, cfg.eps, cfg.renormalize, InitMode::Fallback, cfg.seed)
            .map_err(|e| collapsed(e, 0))?;
        Ok(TrainState {
            taxonomy: t.clone(),
            flat,
            adapter,
            head,
            bank,
            optimizer: Sgd::new(cfg.learning_rate),
            stage: cfg.stage,
            iteration: 0,
            metrics: Vec::new(),
        })
    }

    /// Taxonomy the head's classifiers are indexed by.
    pub fn head_taxonomy(&self) -> Taxonomy {
        if self.flat {
            self.taxonomy.flatten()
        } else {
            self.taxonomy.clone()
        }
    }

    /// Head-taxonomy leaf for a leaf of the active taxonomy.
    pub fn to_head_leaf(&self, leaf: NodeId) -> Result<NodeId> {
        if !self.flat {
            return Ok(leaf);
        }
        self.taxonomy
            .leaves()
            .iter()
            .position(|&l| l == leaf)
            .map(|i| NodeId(i + 1))
            .ok_or(Error::UnknownNode(leaf))
    }

    /// Active-taxonomy leaf for a head-taxonomy leaf.
    pub fn from_head_leaf(&self, leaf: NodeId) -> Result<NodeId> {
        if !self.flat {
            return Ok(leaf);
        }
        self.taxonomy.leaves().get(leaf.0.wrapping_sub(1)).copied().ok_or(Error::UnknownNode(leaf))
    }

    fn check_consistent(&self, t: &Taxonomy) -> Result<()> {
        let expected = t.fingerprint();
        let found = self.taxonomy.fingerprint();
        if expected != found {
            return Err(Error::FingerprintMismatch { expected, found });
        }
        if !self.head.matches(&self.head_taxonomy()) || self.bank.len() != t.len() {
            return Err(Error::CorruptCheckpoint("head or memory does not match the taxonomy".into()));
        }
        Ok(())
    }
}

fn head_paths(state: &TrainState, head_t: &Taxonomy, dataset: &Dataset) -> Result<(Vec<LeafPath>, Vec<LeafPath>)> {
    let mut paths = Vec::with_capacity(dataset.len());
    let mut hpaths = Vec::with_capacity(dataset.len());
    for e in &dataset.examples {
        paths.push(state.taxonomy.path_of(e.leaf)?);
        hpaths.push(head_t.path_of(state.to_head_leaf(e.leaf)?)?);
    }
    Ok((paths, hpaths))
}

fn collapsed(e: Error, iteration: u64) -> Error {
    match e {
        Error::ZeroNorm => Error::Divergence { iteration, detail: "a feature collapsed to zero".into() },
        other => other,
    }
}

/// One optimizer step on the batch `idx`, followed by memory updates.
fn step(
    state: &mut TrainState,
    dataset: &Dataset,
    idx: &[usize],
    paths: &[LeafPath],
    hpaths: &[LeafPath],
    head_t: &Taxonomy,
    table: &ProbTable<f64>,
    cfg: &TrainConfig,
    others_rng: &mut impl Rng,
) -> Result<IterationMetrics> {
    let n = idx.len();
    let lr = cfg.learning_rate_at(state.stage, state.iteration);
    let mut features = Vec::with_capacity(n);
    let mut caches = Vec::with_capacity(n);
    for &i in idx {
        let (f, cache) = state.adapter.net.forward(&dataset.examples[i].raw, true)?;
        features.push(f);
        caches.push(cache);
    }
    let batch_paths: Vec<LeafPath> = idx.iter().map(|&i| paths[i].clone()).collect();
    let batch_hpaths: Vec<LeafPath> = idx.iter().map(|&i| hpaths[i].clone()).collect();
    let mut feature_grads = vec![vec![0.0; state.adapter.feature_dim()]; n];

    let mut hicl = 0.0;
    if cfg.ablation.hicl && cfg.lambda1 > 0.0 {
        let batch = ForegroundBatch::new(features.clone(), batch_paths.clone())?;
        let (l, g) = hicl_loss(&batch, &state.bank, &HiclConfig { tau: cfg.tau, agg: cfg.agg })
            .map_err(|e| collapsed(e, state.iteration))?;
        hicl = l;
        for (fg, gi) in feature_grads.iter_mut().zip(g) {
            for (a, b) in fg.iter_mut().zip(gi) {
                *a += cfg.lambda1 * b;
            }
        }
    }

    let draws = OthersDraws::sample(head_t, &batch_hpaths, table, others_rng);
    let terms = prob_terms(head_t, &batch_hpaths, &draws)?;
    let mut logits = Vec::with_capacity(terms.len());
    let mut term_caches = Vec::with_capacity(terms.len());
    for term in &terms {
        let c = state.head.classifier(term.node)?;
        let (z, cache) = c.net.forward(&features[term.example], false)?;
        logits.push(z);
        term_caches.push(cache);
    }
    let (prob, logit_grads) = prob_loss_from_logits(&terms, &logits, state.head.len(), n);
    let mut head_grads: BTreeMap<NodeId, NetGrads<f64>> =
        state.head.classifiers().iter().map(|(&id, c)| (id, NetGrads::zeros_like(&c.net))).collect();
    for ((term, cache), g) in terms.iter().zip(&term_caches).zip(&logit_grads) {
        let scaled: Vec<f64> = g.iter().map(|v| cfg.lambda2 * v).collect();
        let net = &state.head.classifier(term.node)?.net;
        let (pg, gin) = net.backward(cache, &scaled)?;
        head_grads.get_mut(&term.node).expect("classifier").accumulate(&pg);
        for (a, b) in feature_grads[term.example].iter_mut().zip(gin) {
            *a += b;
        }
    }

    let total = cfg.lambda1 * hicl + cfg.lambda2 * prob;
    if !total.is_finite() {
        return Err(Error::Divergence {
            iteration: state.iteration,
            detail: format!("loss is {total} (hicl {hicl}, prob {prob})"),
        });
    }

    state.optimizer.learning_rate = lr;
    state.optimizer.weight_decay = cfg.weight_decay;
    let mut adapter_grads = None;
    if cfg.adapter_trainable {
        let mut ag = NetGrads::zeros_like(&state.adapter.net);
        for (cache, g) in caches.iter().zip(&feature_grads) {
            let (pg, _) = state.adapter.net.backward(cache, g)?;
            ag.accumulate(&pg);
        }
        adapter_grads = Some(ag);
    }
    if let Some(max) = cfg.max_grad_norm {
        let sq = adapter_grads.iter().chain(head_grads.values()).map(NetGrads::sq_norm).sum::<f64>();
        if sq.sqrt() > max {
            let s = max / sq.sqrt();
            adapter_grads.iter_mut().chain(head_grads.values_mut()).for_each(|g| g.scale(s));
        }
    }
    if let Some(ag) = &adapter_grads {
        state.optimizer.step_net("adapter", &mut state.adapter.net, ag)?;
    }
    for (id, g) in &head_grads {
        let c = state.head.classifiers_mut().get_mut(id).expect("classifier");
        state.optimizer.step_net(&format!("head.{}", id.0), &mut c.net, g)?;
    }
    if !state.adapter.net.is_finite() || state.head.classifiers().values().any(|c| !c.net.is_finite()) {
        return Err(Error::Divergence { iteration: state.iteration, detail: "non-finite parameters after update".into() });
    }

    for (f, path) in features.iter().zip(&batch_paths) {
        state.bank.ema_update(f, path).map_err(|e| collapsed(e, state.iteration))?;
    }
    let metrics = IterationMetrics {
        stage: state.stage,
        iteration: state.iteration,
        learning_rate: lr,
        hicl,
        prob,
        total,
        others_events: draws.count(),
    };
    state.iteration += 1;
    Ok(metrics)
}

/// Runs stage `cfg.stage` until `cfg.iterations_for(stage)` iterations are
/// done, calling `observe` after every iteration.
pub fn train_stage_with(
    dataset: &Dataset,
    t: &Taxonomy,
    cfg: &TrainConfig,
    init: Option<TrainState>,
    mut observe: impl FnMut(&TrainState, &IterationMetrics) -> Result<()>,
) -> Result<TrainState> {
    cfg.validate()?;
    dataset.check_against(t)?;
    let mut state = match init {
        Some(s) => {
            s.check_consistent(t)?;
            s
        }
        None => TrainState::init(t, dataset, cfg)?,
    };
    let total = cfg.iterations_for(cfg.stage);
    if state.stage != cfg.stage {
        state.stage = cfg.stage;
        state.iteration = 0;
    }
    if state.iteration >= total {
        return Ok(state);
    }
    if dataset.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let head_t = state.head_taxonomy().with_leaf_counts(&head_counts(&state, dataset)?);
    let table = compute_node_probabilities(&head_t, cfg.effective_beta())?;
    let (paths, hpaths) = head_paths(&state, &head_t, dataset)?;
    while state.iteration < total {
        let it = state.iteration;
        let tag = state.stage.tag();
        let mut batch_rng = rng::derive(cfg.seed, &[rng::BATCH, tag, it]);
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| batch_rng.random_range(0..dataset.len())).collect();
        let mut others_rng = rng::derive(cfg.seed, &[rng::OTHERS, tag, it]);
        let m = step(&mut state, dataset, &idx, &paths, &hpaths, &head_t, &table, cfg, &mut others_rng)?;
        observe(&state, &m)?;
        state.metrics.push(m);
    }
    Ok(state)
}

fn head_counts(state: &TrainState, dataset: &Dataset) -> Result<BTreeMap<NodeId, u64>> {
    let mut out = BTreeMap::new();
    for (leaf, c) in dataset.leaf_counts() {
        out.insert(state.to_head_leaf(leaf)?, c);
    }
    Ok(out)
}

pub fn train_stage(dataset: &Dataset, t: &Taxonomy, cfg: &TrainConfig, init: Option<TrainState>) -> Result<TrainState> {
    train_stage_with(dataset, t, cfg, init, |_, _| Ok(()))
}

/// Grows a stage-1 state to `t_all`: head rows and classifiers for new nodes,
/// prototypes for new nodes from `support` (labels in `t_all`), fresh
/// optimizer state. The function on old classes is unchanged.
pub fn extend_state(state: &TrainState, t_all: &Taxonomy, support: &Dataset, seed: u64) -> Result<TrainState> {
    support.check_against(t_all)?;
    let head = if state.flat {
        state.head.extend(&state.taxonomy.flatten(), &t_all.flatten(), seed)?
    } else {
        state.head.extend(&state.taxonomy, t_all, seed)?
    };
    let features = support
        .examples
        .iter()
        .map(|e| Ok((e.leaf, state.adapter.embed(&e.raw)?)))
        .collect::<Result<Vec<_>>>()?;
    let bank = state.bank.extend(t_all, &features, seed)?;
    let mut optimizer = state.optimizer.clone();
    optimizer.reset();
    Ok(TrainState {
        taxonomy: t_all.clone(),
        flat: state.flat,
        adapter: state.adapter.clone(),
        head,
        bank,
        optimizer,
        stage: Stage::Finetune,
        iteration: 0,
        metrics: state.metrics.clone(),
    })
}

/// Stage 1 on `base_data` (labels in `t_base`), then extension to `t_all`
/// and stage 2 on the episode's balanced set (labels in `t_all`). With no
/// novel classes the stage-1 state is returned as is.
pub fn two_stage_train(base_data: &Dataset, episode: &Episode, t_base: &Taxonomy, t_all: &Taxonomy, cfg: &TrainConfig) -> Result<TrainState> {
    let base_cfg = TrainConfig { stage: Stage::Base, ..cfg.clone() };
    let stage1 = train_stage(base_data, t_base, &base_cfg, None)?;
    finetune_from(stage1, episode, t_all, cfg)
}

/// Stage 2 only, starting from a finished stage-1 state.
pub fn finetune_from(stage1: TrainState, episode: &Episode, t_all: &Taxonomy, cfg: &TrainConfig) -> Result<TrainState> {
    if t_all.fingerprint() == stage1.taxonomy.fingerprint() {
        return Ok(stage1);
    }
    for part in [&episode.train, &episode.support] {
        if part.taxonomy_fingerprint != t_all.fingerprint() {
            return Err(Error::FingerprintMismatch { expected: t_all.fingerprint(), found: part.taxonomy_fingerprint.clone() });
        }
    }
    let start = extend_state(&stage1, t_all, &episode.support, cfg.seed)?;
    let ft_cfg = TrainConfig { stage: Stage::Finetune, ..cfg.clone() };
    train_stage(&episode.train, t_all, &ft_cfg, Some(start))
}

// ---------------------------------------------------------------------------
// checkpoints

pub const CHECKPOINT_FORMAT: &str = "hiclpl-checkpoint";

fn put_net(c: &mut Container, prefix: &str, net: &TwoLayerNet<f64>) {
    for ((name, data), (_, shape)) in net.parts().into_iter().zip(net.shapes()) {
        c.insert(format!("{prefix}.{name}"), Tensor { shape, data: data.to_vec() });
    }
}

fn get_net(c: &Container, prefix: &str) -> Result<TwoLayerNet<f64>> {
    let mat = |name: &str| -> Result<DenseMat<f64>> {
        let t = c.get(&format!("{prefix}.{name}"))?;
        match t.shape[..] {
            [r, k] => DenseMat::from_vec(r, k, t.data.clone()).map_err(|_| Error::CorruptCheckpoint(format!("{prefix}.{name}"))),
            _ => Err(Error::CorruptCheckpoint(format!("{prefix}.{name} is not a matrix"))),
        }
    };
    let vec = |name: &str| -> Result<Vec<f64>> { Ok(c.get(&format!("{prefix}.{name}"))?.data.clone()) };
    let net = TwoLayerNet { w1: mat("w1")?, b1: vec("b1")?, w2: mat("w2")?, b2: vec("b2")? };
    if net.b1.len() != net.w1.rows() || net.w2.cols() != net.w1.rows() || net.b2.len() != net.w2.rows() {
        return Err(Error::CorruptCheckpoint(format!("{prefix} has inconsistent shapes")));
    }
    Ok(net)
}

impl TrainState {
    pub fn to_container(&self, cfg: &TrainConfig) -> Container {
        let mut c = Container::default();
        let meta = &mut c.meta;
        meta.insert("format".into(), CHECKPOINT_FORMAT.into());
        meta.insert("taxonomy".into(), self.taxonomy.to_text().into());
        meta.insert("fingerprint".into(), self.taxonomy.fingerprint().into());
        meta.insert("flat".into(), self.flat.into());
        meta.insert("stage".into(), self.stage.to_string().into());
        meta.insert("iteration".into(), self.iteration.into());
        meta.insert("head_hidden".into(), self.head.hidden().into());
        meta.insert("eps".into(), self.bank.eps().into());
        meta.insert("config".into(), serde_json::to_value(cfg).expect("config serializes"));
        put_net(&mut c, "adapter", &self.adapter.net);
        for (id, cl) in self.head.classifiers() {
            put_net(&mut c, &format!("head.{}", id.0), &cl.net);
        }
        let protos = self.bank.prototypes();
        c.insert(
            "memory",
            Tensor { shape: vec![protos.len(), self.bank.dim()], data: protos.iter().flatten().copied().collect() },
        );
        for (name, v) in self.optimizer.velocity() {
            c.insert(format!("velocity.{name}"), Tensor::vector(v.clone()));
        }
        c
    }

    /// Restores a state and the config it was written with.
    pub fn from_container(c: &Container) -> Result<(Self, TrainConfig)> {
        if c.meta_str("format")? != CHECKPOINT_FORMAT {
            return Err(Error::CorruptCheckpoint("not a training checkpoint".into()));
        }
        let taxonomy = Taxonomy::parse(c.meta_str("taxonomy")?)?;
        let fp = c.meta_str("fingerprint")?;
        if taxonomy.fingerprint() != fp {
            return Err(Error::FingerprintMismatch { expected: fp.to_string(), found: taxonomy.fingerprint() });
        }
        let field = |k: &str| c.meta.get(k).ok_or_else(|| Error::CorruptCheckpoint(format!("missing meta field {k}")));
        let cfg: TrainConfig = serde_json::from_value(field("config")?.clone())?;
        let flat = field("flat")?.as_bool().ok_or_else(|| Error::CorruptCheckpoint("flat".into()))?;
        let iteration = field("iteration")?.as_u64().ok_or_else(|| Error::CorruptCheckpoint("iteration".into()))?;
        let stage: Stage = c.meta_str("stage")?.parse()?;
        let head_hidden = field("head_hidden")?.as_u64().ok_or_else(|| Error::CorruptCheckpoint("head_hidden".into()))? as usize;
        let eps = field("eps")?.as_f64().ok_or_else(|| Error::CorruptCheckpoint("eps".into()))?;

        let adapter = FeatureAdapter { net: get_net(c, "adapter")? };
        let head_t = if flat { taxonomy.flatten() } else { taxonomy.clone() };
        let mut classifiers = BTreeMap::new();
        for id in head_t.internal_nodes() {
            classifiers.insert(id, NodeClassifier { node: id, net: get_net(c, &format!("head.{}", id.0))? });
        }
        let head = HierarchicalHead::from_classifiers(classifiers, adapter.feature_dim(), head_hidden);
        let mem = c.get("memory")?;
        let [rows, dim] = mem.shape[..] else {
            return Err(Error::CorruptCheckpoint("memory is not a matrix".into()));
        };
        let protos = if dim == 0 { vec![Vec::new(); rows] } else { mem.data.chunks(dim).map(<[f64]>::to_vec).collect() };
        let bank = MemoryBank::from_prototypes(protos, taxonomy.depth(), eps, cfg.renormalize)?;
        let mut optimizer = Sgd::new(cfg.learning_rate_at(stage, iteration));
        for (name, t) in &c.tensors {
            if let Some(param) = name.strip_prefix("velocity.") {
                optimizer.set_velocity(param, t.data.clone());
            }
        }
        let state = TrainState { taxonomy, flat, adapter, head, bank, optimizer, stage, iteration, metrics: Vec::new() };
        state.check_consistent(&state.taxonomy)?;
        if state.adapter.feature_dim() != state.bank.dim() {
            return Err(Error::CorruptCheckpoint("memory width differs from feature width".into()));
        }
        Ok((state, cfg))
    }

    pub fn save(&self, cfg: &TrainConfig, path: &Path) -> Result<()> {
        self.to_container(cfg).save(path)
    }

    pub fn load(path: &Path) -> Result<(Self, TrainConfig)> {
        Self::from_container(&Container::load(path)?)
    }
}
