//! `hiclpl` command-line tool.

mod config;

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use hiclpl::coco::{load_coco_annotations, parse_feature_source};
use hiclpl::data::{self, generate_hierarchical_gaussian, sample_k_shot, Dataset, GenConfig};
use hiclpl::eval::{evaluate, export_embeddings, prototype_cosines};
use hiclpl::experiment::{ablation_run, desk_config, Scenario, Variant};
use hiclpl::losses::Aggregation;
use hiclpl::taxonomy::{load_taxonomy, NodeId, SplitSpec, Taxonomy};
use hiclpl::trainer::{finetune_from, train_stage_with, Ablation, Stage, TrainConfig, TrainState, CHECKPOINT_FORMAT};
use hiclpl::Error;

use config::{resolve, FileConfig};

const EXIT_OTHER: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_DIVERGENCE: u8 = 4;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Lib(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lib(Error::Io(e))
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Lib(e) => match e {
                Error::Divergence { .. } => EXIT_DIVERGENCE,
                Error::InvalidParameter(_) | Error::InvalidAblation(_) | Error::UnknownAggregation(_) => EXIT_USAGE,
                Error::Io(_) => EXIT_OTHER,
                Error::MalformedTaxonomy(_)
                | Error::NonUniformDepth { .. }
                | Error::DuplicateId(_)
                | Error::UnknownNode(_)
                | Error::NotALeaf(_)
                | Error::IsALeaf(_)
                | Error::TopKOutOfRange { .. }
                | Error::DepthMismatch(..)
                | Error::NamePathConflict(_)
                | Error::Dimension { .. }
                | Error::EmptyBatch
                | Error::EmptyFeatureSet
                | Error::NoInstances
                | Error::LabelNotInTaxonomy(_)
                | Error::ChildOrderRegression(_)
                | Error::UnmappedCategory(_)
                | Error::MissingFeature(_)
                | Error::MalformedDocument(_)
                | Error::InsufficientExamples { .. }
                | Error::FingerprintMismatch { .. }
                | Error::CorruptCheckpoint(_)
                | Error::Json(_) => EXIT_DATA,
                _ => EXIT_OTHER,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser)]
#[command(name = "hiclpl", version, about = "Hierarchical few-shot classification over feature vectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a labeled dataset from a taxonomy.
    GenData(GenDataArgs),
    /// Convert COCO annotations plus per-annotation features into a dataset.
    IngestCoco(IngestArgs),
    /// Train one stage from scratch or from a checkpoint.
    Train(TrainArgs),
    /// Extend a stage-1 checkpoint to a larger taxonomy and fine-tune it.
    Finetune(FinetuneArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Run the component ablation on synthetic data.
    Ablate(AblateArgs),
    /// Write per-example features as a tab-separated table.
    ExportEmbeddings(ExportArgs),
    /// Summarize a checkpoint.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    taxonomy: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    taxonomy: PathBuf,
    /// COCO annotation JSON.
    #[arg(long)]
    annotations: PathBuf,
    /// JSON object mapping annotation ids to feature vectors.
    #[arg(long)]
    features: PathBuf,
    /// Fail on categories that match no leaf instead of skipping them.
    #[arg(long)]
    strict: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    taxonomy: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    stage: Option<Stage>,
    /// Comma list of enabled components: hihead, hicl, probloss (or `flat`).
    #[arg(long)]
    ablate: Option<String>,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Also write a checkpoint every this many iterations.
    #[arg(long)]
    checkpoint_every: Option<u64>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    common: Common,
    /// Stage-1 checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Taxonomy covering base and novel classes; merged onto the checkpoint's
    /// by name path and written to `taxonomy.tsv` in the output directory.
    #[arg(long)]
    taxonomy: PathBuf,
    /// Labeled in `--taxonomy`.
    #[arg(long)]
    dataset: PathBuf,
    /// Sample a K-shot episode from the dataset instead of training on all of it.
    #[arg(long)]
    shots: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    beam_width: Option<usize>,
    /// Base taxonomy; leaves missing from it are reported as novel.
    #[arg(long)]
    taxonomy: Option<PathBuf>,
    /// Taxonomy the dataset is labeled in, if not the checkpoint's.
    #[arg(long)]
    dataset_taxonomy: Option<PathBuf>,
    /// Write eval.json and append to metrics.jsonl here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    /// Run only this component set instead of the full ladder.
    #[arg(long)]
    ablate: Option<String>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    beam_width: Option<usize>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Taxonomy the dataset is labeled in, if not the checkpoint's.
    #[arg(long)]
    dataset_taxonomy: Option<PathBuf>,
    /// Output table path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config_path: Option<&'a Path>,
    seed: u64,
    out: &'a Path,
    taxonomy_fingerprint: Option<String>,
    inputs: Vec<&'a Path>,
    versions: Value,
    config: Value,
    argv: Vec<String>,
}

fn versions() -> Value {
    json!({
        "hiclpl": env!("CARGO_PKG_VERSION"),
        "dataset": format!("{} v{}", data::FORMAT, data::VERSION),
        "checkpoint": CHECKPOINT_FORMAT,
    })
}

fn write_manifest(out: &Path, m: &RunManifest) -> CliResult {
    fs::create_dir_all(out)?;
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(m).map_err(Error::from)? + "\n")?;
    Ok(())
}

fn input(path: &Path, what: &str) -> CliResult<String> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("{what} {} does not exist", path.display())));
    }
    Ok(fs::read_to_string(path)?)
}

fn read_taxonomy(path: &Path) -> CliResult<Taxonomy> {
    Ok(load_taxonomy(&input(path, "taxonomy")?)?)
}

fn read_dataset(path: &Path) -> CliResult<Dataset> {
    Ok(Dataset::from_json(&input(path, "dataset")?)?)
}

/// Dataset relabeled into `t` by name path when `labels` is given.
fn read_dataset_for(path: &Path, labels: Option<&Path>, t: &Taxonomy) -> CliResult<Dataset> {
    let ds = read_dataset(path)?;
    match labels {
        Some(p) => Ok(ds.relabel(&read_taxonomy(p)?, t)?),
        None => Ok(ds),
    }
}

fn read_checkpoint(path: &Path) -> CliResult<(TrainState, TrainConfig)> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(TrainState::load(path)?)
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable")
}

struct MetricsLog(BufWriter<File>);

impl MetricsLog {
    fn open(dir: &Path) -> CliResult<Self> {
        let f = fs::OpenOptions::new().create(true).append(true).open(dir.join("metrics.jsonl"))?;
        Ok(MetricsLog(BufWriter::new(f)))
    }

    fn record<T: Serialize>(&mut self, kind: &str, v: &T) -> CliResult {
        let mut line = to_value(v);
        line["kind"] = json!(kind);
        writeln!(self.0, "{line}")?;
        Ok(())
    }
}

fn gen_data(a: GenDataArgs) -> CliResult {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let t = read_taxonomy(&a.taxonomy)?;
    let mut gen = resolve(&GenConfig::for_depth(t.depth()), file.gen.as_ref(), "gen")?;
    if let Some(s) = a.common.seed {
        gen.seed = s;
    }
    write_manifest(
        &a.common.out,
        &RunManifest {
            command: "gen-data",
            config_path: a.common.config.as_deref(),
            seed: gen.seed,
            out: &a.common.out,
            taxonomy_fingerprint: Some(t.fingerprint()),
            inputs: vec![&a.taxonomy],
            versions: versions(),
            config: to_value(&gen),
            argv: std::env::args().collect(),
        },
    )?;
    let generated = generate_hierarchical_gaussian(&t, &gen)?;
    let ds = &generated.dataset;
    ds.save(&a.common.out.join("dataset.json"))?;
    println!("wrote {} examples over {} leaves ({} dims)", ds.len(), ds.leaf_counts().len(), ds.input_dim);
    for (leaf, n) in ds.leaf_counts() {
        println!("  {}\t{n}", t.name_path(leaf).join("/"));
    }
    Ok(())
}

fn ingest_coco(a: IngestArgs) -> CliResult {
    let t = read_taxonomy(&a.taxonomy)?;
    let doc = input(&a.annotations, "annotation file")?;
    let features = parse_feature_source(&input(&a.features, "feature file")?)?;
    write_manifest(
        &a.out,
        &RunManifest {
            command: "ingest-coco",
            config_path: None,
            seed: 0,
            out: &a.out,
            taxonomy_fingerprint: Some(t.fingerprint()),
            inputs: vec![&a.taxonomy, &a.annotations, &a.features],
            versions: versions(),
            config: json!({ "strict": a.strict }),
            argv: std::env::args().collect(),
        },
    )?;
    let import = load_coco_annotations(&doc, &t, &features, a.strict)?;
    import.dataset.save(&a.out.join("dataset.json"))?;
    println!("ingested {} annotations", import.dataset.len());
    if !import.unmatched_categories.is_empty() {
        println!(
            "skipped {} annotations in unmatched categories: {}",
            import.skipped_annotations,
            import.unmatched_categories.join(", ")
        );
    }
    Ok(())
}

fn train_config(common: &Common, file: &FileConfig, ablate: Option<&str>) -> CliResult<TrainConfig> {
    let mut cfg = resolve(&TrainConfig::default(), file.train.as_ref(), "train")?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(a) = ablate {
        cfg.ablation = a.parse::<Ablation>()?.validate()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(a: TrainArgs) -> CliResult {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let mut cfg = train_config(&a.common, &file, a.ablate.as_deref())?;
    if let Some(stage) = a.stage {
        cfg.stage = stage;
    }
    let t = read_taxonomy(&a.taxonomy)?;
    let dataset = read_dataset(&a.dataset)?;
    let init = a.resume.as_deref().map(read_checkpoint).transpose()?.map(|(s, _)| s);
    let mut inputs = vec![a.taxonomy.as_path(), a.dataset.as_path()];
    inputs.extend(a.resume.as_deref());
    let out = &a.common.out;
    write_manifest(
        out,
        &RunManifest {
            command: "train",
            config_path: a.common.config.as_deref(),
            seed: cfg.seed,
            out,
            taxonomy_fingerprint: Some(t.fingerprint()),
            inputs,
            versions: versions(),
            config: to_value(&cfg),
            argv: std::env::args().collect(),
        },
    )?;
    let mut log = MetricsLog::open(out)?;
    let ckpt = out.join("checkpoint.bin");
    let every = a.checkpoint_every.filter(|&n| n > 0);
    let state = train_stage_with(&dataset, &t, &cfg, init, |s, m| {
        log.record("iteration", m).map_err(|e| match e {
            CliError::Lib(e) => e,
            CliError::Usage(m) => Error::InvalidParameter(m),
        })?;
        if every.is_some_and(|n| s.iteration % n == 0) {
            s.save(&cfg, &ckpt)?;
        }
        Ok(())
    })?;
    state.save(&cfg, &ckpt)?;
    log.0.flush()?;
    println!("{} stage: {} iterations, checkpoint {}", state.stage, state.iteration, ckpt.display());
    if let Some(m) = state.metrics.last() {
        println!("final loss {:.6} (hicl {:.6}, prob {:.6})", m.total, m.hicl, m.prob);
    }
    Ok(())
}

/// Leaves of `t` whose name path is absent from `base`.
fn novel_leaves(t: &Taxonomy, base: &Taxonomy) -> BTreeSet<NodeId> {
    t.leaves().into_iter().filter(|&l| base.find_by_name_path(&t.name_path(l)).is_none()).collect()
}

fn finetune(a: FinetuneArgs) -> CliResult {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let (stage1, saved) = read_checkpoint(&a.checkpoint)?;
    let mut cfg = resolve(&saved, file.train.as_ref(), "train")?;
    if let Some(s) = a.common.seed {
        cfg.seed = s;
    }
    cfg.stage = Stage::Finetune;
    cfg.validate()?;
    let given = read_taxonomy(&a.taxonomy)?;
    let t_all = stage1.taxonomy.merge(&given)?;
    let dataset = read_dataset(&a.dataset)?;
    let out = &a.common.out;
    write_manifest(
        out,
        &RunManifest {
            command: "finetune",
            config_path: a.common.config.as_deref(),
            seed: cfg.seed,
            out,
            taxonomy_fingerprint: Some(t_all.fingerprint()),
            inputs: vec![&a.checkpoint, &a.taxonomy, &a.dataset],
            versions: versions(),
            config: json!({ "train": to_value(&cfg), "shots": a.shots }),
            argv: std::env::args().collect(),
        },
    )?;
    dataset.check_against(&given)?;
    let dataset = dataset.relabel(&given, &t_all)?;
    fs::write(out.join("taxonomy.tsv"), t_all.to_text())?;
    let novel = novel_leaves(&t_all, &stage1.taxonomy);
    let episode = match a.shots {
        Some(k) => {
            let base = t_all.leaves().into_iter().filter(|l| !novel.contains(l)).collect();
            let ep = sample_k_shot(&dataset, &SplitSpec { base_leaf_ids: base, novel_leaf_ids: novel.clone() }, k, cfg.seed)?;
            ep.test.save(&out.join("novel_test.json"))?;
            ep
        }
        None => {
            let support = dataset.restricted_to(&novel);
            data::Episode { k: 0, support, train: dataset.clone(), test: Dataset::empty(&t_all, dataset.input_dim) }
        }
    };
    let mut log = MetricsLog::open(out)?;
    let state = finetune_from(stage1, &episode, &t_all, &cfg)?;
    for m in state.metrics.iter().filter(|m| m.stage == Stage::Finetune) {
        log.record("iteration", m)?;
    }
    log.0.flush()?;
    let ckpt = out.join("checkpoint.bin");
    state.save(&cfg, &ckpt)?;
    println!(
        "fine-tuned on {} examples ({} novel leaves), checkpoint {}",
        episode.train.len(),
        novel.len(),
        ckpt.display()
    );
    Ok(())
}

fn print_group(name: &str, g: &hiclpl::eval::GroupAccuracy) {
    let levels: Vec<String> = g.per_level.iter().map(|v| format!("{:.1}", 100.0 * v)).collect();
    println!("{name:<8} n={:<6} full-path {:>5.1}%  per-level [{}]", g.count, 100.0 * g.full_path, levels.join(", "));
}

fn eval(a: EvalArgs) -> CliResult {
    let (state, cfg) = read_checkpoint(&a.checkpoint)?;
    let dataset = read_dataset_for(&a.dataset, a.dataset_taxonomy.as_deref(), &state.taxonomy)?;
    let width = a.beam_width.unwrap_or(cfg.beam_width);
    if width == 0 {
        return Err(CliError::Usage("--beam-width must be positive".into()));
    }
    let novel = match &a.taxonomy {
        Some(p) => novel_leaves(&state.taxonomy, &read_taxonomy(p)?),
        None => BTreeSet::new(),
    };
    if let Some(out) = &a.out {
        let mut inputs = vec![a.checkpoint.as_path(), a.dataset.as_path()];
        inputs.extend(a.taxonomy.as_deref());
        write_manifest(
            out,
            &RunManifest {
                command: "eval",
                config_path: None,
                seed: cfg.seed,
                out,
                taxonomy_fingerprint: Some(state.taxonomy.fingerprint()),
                inputs,
                versions: versions(),
                config: json!({ "beam_width": width }),
                argv: std::env::args().collect(),
            },
        )?;
    }
    let report = evaluate(&state, &dataset, width, &novel)?;
    print_group("overall", &report.overall);
    if !novel.is_empty() {
        print_group("base", &report.base);
        print_group("novel", &report.novel);
    }
    println!(
        "greedy full-path {:.1}%, beam corrections {} ({:.2}%)",
        100.0 * report.greedy_full_path,
        report.corrections,
        100.0 * report.correction_rate
    );
    if let Some(out) = &a.out {
        fs::write(out.join("eval.json"), serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n")?;
        let mut log = MetricsLog::open(out)?;
        log.record("eval", &report)?;
        log.0.flush()?;
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> CliResult {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let mut scenario = resolve(&Scenario::default(), file.scenario.as_ref(), "scenario")?;
    if let Some(k) = a.shots {
        scenario.shots = k;
    }
    let mut cfg = resolve(&desk_config(), file.train.as_ref(), "train")?;
    if let Some(w) = a.beam_width {
        cfg.beam_width = w;
    }
    cfg.validate()?;
    let first = a.common.seed.unwrap_or(0);
    let seeds: Vec<u64> = (first..first + file.seeds.unwrap_or(5) as u64).collect();
    let variants = match &a.ablate {
        Some(s) => vec![Variant::new(s.parse::<Ablation>()?.validate()?, cfg.agg)],
        None => {
            let mut v = Variant::component_ladder();
            v.push(Variant::new(Ablation::FULL, Aggregation::Constant));
            v
        }
    };
    let out = &a.common.out;
    write_manifest(
        out,
        &RunManifest {
            command: "ablate",
            config_path: a.common.config.as_deref(),
            seed: first,
            out,
            taxonomy_fingerprint: Some(scenario.taxonomy().fingerprint()),
            inputs: vec![],
            versions: versions(),
            config: json!({ "scenario": to_value(&scenario), "train": to_value(&cfg), "seeds": seeds, "variants": to_value(&variants) }),
            argv: std::env::args().collect(),
        },
    )?;
    let report = ablation_run(&scenario, &cfg, &variants, &seeds)?;
    let table = report.to_table();
    print!("{table}");
    fs::write(out.join("report.txt"), &table)?;
    fs::write(out.join("report.json"), serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n")?;
    let mut log = MetricsLog::open(out)?;
    for row in &report.rows {
        for r in &row.per_seed {
            log.record("eval", &json!({ "variant": row.variant.label, "seed": r.seed, "report": r.eval }))?;
        }
    }
    log.0.flush()?;
    Ok(())
}

fn export(a: ExportArgs) -> CliResult {
    let (state, _) = read_checkpoint(&a.checkpoint)?;
    let dataset = read_dataset_for(&a.dataset, a.dataset_taxonomy.as_deref(), &state.taxonomy)?;
    let table = export_embeddings(&state, &dataset)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&a.out, table)?;
    println!("wrote {} rows to {}", dataset.len(), a.out.display());
    Ok(())
}

fn inspect(a: InspectArgs) -> CliResult {
    let (state, cfg) = read_checkpoint(&a.checkpoint)?;
    let t = &state.taxonomy;
    println!("taxonomy  {} nodes, depth {}, {} leaves, fingerprint {}", t.len(), t.depth(), t.leaves().len(), t.fingerprint());
    println!("stage     {} after {} iterations{}", state.stage, state.iteration, if state.flat { ", flat head" } else { "" });
    println!(
        "adapter   {} -> {} -> {}",
        state.adapter.input_dim(),
        state.adapter.net.hidden_dim(),
        state.adapter.feature_dim()
    );
    let head_t = state.head_taxonomy();
    for (id, c) in state.head.classifiers() {
        println!(
            "classifier {:<24} {} -> {} -> {} ({} children + others)",
            head_t.name_path(*id).join("/"),
            c.net.input_dim(),
            c.net.hidden_dim(),
            c.net.output_dim(),
            c.child_count()
        );
    }
    let cos = prototype_cosines(&state.bank, t)?;
    println!("prototypes parent-child {:.4}, cross-branch {:.4}", cos.parent_child, cos.cross_branch);
    println!(
        "prototypes sibling leaves {:.4}, cross-subtree leaves {:.4}, gap {:.4}",
        cos.sibling_leaves, cos.cross_top_leaves, cos.gap
    );
    println!("config    {}", serde_json::to_string(&cfg).map_err(Error::from)?);
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::IngestCoco(a) => ingest_coco(a),
        Command::Train(a) => train(a),
        Command::Finetune(a) => finetune(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::ExportEmbeddings(a) => export(a),
        Command::Inspect(a) => inspect(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
