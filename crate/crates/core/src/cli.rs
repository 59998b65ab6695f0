//! Command-line front end. Every subcommand writes its artifacts plus a JSON
//! run manifest listing resolved configuration, seeds, checksums and timings.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::codec::sha256_hex;
use crate::config::KvConfig;
use crate::ctr::{predict_all, train_ctr, write_predictions, CrossFeatureSource, CtrConfig, CtrModel};
use crate::error::{Error, Result};
use crate::eval::{
    average_tables, evaluate, generate_synthetic, pretrain_graph, run_ablation, run_benchmark, split_new_org,
    standard_ablation, BenchmarkConfig, ReportTable, SyntheticSpec,
};
use crate::graph::{build_graph_pruned, InteractionGraph};
use crate::ingest::{accumulate_stats, parse_event_log, read_event_log, EventRecord, FeatureRef, RelationSchema};
use crate::model::{encode, infer_with, ModelConfig, PcfParams};
use crate::pretrain::{train, write_loss_trace, TrainConfig};
use crate::sescf::{build_table, graph_memory_report, CostModel, KeyCost};

pub const CONFIG_ENV: &str = "PCFGNN_CONFIG";

#[derive(Debug, Parser)]
#[command(name = "pcfgnn", version, about = "Pre-trained cross-feature graph networks")]
pub struct Cli {
    /// Master seed fanned out to every named random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// key=value config file; defaults to $PCFGNN_CONFIG when set.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set epochs=50`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Manifest path; defaults to `<primary output>.manifest.json`.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Event log -> interaction graph.
    BuildGraph(BuildGraphArgs),
    /// Pre-train the encoder and CrossNet on a graph.
    Pretrain(PretrainArgs),
    /// Infer cross-feature values for feature pairs.
    Infer(InferArgs),
    /// Export the statistical cross-feature table.
    ExportSescf(ExportArgs),
    /// Train the downstream click model.
    TrainCtr(TrainCtrArgs),
    /// No-ESCF / SESCF / PCF comparison on given logs or the synthetic benchmark.
    Eval(EvalArgs),
    /// Analytic storage cost of the table versus the encoder.
    MemoryReport(MemoryArgs),
    /// Base / +GNN / +WL / +FT ablation.
    Ablate(EvalArgs),
}

#[derive(Debug, Args)]
pub struct BuildGraphArgs {
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long)]
    pub schema: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the edge list as TSV.
    #[arg(long)]
    pub tsv: Option<PathBuf>,
    /// Drop pairs seen fewer times than this.
    #[arg(long, default_value_t = 1)]
    pub min_count: u64,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Loss trace TSV; defaults to `<out>.loss.tsv`.
    #[arg(long)]
    pub loss_trace: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub graph: PathBuf,
    /// TSV rows `u_field, u_value, v_field, v_value` (header optional).
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainCtrArgs {
    #[arg(long)]
    pub schema: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    /// `none`, `sescf` or `pcf`.
    #[arg(long, default_value = "none")]
    pub source: String,
    /// Pre-training graph (required for sescf and pcf).
    #[arg(long)]
    pub graph: Option<PathBuf>,
    /// Pre-trained encoder checkpoint (required for pcf).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub fine_tune: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Test log to score after training.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Prediction TSV for `--test`; defaults to `<out>.predictions.tsv`.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Generate the planted-factor benchmark instead of reading logs.
    #[arg(long)]
    pub synthetic: bool,
    /// Run the ablation matrix (the `ablate` subcommand implies this).
    #[arg(long)]
    pub ablate: bool,
    /// Number of seeds for the synthetic benchmark, starting at `--seed`.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Pre-training log; the graph is built from it unless `--graph` is given.
    #[arg(long)]
    pub pretrain: Option<PathBuf>,
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Output directory for report TSV and text files.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct MemoryArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Key-cost model: `strings` or `fixed:<pair bytes>:<node bytes>`.
    #[arg(long, default_value = "strings")]
    pub key_cost: String,
    /// Per-entry index overhead of the table in bytes.
    #[arg(long)]
    pub entry_overhead: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Error tagged with the pipeline stage that produced it.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub error: Error,
}

impl std::fmt::Display for StageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}]: {}", self.stage, self.error)
    }
}

trait Stage<T> {
    fn stage(self, stage: &'static str) -> std::result::Result<T, StageError>;
}

impl<T> Stage<T> for Result<T> {
    fn stage(self, stage: &'static str) -> std::result::Result<T, StageError> {
        self.map_err(|error| StageError { stage, error })
    }
}

type StageResult<T> = std::result::Result<T, StageError>;

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: String,
    /// Resolved configuration after precedence flag > file > default.
    pub config: BTreeMap<String, String>,
    /// Where each non-default key came from.
    pub config_sources: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub timings_ms: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

impl RunManifest {
    fn new(subcommand: &str) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: BTreeMap::new(),
            config_sources: BTreeMap::new(),
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings_ms: BTreeMap::new(),
            warnings: Vec::new(),
        }
    }

    fn artifact(path: &Path) -> Result<Artifact> {
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Artifact {
            path: path.display().to_string(),
            sha256: sha256_hex(&data),
        })
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(Self::artifact(path)?);
        Ok(())
    }

    fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(Self::artifact(path)?);
        Ok(())
    }

    fn warn(&mut self, message: String) {
        eprintln!("warning: {message}");
        self.warnings.push(message);
    }

    fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.timings_ms
            .insert(stage.to_string(), start.elapsed().as_secs_f64() * 1e3);
        out
    }

    fn record_config(&mut self, resolved: &KvConfig) {
        for (k, v) in resolved.entries() {
            self.config.insert(k.clone(), v.clone());
        }
    }

    fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format {
            kind: "manifest",
            message: e.to_string(),
        })?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Layered configuration: file entries overlaid by `--set` and typed flags.
struct Layers {
    merged: KvConfig,
    sources: BTreeMap<String, String>,
}

impl Layers {
    fn load(cli: &Cli) -> Result<Self> {
        let mut merged = KvConfig::default();
        let mut sources = BTreeMap::new();
        let path = cli
            .config
            .clone()
            .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
        if let Some(p) = path {
            let file = KvConfig::load(&p)?;
            for (k, _) in file.entries() {
                sources.insert(k.clone(), format!("file:{}", p.display()));
            }
            merged.overlay(&file);
        }
        let mut layers = Self { merged, sources };
        for o in &cli.overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config {
                key: o.clone(),
                message: "expected KEY=VALUE".into(),
            })?;
            layers.flag(k.trim(), v.trim());
        }
        if let Some(s) = cli.seed {
            layers.flag("seed", s);
            layers.flag("ctr_seed", s);
        }
        Ok(layers)
    }

    fn flag(&mut self, key: &str, value: impl ToString) {
        self.merged.set(key, value);
        self.sources.insert(key.to_string(), "flag".into());
    }
}

/// Runs the CLI; returns the process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error{e}");
            1
        }
    }
}

pub fn run(cli: &Cli) -> StageResult<()> {
    let threads = cli.threads.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::contract(format!("thread pool: {e}")))
        .stage("setup")?;
    pool.install(|| dispatch(cli))
}

fn dispatch(cli: &Cli) -> StageResult<()> {
    let mut layers = Layers::load(cli).stage("config")?;
    let (name, default_manifest, mut manifest) = match &cli.command {
        Command::BuildGraph(a) => ("build-graph", manifest_path(&a.out), build_graph_cmd(a, &mut layers)?),
        Command::Pretrain(a) => ("pretrain", manifest_path(&a.out), pretrain_cmd(a, &mut layers)?),
        Command::Infer(a) => ("infer", manifest_path(&a.out), infer_cmd(a)?),
        Command::ExportSescf(a) => ("export-sescf", manifest_path(&a.out), export_cmd(a)?),
        Command::TrainCtr(a) => ("train-ctr", manifest_path(&a.out), train_ctr_cmd(a, &mut layers)?),
        Command::Eval(a) => ("eval", a.out_dir.join("manifest.json"), eval_cmd(a, a.ablate, cli, &mut layers)?),
        Command::MemoryReport(a) => ("memory-report", manifest_path(&a.out), memory_cmd(a, &mut layers)?),
        Command::Ablate(a) => ("ablate", a.out_dir.join("manifest.json"), eval_cmd(a, true, cli, &mut layers)?),
    };
    manifest.subcommand = name.to_string();
    manifest.config_sources = layers.sources.clone();
    if let Some(t) = cli.threads {
        manifest.config.insert("threads".into(), t.to_string());
    }
    let path = cli.manifest.clone().unwrap_or(default_manifest);
    manifest.write(&path).stage("manifest")
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn with_suffix(out: &Path, suffix: &str) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn build_graph_cmd(a: &BuildGraphArgs, layers: &mut Layers) -> StageResult<RunManifest> {
    let mut m = RunManifest::new("build-graph");
    let schema = RelationSchema::load(&a.schema).stage("schema")?;
    m.input(&a.schema).stage("schema")?;
    let file = File::open(&a.log).map_err(|e| Error::io(&a.log, e)).stage("ingest")?;
    m.input(&a.log).stage("ingest")?;
    let events = m
        .time("ingest", || {
            parse_event_log(BufReader::new(file), &schema).collect::<Result<Vec<EventRecord>>>()
        })
        .stage("ingest")?;
    if events.is_empty() {
        m.warn(format!("{} contains no events; the graph is empty", a.log.display()));
    }
    let stats = m.time("accumulate", || accumulate_stats(&events, &schema));
    let graph = m.time("build", || build_graph_pruned(&stats, &schema, a.min_count));
    graph.save(&a.out).stage("save")?;
    m.output(&a.out).stage("save")?;
    if let Some(tsv) = &a.tsv {
        graph.write_tsv(create(tsv).stage("save")?).stage("save")?;
        m.output(tsv).stage("save")?;
    }
    layers.flag("min_count", a.min_count);
    m.record_config(&layers.merged);
    eprintln!(
        "graph: {} events, {} nodes, {} edges",
        events.len(),
        graph.node_count(),
        graph.edge_count()
    );
    Ok(m)
}

fn resolve_pretrain(layers: &Layers) -> Result<(ModelConfig, TrainConfig, KvConfig)> {
    let mut model = ModelConfig::default();
    model.apply(&layers.merged)?;
    let mut cfg = TrainConfig::default();
    cfg.apply(&layers.merged)?;
    let mut kv = KvConfig::default();
    model.write(&mut kv);
    cfg.write(&mut kv);
    Ok((model, cfg, kv))
}

fn pretrain_cmd(a: &PretrainArgs, layers: &mut Layers) -> StageResult<RunManifest> {
    let mut m = RunManifest::new("pretrain");
    if let Some(e) = a.epochs {
        layers.flag("epochs", e);
    }
    if let Some(lr) = a.learning_rate {
        layers.flag("learning_rate", lr);
    }
    let (model, cfg, kv) = resolve_pretrain(layers).stage("config")?;
    m.record_config(&kv);
    m.seeds.insert("pretrain".into(), cfg.seed);
    let graph = InteractionGraph::load(&a.graph).stage("load-graph")?;
    m.input(&a.graph).stage("load-graph")?;
    let out = m.time("train", || train(&graph, &model, &cfg)).stage("pretrain")?;
    out.params.save(&a.out).stage("save")?;
    m.output(&a.out).stage("save")?;
    let trace = a.loss_trace.clone().unwrap_or_else(|| with_suffix(&a.out, ".loss.tsv"));
    write_loss_trace(create(&trace).stage("save")?, &out.loss_trace).stage("save")?;
    m.output(&trace).stage("save")?;
    if let Some(last) = out.loss_trace.last() {
        eprintln!("final loss {last:.6} after {} epochs", out.loss_trace.len());
    }
    Ok(m)
}

fn read_pairs(path: &Path) -> Result<Vec<(FeatureRef, FeatureRef)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected 4 columns, found {}", cols.len()),
            });
        }
        if i == 0 && cols[0] == "u_field" {
            continue;
        }
        out.push((FeatureRef::new(cols[0], cols[1]), FeatureRef::new(cols[2], cols[3])));
    }
    Ok(out)
}

fn infer_cmd(a: &InferArgs) -> StageResult<RunManifest> {
    let mut m = RunManifest::new("infer");
    let graph = InteractionGraph::load(&a.graph).stage("load-graph")?;
    m.input(&a.graph).stage("load-graph")?;
    let params = PcfParams::load(&a.checkpoint).stage("load-checkpoint")?;
    params.check_graph(&graph).stage("load-checkpoint")?;
    m.input(&a.checkpoint).stage("load-checkpoint")?;
    let pairs = read_pairs(&a.pairs).stage("read-pairs")?;
    m.input(&a.pairs).stage("read-pairs")?;
    let encoded = m.time("encode", || encode(&graph, &params));
    let mut w = create(&a.out).stage("write")?;
    let mut write = || -> Result<()> {
        writeln!(w, "u_field\tu_value\tv_field\tv_value\tpredicted")?;
        for (u, v) in &pairs {
            let p = infer_with(&graph, &params, &encoded, u, v)
                .map_or_else(|| "NA".to_string(), |p| p.to_string());
            writeln!(w, "{}\t{}\t{}\t{}\t{}", u.field, u.value, v.field, v.value, p)?;
        }
        w.flush()?;
        Ok(())
    };
    write().stage("write")?;
    m.output(&a.out).stage("write")?;
    Ok(m)
}

fn export_cmd(a: &ExportArgs) -> StageResult<RunManifest> {
    let mut m = RunManifest::new("export-sescf");
    let graph = InteractionGraph::load(&a.graph).stage("load-graph")?;
    m.input(&a.graph).stage("load-graph")?;
    let table = build_table(&graph);
    table.write_tsv(create(&a.out).stage("write")?).stage("write")?;
    m.output(&a.out).stage("write")?;
    Ok(m)
}

fn load_source(
    kind: &str,
    graph: Option<&Path>,
    checkpoint: Option<&Path>,
    fine_tune: bool,
    m: &mut RunManifest,
) -> StageResult<(CrossFeatureSource, Option<Arc<InteractionGraph>>)> {
    let need_graph = || {
        graph
            .ok_or_else(|| Error::contract(format!("--source {kind} needs --graph")))
            .stage("source")
    };
    match kind {
        "none" => Ok((CrossFeatureSource::None, None)),
        "sescf" => {
            let p = need_graph()?;
            let g = InteractionGraph::load(p).stage("load-graph")?;
            m.input(p).stage("load-graph")?;
            Ok((CrossFeatureSource::sescf(&g), Some(Arc::new(g))))
        }
        "pcf" => {
            let p = need_graph()?;
            let g = Arc::new(InteractionGraph::load(p).stage("load-graph")?);
            m.input(p).stage("load-graph")?;
            let c = checkpoint
                .ok_or_else(|| Error::contract("--source pcf needs --checkpoint"))
                .stage("source")?;
            let params = PcfParams::load(c).stage("load-checkpoint")?;
            m.input(c).stage("load-checkpoint")?;
            let src = CrossFeatureSource::pcf(g.clone(), params, fine_tune).stage("source")?;
            Ok((src, Some(g)))
        }
        other => Err(Error::Config {
            key: "source".into(),
            message: format!("unknown source `{other}` (none, sescf, pcf)"),
        })
        .stage("config"),
    }
}

fn train_ctr_cmd(a: &TrainCtrArgs, layers: &mut Layers) -> StageResult<RunManifest> {
    let mut m = RunManifest::new("train-ctr");
    if a.fine_tune {
        layers.flag("fine_tune", true);
    }
    let mut cfg = CtrConfig::default();
    cfg.apply(&layers.merged).stage("config")?;
    let mut kv = KvConfig::default();
    cfg.write(&mut kv);
    kv.set("source", &a.source);
    m.record_config(&kv);
    m.seeds.insert("ctr".into(), cfg.seed);
    let schema = RelationSchema::load(&a.schema).stage("schema")?;
    m.input(&a.schema).stage("schema")?;
    let (source, _) = load_source(
        &a.source,
        a.graph.as_deref(),
        a.checkpoint.as_deref(),
        cfg.fine_tune,
        &mut m,
    )?;
    let train_set = read_event_log(&a.train, &schema).stage("ingest")?;
    m.input(&a.train).stage("ingest")?;
    let out = m
        .time("train", || train_ctr(&train_set, &schema, &source, &cfg))
        .stage("train-ctr")?;
    out.model.save(&a.out).stage("save")?;
    m.output(&a.out).stage("save")?;
    if let Some(test) = &a.test {
        let records = read_event_log(test, &schema).stage("ingest")?;
        m.input(test).stage("ingest")?;
        let scores = predict_all(&out.model, &records, &source).stage("predict")?;
        let path = a
            .predictions
            .clone()
            .unwrap_or_else(|| with_suffix(&a.out, ".predictions.tsv"));
        let mut w = create(&path).stage("write")?;
        write_predictions(&mut w, &records, &scores).stage("write")?;
        w.flush().map_err(Error::from).stage("write")?;
        m.output(&path).stage("write")?;
        if let Ok(v) = crate::eval::auc(&records.iter().map(|r| r.label).collect::<Vec<_>>(), &scores) {
            eprintln!("test auc {v:.6}");
        }
    }
    Ok(m)
}

fn write_table(dir: &Path, stem: &str, table: &ReportTable, m: &mut RunManifest) -> Result<()> {
    let tsv = dir.join(format!("{stem}.tsv"));
    std::fs::write(&tsv, table.to_tsv()).map_err(|e| Error::io(&tsv, e))?;
    m.output(&tsv)?;
    let txt = dir.join(format!("{stem}.txt"));
    std::fs::write(&txt, table.to_text()).map_err(|e| Error::io(&txt, e))?;
    m.output(&txt)?;
    Ok(())
}

fn eval_cmd(a: &EvalArgs, ablate: bool, cli: &Cli, layers: &mut Layers) -> StageResult<RunManifest> {
    let mut m = RunManifest::new(if ablate { "ablate" } else { "eval" });
    std::fs::create_dir_all(&a.out_dir)
        .map_err(|e| Error::io(&a.out_dir, e))
        .stage("setup")?;
    let mut cfg = BenchmarkConfig::default();
    cfg.apply(&layers.merged).stage("config")?;
    let mut kv = KvConfig::default();
    cfg.write(&mut kv);
    let base_seed = cli.seed.unwrap_or(0);
    let run = |graph: Arc<InteractionGraph>, train_set: &[EventRecord], test: &[EventRecord], seed: u64| {
        if ablate {
            run_ablation(graph, train_set, test, &cfg, &standard_ablation(), seed)
        } else {
            run_benchmark(graph, train_set, test, &cfg, seed)
        }
    };
    let stem = if ablate { "ablation" } else { "report" };
    if a.synthetic {
        let mut spec = SyntheticSpec::default();
        spec.apply(&layers.merged).stage("config")?;
        spec.write(&mut kv);
        m.record_config(&kv);
        let mut tables = Vec::new();
        for seed in base_seed..base_seed + a.seeds.max(1) {
            let spec = SyntheticSpec { seed, ..spec.clone() };
            let data = generate_synthetic(&spec).stage("synthetic")?;
            let graph = Arc::new(pretrain_graph(&data.pretrain, &data.schema));
            let table = m
                .time(&format!("seed_{seed}"), || run(graph, &data.train, &data.test, seed))
                .stage(if ablate { "ablate" } else { "eval" })?;
            m.seeds.insert(format!("run_{seed}"), seed);
            write_table(&a.out_dir, &format!("{stem}_seed{seed}"), &table, &mut m).stage("write")?;
            tables.push(table);
        }
        let summary = average_tables(&tables);
        let path = a.out_dir.join(format!("{stem}_summary.tsv"));
        let mut text = String::from("name\tmean_auc\tstd_error\tseeds\n");
        for (name, (mean, se)) in &summary {
            text.push_str(&format!("{name}\t{mean:.6}\t{se:.6}\t{}\n", tables.len()));
        }
        std::fs::write(&path, &text).map_err(|e| Error::io(&path, e)).stage("write")?;
        m.output(&path).stage("write")?;
        print!("{text}");
        return Ok(m);
    }
    m.record_config(&kv);
    let missing = |what: &str| Error::contract(format!("--{what} is required without --synthetic"));
    let schema_path = a.schema.as_ref().ok_or_else(|| missing("schema")).stage("config")?;
    let schema = RelationSchema::load(schema_path).stage("schema")?;
    m.input(schema_path).stage("schema")?;
    let graph = match (&a.graph, &a.pretrain) {
        (Some(g), _) => {
            m.input(g).stage("load-graph")?;
            InteractionGraph::load(g).stage("load-graph")?
        }
        (None, Some(p)) => {
            m.input(p).stage("ingest")?;
            pretrain_graph(&read_event_log(p, &schema).stage("ingest")?, &schema)
        }
        (None, None) => return Err(missing("graph or --pretrain")).stage("config"),
    };
    let train_path = a.train.as_ref().ok_or_else(|| missing("train")).stage("config")?;
    let test_path = a.test.as_ref().ok_or_else(|| missing("test")).stage("config")?;
    let train_set = read_event_log(train_path, &schema).stage("ingest")?;
    let test = read_event_log(test_path, &schema).stage("ingest")?;
    m.input(train_path).stage("ingest")?;
    m.input(test_path).stage("ingest")?;
    m.seeds.insert("run".into(), base_seed);
    let table = m
        .time("run", || run(Arc::new(graph), &train_set, &test, base_seed))
        .stage(if ablate { "ablate" } else { "eval" })?;
    write_table(&a.out_dir, stem, &table, &mut m).stage("write")?;
    print!("{}", table.to_text());
    Ok(m)
}

fn parse_key_cost(s: &str) -> Result<KeyCost> {
    let bad = || Error::Config {
        key: "key_cost".into(),
        message: format!("`{s}`: expected `strings` or `fixed:<pair>:<node>`"),
    };
    if s == "strings" {
        return Ok(KeyCost::Strings { field_id_bytes: 1 });
    }
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        ["fixed", p, n] => Ok(KeyCost::Fixed {
            pair: p.parse().map_err(|_| bad())?,
            node: n.parse().map_err(|_| bad())?,
        }),
        _ => Err(bad()),
    }
}

fn memory_cmd(a: &MemoryArgs, layers: &mut Layers) -> StageResult<RunManifest> {
    let mut m = RunManifest::new("memory-report");
    let graph = InteractionGraph::load(&a.graph).stage("load-graph")?;
    m.input(&a.graph).stage("load-graph")?;
    let params = PcfParams::load(&a.checkpoint).stage("load-checkpoint")?;
    params.check_graph(&graph).stage("load-checkpoint")?;
    m.input(&a.checkpoint).stage("load-checkpoint")?;
    let mut cost = CostModel {
        key: parse_key_cost(&a.key_cost).stage("config")?,
        ..CostModel::default()
    };
    if let Some(o) = a.entry_overhead {
        cost.entry_overhead = o;
    }
    layers.flag("key_cost", &a.key_cost);
    layers.flag("entry_overhead", cost.entry_overhead);
    m.record_config(&layers.merged);
    let report = graph_memory_report(&graph, &build_table(&graph), &params, &cost);
    std::fs::write(&a.out, report.to_kv())
        .map_err(|e| Error::io(&a.out, e))
        .stage("write")?;
    m.output(&a.out).stage("write")?;
    print!("{}", report.to_text());
    Ok(m)
}

/// Scores an already-trained click model; used by the examples.
pub fn score_log(
    model: &CtrModel,
    source: &CrossFeatureSource,
    test: &[EventRecord],
    graph: &InteractionGraph,
) -> Result<crate::eval::EvalReport> {
    let new_idx = split_new_org(test, graph, model.schema());
    evaluate("model", model, source, test, &new_idx)
}
