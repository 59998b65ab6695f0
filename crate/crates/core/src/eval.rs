//! Metrics and experiment protocols: AUC, hit rate, the New/Org split, the
//! planted-factor synthetic benchmark and the ablation runner.

use std::collections::{BTreeMap, HashMap};
use std::io::BufRead;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::config::KvConfig;
use crate::ctr::{predict_all, train_ctr, CrossFeatureSource, CtrConfig, CtrModel};
use crate::error::{Error, Result};
use crate::graph::{build_graph, Edge, InteractionGraph, NodeId};
use crate::ingest::{accumulate_stats, EventRecord, FeatureRef, RelationSchema};
use crate::model::{cross_predict, encode, ModelConfig};
use crate::pretrain::{train, TrainConfig};
use crate::rng::{child_seed, substream};

/// Area under the ROC curve via the rank-sum statistic with average ranks for ties.
pub fn auc(labels: &[u8], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::Metric(format!(
            "{} labels but {} scores",
            labels.len(),
            scores.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric(format!(
            "AUC undefined with {pos} positive and {neg} negative labels"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of 2·rank over positives keeps tie averages integral
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_avg = (i + 1 + j + 1) as u128;
        let p = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        twice_rank_sum += p * twice_avg;
        i = j + 1;
    }
    let (pos, neg) = (pos as u128, neg as u128);
    let twice_u = twice_rank_sum - pos * (pos + 1);
    Ok(twice_u as f64 / (2 * pos * neg) as f64)
}

/// Indices of test records whose every cross pair is absent from the graph.
/// The Org set is the whole test set.
pub fn split_new_org(records: &[EventRecord], graph: &InteractionGraph, schema: &RelationSchema) -> Vec<usize> {
    records
        .iter()
        .enumerate()
        .filter(|(_, rec)| {
            (0..schema.relation_count()).all(|r| {
                let (fa, fb) = schema.relations()[r];
                rec.pairs(schema, r).all(|(a, b)| {
                    match (graph.node_by_field(fa, a), graph.node_by_field(fb, b)) {
                        (Some(u), Some(v)) => graph.edge_between(u, v, r).is_none(),
                        _ => true,
                    }
                })
            })
        })
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HitRate {
    /// Fraction of records with every relation resolved.
    pub per_sample: f64,
    /// Fraction of (record, relation) queries resolved.
    pub per_query: f64,
}

pub fn hit_rate(records: &[EventRecord], source: &CrossFeatureSource, schema: &RelationSchema) -> HitRate {
    let rels = schema.relation_count();
    if records.is_empty() || rels == 0 {
        return HitRate {
            per_sample: 0.0,
            per_query: 0.0,
        };
    }
    let (mut samples, mut queries) = (0usize, 0usize);
    for rec in records {
        let hits = (0..rels).filter(|&r| source.resolves(rec, schema, r)).count();
        queries += hits;
        if hits == rels {
            samples += 1;
        }
    }
    HitRate {
        per_sample: samples as f64 / records.len() as f64,
        per_query: queries as f64 / (records.len() * rels) as f64,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub name: String,
    pub source: String,
    pub auc_org: f64,
    /// `None` when the New subset is empty or single-class.
    pub auc_new: Option<f64>,
    pub hit_rate: f64,
    pub hit_rate_query: f64,
    pub n_test: usize,
    pub n_new: usize,
    pub delta_org: Option<f64>,
    pub delta_new: Option<f64>,
}

impl EvalReport {
    pub fn auc(&self) -> f64 {
        self.auc_org
    }
}

/// Scores a trained model on `test` and fills every column except the deltas.
pub fn evaluate(
    name: &str,
    model: &CtrModel,
    source: &CrossFeatureSource,
    test: &[EventRecord],
    new_idx: &[usize],
) -> Result<EvalReport> {
    let scores = predict_all(model, test, source)?;
    let labels: Vec<u8> = test.iter().map(|r| r.label).collect();
    let auc_org = auc(&labels, &scores)?;
    let nl: Vec<u8> = new_idx.iter().map(|&i| labels[i]).collect();
    let ns: Vec<f64> = new_idx.iter().map(|&i| scores[i]).collect();
    let auc_new = auc(&nl, &ns).ok();
    let hr = match source {
        CrossFeatureSource::None => HitRate {
            per_sample: 0.0,
            per_query: 0.0,
        },
        s => hit_rate(test, s, model.schema()),
    };
    Ok(EvalReport {
        name: name.to_string(),
        source: source.kind().to_string(),
        auc_org,
        auc_new,
        hit_rate: hr.per_sample,
        hit_rate_query: hr.per_query,
        n_test: test.len(),
        n_new: new_idx.len(),
        delta_org: None,
        delta_new: None,
    })
}

/// Fills Δ columns against the row named `baseline`.
pub fn attach_deltas(rows: &mut [EvalReport], baseline: &str) -> Result<()> {
    let base = rows
        .iter()
        .find(|r| r.name == baseline)
        .cloned()
        .ok_or_else(|| Error::contract(format!("no baseline row `{baseline}`")))?;
    for r in rows {
        r.delta_org = Some(r.auc_org - base.auc_org);
        r.delta_new = match (r.auc_new, base.auc_new) {
            (Some(a), Some(b)) => Some(a - b),
            _ => None,
        };
    }
    Ok(())
}

/// Report rows plus the configuration needed to reproduce them.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportTable {
    pub config: KvConfig,
    pub rows: Vec<EvalReport>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

fn signed(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:+.6}"))
}

const COLUMNS: [&str; 10] = [
    "name", "source", "auc_org", "auc_new", "hit_rate", "hit_rate_query", "delta_org", "delta_new", "n_test",
    "n_new",
];

impl ReportTable {
    fn cells(r: &EvalReport) -> [String; 10] {
        [
            r.name.clone(),
            r.source.clone(),
            format!("{:.6}", r.auc_org),
            opt(r.auc_new),
            format!("{:.4}", r.hit_rate),
            format!("{:.4}", r.hit_rate_query),
            signed(r.delta_org),
            signed(r.delta_new),
            r.n_test.to_string(),
            r.n_new.to_string(),
        ]
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.config.entries() {
            s.push_str(&format!("# {k}={v}\n"));
        }
        s.push_str(&COLUMNS.join("\t"));
        s.push('\n');
        for r in &self.rows {
            s.push_str(&Self::cells(r).join("\t"));
            s.push('\n');
        }
        s
    }

    pub fn to_text(&self) -> String {
        let cells: Vec<[String; 10]> = self.rows.iter().map(Self::cells).collect();
        let widths: Vec<usize> = (0..COLUMNS.len())
            .map(|c| cells.iter().map(|r| r[c].len()).chain([COLUMNS[c].len()]).max().unwrap_or(0))
            .collect();
        let line = |vals: Vec<&str>| {
            vals.iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (v, w))| if i < 2 { format!("{v:<w$}") } else { format!("{v:>w$}") })
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut s = String::new();
        s.push_str(&line(COLUMNS.to_vec()));
        s.push('\n');
        for r in &cells {
            s.push_str(&line(r.iter().map(String::as_str).collect()));
            s.push('\n');
        }
        s.push_str("\nconfig:\n");
        for (k, v) in self.config.entries() {
            s.push_str(&format!("  {k} = {v}\n"));
        }
        s
    }

    pub fn row(&self, name: &str) -> Option<&EvalReport> {
        self.rows.iter().find(|r| r.name == name)
    }
}

/// Planted-factor generator for a two-field (user, item) click log.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub users: usize,
    pub items: usize,
    pub latent_dim: usize,
    /// Mean of every latent coordinate; a shared offset gives the planted
    /// inner products a popularity component.
    pub latent_mean: f64,
    pub scale: f64,
    /// Standard deviation of the per-pair logit perturbation.
    pub noise: f64,
    /// Mean click logit after centering.
    pub bias: f64,
    /// Fraction of (user, item) pairs that never occur in the pre-training log.
    pub fresh_fraction: f64,
    /// Fraction of downstream samples drawn from those fresh pairs.
    pub new_fraction: f64,
    pub pretrain_samples: usize,
    pub train_samples: usize,
    pub test_samples: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            users: 200,
            items: 100,
            latent_dim: 4,
            latent_mean: 1.0,
            scale: 1.75,
            noise: 0.3,
            bias: -1.0,
            fresh_fraction: 0.25,
            new_fraction: 0.25,
            pretrain_samples: 50_000,
            train_samples: 20_000,
            test_samples: 10_000,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| {
            Err(Error::Config {
                key: key.into(),
                message: message.into(),
            })
        };
        if self.users == 0 || self.items == 0 || self.latent_dim == 0 {
            return bad("users/items/latent_dim", "must be positive");
        }
        if self.pretrain_samples == 0 || self.train_samples == 0 || self.test_samples == 0 {
            return bad("samples", "sample counts must be at least 1");
        }
        if self.noise.is_nan() || self.noise < 0.0 {
            return bad("noise", "must be non-negative");
        }
        for (k, v) in [("fresh_fraction", self.fresh_fraction), ("new_fraction", self.new_fraction)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(k, "must lie in [0,1]");
            }
        }
        if self.fresh_fraction >= 1.0 {
            return bad("fresh_fraction", "pre-training needs at least one non-fresh pair");
        }
        Ok(())
    }

    /// Keys: users, items, latent_dim, latent_mean, scale, noise, bias,
    /// fresh_fraction, new_fraction, pretrain_samples, train_samples,
    /// test_samples, seed.
    pub fn apply(&mut self, cfg: &KvConfig) -> Result<()> {
        macro_rules! take {
            ($($key:ident),*) => {$(
                if let Some(v) = cfg.parsed(stringify!($key))? {
                    self.$key = v;
                }
            )*};
        }
        take!(
            users, items, latent_dim, latent_mean, scale, noise, bias, fresh_fraction, new_fraction,
            pretrain_samples, train_samples, test_samples, seed
        );
        self.validate()
    }

    pub fn write(&self, cfg: &mut KvConfig) {
        cfg.set("users", self.users);
        cfg.set("items", self.items);
        cfg.set("latent_dim", self.latent_dim);
        cfg.set("latent_mean", self.latent_mean);
        cfg.set("scale", self.scale);
        cfg.set("noise", self.noise);
        cfg.set("bias", self.bias);
        cfg.set("fresh_fraction", self.fresh_fraction);
        cfg.set("new_fraction", self.new_fraction);
        cfg.set("pretrain_samples", self.pretrain_samples);
        cfg.set("train_samples", self.train_samples);
        cfg.set("test_samples", self.test_samples);
        cfg.set("seed", self.seed);
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub schema: RelationSchema,
    pub pretrain: Vec<EventRecord>,
    pub train: Vec<EventRecord>,
    pub test: Vec<EventRecord>,
    /// Planted click probability, row-major users × items.
    pub probabilities: Vec<f64>,
    /// Row-major users × items mask of pairs withheld from pre-training.
    pub fresh: Vec<bool>,
    pub users: usize,
    pub items: usize,
}

impl SyntheticData {
    pub fn probability(&self, user: usize, item: usize) -> f64 {
        self.probabilities[user * self.items + item]
    }
}

pub fn synthetic_schema() -> RelationSchema {
    RelationSchema::new(&["user", "item"], &[("user", "item")]).expect("static schema")
}

/// Draws the three logs of a planted-factor benchmark.
///
/// Click logit of pair (u, v) is `scale·⟨z_u, z_v⟩/√dim + noise·ε_uv`, shifted
/// so its mean over all pairs equals `bias`. Pre-training samples come only
/// from non-fresh pairs; each downstream sample is drawn from the fresh pairs
/// with probability `new_fraction`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let (n1, n2, d) = (spec.users, spec.items, spec.latent_dim);
    let mut lat = substream(spec.seed, "synthetic/latent");
    let mut draw_latents = |n: usize| -> Vec<f64> {
        (0..n * d)
            .map(|_| spec.latent_mean + lat.sample::<f64, _>(StandardNormal))
            .collect()
    };
    let zu = draw_latents(n1);
    let zv = draw_latents(n2);
    let mut noise_rng = substream(spec.seed, "synthetic/noise");
    let norm = (d as f64).sqrt();
    let mut logits: Vec<f64> = Vec::with_capacity(n1 * n2);
    for u in 0..n1 {
        for v in 0..n2 {
            let ip: f64 = (0..d).map(|k| zu[u * d + k] * zv[v * d + k]).sum();
            let e: f64 = noise_rng.sample(StandardNormal);
            logits.push(spec.scale * ip / norm + spec.noise * e);
        }
    }
    let shift = spec.bias - logits.iter().sum::<f64>() / logits.len() as f64;
    let probabilities: Vec<f64> = logits.iter().map(|l| 1.0 / (1.0 + (-(l + shift)).exp())).collect();

    let mut fresh_rng = substream(spec.seed, "synthetic/fresh");
    let fresh: Vec<bool> = (0..n1 * n2)
        .map(|_| fresh_rng.random::<f64>() < spec.fresh_fraction)
        .collect();
    let fresh_pairs: Vec<usize> = (0..n1 * n2).filter(|&i| fresh[i]).collect();
    let old_pairs: Vec<usize> = (0..n1 * n2).filter(|&i| !fresh[i]).collect();
    if old_pairs.is_empty() {
        return Err(Error::contract("every pair is fresh; nothing to pre-train on"));
    }

    let sample = |name: &str, n: usize, new_fraction: f64| -> Vec<EventRecord> {
        let mut rng = substream(spec.seed, name);
        (0..n)
            .map(|_| {
                let use_new = !fresh_pairs.is_empty() && rng.random::<f64>() < new_fraction;
                let pool = if use_new { &fresh_pairs } else { &old_pairs };
                let pair = pool[rng.random_range(0..pool.len())];
                let label = u8::from(rng.random::<f64>() < probabilities[pair]);
                EventRecord::single(label, [format!("u{}", pair / n2), format!("i{}", pair % n2)])
            })
            .collect()
    };
    Ok(SyntheticData {
        schema: synthetic_schema(),
        pretrain: sample("synthetic/pretrain", spec.pretrain_samples, 0.0),
        train: sample("synthetic/train", spec.train_samples, spec.new_fraction),
        test: sample("synthetic/test", spec.test_samples, spec.new_fraction),
        probabilities,
        fresh,
        users: n1,
        items: n2,
    })
}

/// Pre-training, encoder and downstream settings shared by every benchmark row.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkConfig {
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub ctr: CtrConfig,
}

impl Default for BenchmarkConfig {
    /// Library defaults except pre-training, which runs 200 epochs of
    /// 1024-edge minibatches.
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            pretrain: TrainConfig {
                epochs: 200,
                batch: Some(1024),
                ..TrainConfig::default()
            },
            ctr: CtrConfig::default(),
        }
    }
}

impl BenchmarkConfig {
    pub fn apply(&mut self, cfg: &KvConfig) -> Result<()> {
        self.model.apply(cfg)?;
        self.pretrain.apply(cfg)?;
        self.ctr.apply(cfg)
    }

    pub fn write(&self, cfg: &mut KvConfig) {
        self.model.write(cfg);
        self.pretrain.write(cfg);
        self.ctr.write(cfg);
    }

    /// Copy with the pre-training and CTR seeds fanned out from `seed`.
    pub fn seeded(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.pretrain.seed = child_seed(seed, "pretrain");
        c.ctr.seed = child_seed(seed, "ctr");
        c
    }
}

pub fn pretrain_graph(records: &[EventRecord], schema: &RelationSchema) -> InteractionGraph {
    build_graph(&accumulate_stats(records, schema), schema)
}

fn pcf_source(
    graph: &Arc<InteractionGraph>,
    model: &ModelConfig,
    pretrain: &TrainConfig,
    fine_tune: bool,
) -> Result<CrossFeatureSource> {
    let out = train(graph, model, pretrain)?;
    CrossFeatureSource::pcf(graph.clone(), out.params, fine_tune)
}

fn fit_and_evaluate(
    name: &str,
    source: &CrossFeatureSource,
    train_set: &[EventRecord],
    test: &[EventRecord],
    schema: &RelationSchema,
    ctr: &CtrConfig,
    new_idx: &[usize],
) -> Result<EvalReport> {
    let out = train_ctr(train_set, schema, source, ctr)?;
    evaluate(name, &out.model, source, test, new_idx)
}

/// No-ESCF, SESCF and PCF rows on one pre-training graph, with Δ columns
/// against the No-ESCF row. All randomness derives from `seed`.
pub fn run_benchmark(
    graph: Arc<InteractionGraph>,
    train_set: &[EventRecord],
    test: &[EventRecord],
    cfg: &BenchmarkConfig,
    seed: u64,
) -> Result<ReportTable> {
    let cfg = cfg.seeded(seed);
    let schema = graph.schema().clone();
    let new_idx = split_new_org(test, &graph, &schema);
    let pcf = pcf_source(&graph, &cfg.model, &cfg.pretrain, cfg.ctr.fine_tune)?;
    let sources = [
        ("no_escf", CrossFeatureSource::None),
        ("sescf", CrossFeatureSource::sescf(&graph)),
        ("pcf", pcf),
    ];
    let mut rows = sources
        .par_iter()
        .map(|(name, src)| fit_and_evaluate(name, src, train_set, test, &schema, &cfg.ctr, &new_idx))
        .collect::<Result<Vec<_>>>()?;
    attach_deltas(&mut rows, "no_escf")?;
    let mut kv = KvConfig::default();
    kv.set("run_seed", seed);
    cfg.write(&mut kv);
    Ok(ReportTable { config: kv, rows })
}

/// One ablation configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: String,
    /// Message-passing layers on; off means the raw embedding table (K=0).
    pub gnn: bool,
    pub weighted_loss: bool,
    pub fine_tune: bool,
}

/// Base / Base+GNN / Base+GNN+WL / Base+GNN+WL+FT.
pub fn standard_ablation() -> Vec<AblationRow> {
    let row = |name: &str, gnn, weighted_loss, fine_tune| AblationRow {
        name: name.to_string(),
        gnn,
        weighted_loss,
        fine_tune,
    };
    vec![
        row("base", false, false, false),
        row("base+gnn", true, false, false),
        row("base+gnn+wl", true, true, false),
        row("base+gnn+wl+ft", true, true, true),
    ]
}

/// Runs each row's pre-train, downstream-train and evaluation cycle in
/// parallel. Every row uses the same seeds so rows differ only by
/// configuration; a No-ESCF row is added for the Δ columns.
pub fn run_ablation(
    graph: Arc<InteractionGraph>,
    train_set: &[EventRecord],
    test: &[EventRecord],
    cfg: &BenchmarkConfig,
    rows: &[AblationRow],
    seed: u64,
) -> Result<ReportTable> {
    let cfg = cfg.seeded(seed);
    let schema = graph.schema().clone();
    let new_idx = split_new_org(test, &graph, &schema);
    let jobs: Vec<Option<&AblationRow>> = std::iter::once(None).chain(rows.iter().map(Some)).collect();
    let mut reports = jobs
        .par_iter()
        .map(|job| match job {
            None => fit_and_evaluate(
                "no_escf",
                &CrossFeatureSource::None,
                train_set,
                test,
                &schema,
                &cfg.ctr,
                &new_idx,
            ),
            Some(row) => {
                let mut model = cfg.model.clone();
                if !row.gnn {
                    model.layer_widths.clear();
                }
                let pretrain = TrainConfig {
                    weighted_loss: row.weighted_loss,
                    ..cfg.pretrain.clone()
                };
                let ctr = CtrConfig {
                    fine_tune: row.fine_tune,
                    ..cfg.ctr.clone()
                };
                let src = pcf_source(&graph, &model, &pretrain, row.fine_tune)?;
                fit_and_evaluate(&row.name, &src, train_set, test, &schema, &ctr, &new_idx)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    attach_deltas(&mut reports, "no_escf")?;
    let mut kv = KvConfig::default();
    kv.set("run_seed", seed);
    cfg.write(&mut kv);
    for r in rows {
        kv.push(
            "ablation_row",
            format!("{} gnn={} weighted_loss={} fine_tune={}", r.name, r.gnn, r.weighted_loss, r.fine_tune),
        );
    }
    Ok(ReportTable { config: kv, rows: reports })
}

/// Held-out edge prediction error of the encoder against the mean-attribute predictor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeFit {
    pub train_edges: usize,
    pub held_out: usize,
    pub model_rmse: f64,
    pub mean_rmse: f64,
}

impl EdgeFit {
    /// Relative RMSE reduction over the mean predictor.
    pub fn improvement(&self) -> f64 {
        1.0 - self.model_rmse / self.mean_rmse
    }
}

/// Withholds `holdout` of the edges, pre-trains on the rest (all nodes kept)
/// and predicts the withheld attributes.
pub fn edge_fit(
    graph: &InteractionGraph,
    model: &ModelConfig,
    cfg: &TrainConfig,
    holdout: f64,
    seed: u64,
) -> Result<EdgeFit> {
    if !(0.0..1.0).contains(&holdout) {
        return Err(Error::contract(format!("holdout fraction {holdout} outside [0,1)")));
    }
    let mut rng = substream(seed, "edge_fit/split");
    let (mut kept, mut held): (Vec<Edge>, Vec<Edge>) = (Vec::new(), Vec::new());
    for e in graph.edges() {
        if rng.random::<f64>() < holdout {
            held.push(*e);
        } else {
            kept.push(*e);
        }
    }
    if held.is_empty() || kept.is_empty() {
        return Err(Error::contract("edge split left one side empty"));
    }
    let nodes: Vec<FeatureRef> = (0..graph.node_count())
        .map(|i| graph.feature(NodeId(i as u32)))
        .collect();
    let train_graph = InteractionGraph::from_parts(graph.schema().clone(), nodes, kept)?;
    let out = train(&train_graph, model, cfg)?;
    let h = encode(&train_graph, &out.params);
    let mean = train_graph.mean_attribute().unwrap_or(0.0);
    let (mut se_model, mut se_mean) = (0.0, 0.0);
    for e in &held {
        let p = f64::from(cross_predict(h.row(e.u), h.row(e.v), &out.params));
        let a = f64::from(e.attribute);
        se_model += (p - a).powi(2);
        se_mean += (mean - a).powi(2);
    }
    let n = held.len() as f64;
    Ok(EdgeFit {
        train_edges: train_graph.edge_count(),
        held_out: held.len(),
        model_rmse: (se_model / n).sqrt(),
        mean_rmse: (se_mean / n).sqrt(),
    })
}

/// Fields `left`/`right` with every one of the `n1·n2` pairs observed once.
pub fn complete_bipartite(n1: usize, n2: usize) -> InteractionGraph {
    let schema = RelationSchema::new(&["left", "right"], &[("left", "right")]).expect("static schema");
    let mut nodes: Vec<FeatureRef> = (0..n1).map(|i| FeatureRef::new("left", format!("l{i}"))).collect();
    nodes.extend((0..n2).map(|j| FeatureRef::new("right", format!("r{j}"))));
    let edges = (0..n1)
        .flat_map(|i| {
            (0..n2).map(move |j| Edge {
                u: NodeId(i as u32),
                v: NodeId((n1 + j) as u32),
                relation: 0,
                count: 1,
                attribute: ((i + j) % 2) as f32,
            })
        })
        .collect();
    InteractionGraph::from_parts(schema, nodes, edges).expect("well-formed bipartite graph")
}

/// Converts MovieLens-1M `ratings.dat` and `movies.dat` into a click log with
/// fields `user`, `item`, `genre` (multi-valued) and relation (user, genre).
/// A rating of at least `threshold` counts as a click.
pub fn movielens_events<R1: BufRead, R2: BufRead>(
    ratings: R1,
    movies: R2,
    threshold: u8,
) -> Result<(RelationSchema, Vec<EventRecord>)> {
    let schema = RelationSchema::new(&["user", "item", "genre"], &[("user", "genre")])?;
    let mut genres: HashMap<String, Vec<String>> = HashMap::new();
    for (i, line) in movies.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split("::").collect();
        if parts.len() != 3 {
            return Err(Error::Parse {
                line: i + 1,
                message: "movies: expected MovieID::Title::Genres".into(),
            });
        }
        genres.insert(parts[0].to_string(), parts[2].split('|').map(str::to_string).collect());
    }
    let mut events = Vec::new();
    for (i, line) in ratings.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |m: &str| Error::Parse {
            line: i + 1,
            message: format!("ratings: {m}"),
        };
        let parts: Vec<&str> = line.split("::").collect();
        if parts.len() != 4 {
            return Err(err("expected UserID::MovieID::Rating::Timestamp"));
        }
        let rating: u8 = parts[2].parse().map_err(|_| err("bad rating"))?;
        let g = genres
            .get(parts[1])
            .ok_or_else(|| err(&format!("movie {} missing from movies file", parts[1])))?;
        events.push(EventRecord::new(
            u8::from(rating >= threshold),
            vec![vec![parts[0].to_string()], vec![parts[1].to_string()], g.clone()],
        ));
    }
    Ok((schema, events))
}

/// Mean and standard error of the mean.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Per-row means over several report tables sharing row names.
pub fn average_tables(tables: &[ReportTable]) -> BTreeMap<String, (f64, f64)> {
    let mut by: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for t in tables {
        for r in &t.rows {
            by.entry(r.name.clone()).or_default().push(r.auc_org);
        }
    }
    by.into_iter().map(|(k, v)| (k, mean_se(&v))).collect()
}
