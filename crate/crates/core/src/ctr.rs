//! Downstream Embedding&MLP click model that takes explicit cross-feature
//! values as extra raw inputs.
//!
//! Input vector: one `field_dim` embedding per schema field (mean over the
//! values of a multi-valued cell) followed by one scalar per relation when a
//! cross-feature source is attached. Hidden layers use ReLU; the output is a
//! sigmoid probability.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::codec::{Reader, Writer};
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::graph::{InteractionGraph, NodeId};
use crate::ingest::{EventRecord, RelationSchema};
use crate::model::{
    cross_backward, cross_logit, encode, encoder_backward, forward, EncodeOutput, PcfParams,
};
use crate::pretrain::{Optimizer, OptimizerState};
use crate::rng::{substream, Rng};
use crate::sescf::{build_table, SescfTable};
use crate::tensor::{affine, sigmoid, Matrix};

const MAGIC: &[u8; 4] = b"PCFC";
const VERSION: u32 = 1;

/// Provider of per-relation cross-feature values for the CTR input.
#[derive(Debug, Clone)]
pub enum CrossFeatureSource {
    /// No cross features: the input is embeddings only.
    None,
    Sescf { table: Arc<SescfTable>, fallback: f64 },
    Pcf(PcfSource),
}

#[derive(Debug, Clone)]
pub struct PcfSource {
    pub graph: Arc<InteractionGraph>,
    pub params: Arc<PcfParams<f32>>,
    pub encoded: Arc<EncodeOutput<f32>>,
    pub fine_tune: bool,
    pub fallback: f64,
}

impl CrossFeatureSource {
    /// Table source with the graph's mean edge attribute as fallback.
    pub fn sescf(graph: &InteractionGraph) -> Self {
        CrossFeatureSource::Sescf {
            table: Arc::new(build_table(graph)),
            fallback: default_fallback(graph),
        }
    }

    /// Inference source; pre-encodes every node once.
    pub fn pcf(graph: Arc<InteractionGraph>, params: PcfParams<f32>, fine_tune: bool) -> Result<Self> {
        params.check_graph(&graph)?;
        let encoded = encode(&graph, &params);
        let fallback = default_fallback(&graph);
        Ok(CrossFeatureSource::Pcf(PcfSource {
            graph,
            params: Arc::new(params),
            encoded: Arc::new(encoded),
            fine_tune,
            fallback,
        }))
    }

    pub fn with_fallback(mut self, value: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::contract(format!("fallback {value} outside [0,1]")));
        }
        match &mut self {
            CrossFeatureSource::None => {}
            CrossFeatureSource::Sescf { fallback, .. } => *fallback = value,
            CrossFeatureSource::Pcf(p) => p.fallback = value,
        }
        Ok(self)
    }

    pub fn kind(&self) -> SourceKind {
        match self {
            CrossFeatureSource::None => SourceKind::None,
            CrossFeatureSource::Sescf { .. } => SourceKind::Sescf,
            CrossFeatureSource::Pcf(_) => SourceKind::Pcf,
        }
    }

    pub fn fallback(&self) -> Option<f64> {
        match self {
            CrossFeatureSource::None => None,
            CrossFeatureSource::Sescf { fallback, .. } => Some(*fallback),
            CrossFeatureSource::Pcf(p) => Some(p.fallback),
        }
    }

    /// Whether the source can produce relation `r` of `record` without the
    /// fallback: every expanded pair in the table (SESCF), or every endpoint a
    /// known node (PCF).
    pub fn resolves(&self, record: &EventRecord, schema: &RelationSchema, r: usize) -> bool {
        let (fa, fb) = schema.relations()[r];
        match self {
            CrossFeatureSource::None => false,
            CrossFeatureSource::Sescf { table, .. } => record
                .pairs(schema, r)
                .all(|(a, b)| table.get(r, a, b).is_some()),
            CrossFeatureSource::Pcf(p) => {
                record.values(fa).iter().all(|v| p.graph.node_by_field(fa, v).is_some())
                    && record.values(fb).iter().all(|v| p.graph.node_by_field(fb, v).is_some())
            }
        }
    }
}

fn default_fallback(graph: &InteractionGraph) -> f64 {
    graph.mean_attribute().unwrap_or(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    None,
    Sescf,
    Pcf,
}

impl SourceKind {
    fn tag(self) -> u8 {
        match self {
            SourceKind::None => 0,
            SourceKind::Sescf => 1,
            SourceKind::Pcf => 2,
        }
    }
    fn from_tag(t: u8) -> Option<Self> {
        Some(match t {
            0 => SourceKind::None,
            1 => SourceKind::Sescf,
            2 => SourceKind::Pcf,
            _ => return None,
        })
    }
}

impl std::fmt::Display for SourceKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SourceKind::None => "none",
            SourceKind::Sescf => "sescf",
            SourceKind::Pcf => "pcf",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CtrConfig {
    pub field_dim: usize,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Back-propagate into the encoder parameters (PCF source only).
    pub fine_tune: bool,
    pub finetune_lr: f64,
    /// Share of the training log held out to pick the best epoch; 0 trains
    /// for exactly `epochs` epochs.
    pub validation_fraction: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for CtrConfig {
    fn default() -> Self {
        Self {
            field_dim: 8,
            hidden: vec![64, 32],
            epochs: 30,
            learning_rate: 0.005,
            batch_size: 256,
            seed: 0,
            fine_tune: false,
            finetune_lr: 0.001,
            validation_fraction: 0.1,
            patience: 3,
        }
    }
}

impl CtrConfig {
    /// Keys prefixed `ctr_`: `ctr_field_dim`, `ctr_hidden`, `ctr_epochs`,
    /// `ctr_learning_rate`, `ctr_batch`, `ctr_seed`, `ctr_validation`,
    /// `ctr_patience`, `fine_tune`, `finetune_lr`.
    pub fn apply(&mut self, cfg: &KvConfig) -> Result<()> {
        if let Some(v) = cfg.parsed("ctr_field_dim")? {
            self.field_dim = v;
        }
        if let Some(h) = cfg.get("ctr_hidden") {
            self.hidden = h
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse().map_err(|e| Error::Config {
                        key: "ctr_hidden".into(),
                        message: format!("`{s}`: {e}"),
                    })
                })
                .collect::<Result<_>>()?;
        }
        if let Some(v) = cfg.parsed("ctr_epochs")? {
            self.epochs = v;
        }
        if let Some(v) = cfg.parsed("ctr_learning_rate")? {
            self.learning_rate = v;
        }
        if let Some(v) = cfg.parsed("ctr_batch")? {
            self.batch_size = v;
        }
        if let Some(v) = cfg.parsed("ctr_seed")? {
            self.seed = v;
        }
        if let Some(v) = cfg.parsed("fine_tune")? {
            self.fine_tune = v;
        }
        if let Some(v) = cfg.parsed("finetune_lr")? {
            self.finetune_lr = v;
        }
        if let Some(v) = cfg.parsed("ctr_validation")? {
            self.validation_fraction = v;
        }
        if let Some(v) = cfg.parsed("ctr_patience")? {
            self.patience = v;
        }
        self.validate()
    }

    pub fn write(&self, cfg: &mut KvConfig) {
        cfg.set("ctr_field_dim", self.field_dim);
        cfg.set(
            "ctr_hidden",
            self.hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(","),
        );
        cfg.set("ctr_epochs", self.epochs);
        cfg.set("ctr_learning_rate", self.learning_rate);
        cfg.set("ctr_batch", self.batch_size);
        cfg.set("ctr_seed", self.seed);
        cfg.set("fine_tune", self.fine_tune);
        cfg.set("finetune_lr", self.finetune_lr);
        cfg.set("ctr_validation", self.validation_fraction);
        cfg.set("ctr_patience", self.patience);
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| {
            Err(Error::Config {
                key: key.into(),
                message: message.into(),
            })
        };
        if self.field_dim == 0 || self.hidden.contains(&0) {
            return bad("ctr_field_dim/ctr_hidden", "widths must be positive");
        }
        if self.batch_size == 0 {
            return bad("ctr_batch", "must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0 && self.finetune_lr.is_finite() && self.finetune_lr > 0.0) {
            return bad("ctr_learning_rate/finetune_lr", "must be positive");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("ctr_validation", "must lie in [0,1)");
        }
        if self.epochs == 0 {
            return bad("ctr_epochs", "must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix<f64>,
    pub bias: Vec<f64>,
}

/// Encoder parameters adapted during fine-tuning, with their current encoding.
#[derive(Debug, Clone)]
pub struct TunedPcf {
    pub params: PcfParams<f32>,
    pub encoded: EncodeOutput<f32>,
}

#[derive(Debug, Clone)]
pub struct CtrModel {
    schema: RelationSchema,
    field_dim: usize,
    source_kind: SourceKind,
    /// Per field: value → embedding row. Row 0 is reserved for unseen values.
    vocab: Vec<HashMap<String, usize>>,
    pub embeddings: Vec<Matrix<f64>>,
    pub layers: Vec<Dense>,
    pub tuned: Option<TunedPcf>,
}

/// Per-relation cross slot of a prepared sample.
#[derive(Debug, Clone)]
enum CrossSlot {
    Fixed(f64),
    /// Known-node pairs to average, plus how many pairs fell back.
    Nodes { pairs: Vec<(NodeId, NodeId)>, missing: usize },
}

#[derive(Debug, Clone)]
struct Prepared {
    label: f64,
    tokens: Vec<Vec<usize>>,
    cross: Vec<CrossSlot>,
}

/// Gradients of the CTR loss, laid out like the model's own tensors.
#[derive(Debug, Clone)]
pub struct CtrGradients {
    pub embeddings: Vec<Matrix<f64>>,
    pub layers: Vec<Dense>,
}

#[derive(Debug, Clone)]
pub struct CtrOutcome {
    pub model: CtrModel,
    /// Mean binary cross-entropy per epoch.
    pub loss_trace: Vec<f64>,
}

impl CtrModel {
    /// Fresh model with vocabulary taken from `records`.
    pub fn new(
        schema: &RelationSchema,
        records: &[EventRecord],
        source: SourceKind,
        cfg: &CtrConfig,
        rng: &mut Rng,
    ) -> Self {
        let nf = schema.fields().len();
        let mut values: Vec<BTreeSet<&str>> = vec![BTreeSet::new(); nf];
        for r in records {
            for (f, cell) in r.cells.iter().enumerate() {
                values[f].extend(cell.iter().map(String::as_str));
            }
        }
        let vocab: Vec<HashMap<String, usize>> = values
            .iter()
            .map(|vs| vs.iter().enumerate().map(|(i, v)| (v.to_string(), i + 1)).collect())
            .collect();
        let d = cfg.field_dim;
        let eb = 1.0 / (d as f64).sqrt();
        let embeddings = vocab
            .iter()
            .map(|v| {
                let mut m = Matrix::zeros(v.len() + 1, d);
                for x in &mut m.as_mut_slice()[d..] {
                    *x = rng.random_range(-eb..eb);
                }
                m
            })
            .collect();
        let n_cross = if source == SourceKind::None { 0 } else { schema.relation_count() };
        let mut width = nf * d + n_cross;
        let mut layers = Vec::new();
        for &out in cfg.hidden.iter().chain(std::iter::once(&1)) {
            let b = 1.0 / (width as f64).sqrt();
            let w = (0..width * out).map(|_| rng.random_range(-b..b)).collect();
            layers.push(Dense {
                weight: Matrix::from_vec(width, out, w),
                bias: vec![0.0; out],
            });
            width = out;
        }
        Self {
            schema: schema.clone(),
            field_dim: d,
            source_kind: source,
            vocab,
            embeddings,
            layers,
            tuned: None,
        }
    }

    pub fn schema(&self) -> &RelationSchema {
        &self.schema
    }

    pub fn source_kind(&self) -> SourceKind {
        self.source_kind
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].weight.rows()
    }

    fn cross_count(&self) -> usize {
        if self.source_kind == SourceKind::None {
            0
        } else {
            self.schema.relation_count()
        }
    }

    fn token(&self, field: usize, value: &str) -> usize {
        self.vocab[field].get(value).copied().unwrap_or(0)
    }

    fn check_source(&self, source: &CrossFeatureSource) -> Result<()> {
        if source.kind() != self.source_kind {
            return Err(Error::contract(format!(
                "model was trained with source `{}`, got `{}`",
                self.source_kind,
                source.kind()
            )));
        }
        Ok(())
    }

    fn prepare(&self, record: &EventRecord, source: &CrossFeatureSource) -> Prepared {
        let tokens = record
            .cells
            .iter()
            .enumerate()
            .map(|(f, cell)| cell.iter().map(|v| self.token(f, v)).collect())
            .collect();
        let cross = (0..self.cross_count())
            .map(|r| match source {
                CrossFeatureSource::None => unreachable!("no cross slots without a source"),
                CrossFeatureSource::Sescf { table, fallback } => {
                    let vals: Vec<f64> = record
                        .pairs(&self.schema, r)
                        .map(|(a, b)| table.get(r, a, b).map_or(*fallback, f64::from))
                        .collect();
                    CrossSlot::Fixed(vals.iter().sum::<f64>() / vals.len() as f64)
                }
                CrossFeatureSource::Pcf(p) => {
                    let (fa, fb) = self.schema.relations()[r];
                    let mut pairs = Vec::new();
                    let mut missing = 0;
                    for (a, b) in record.pairs(&self.schema, r) {
                        match (p.graph.node_by_field(fa, a), p.graph.node_by_field(fb, b)) {
                            (Some(u), Some(v)) => pairs.push((u, v)),
                            _ => missing += 1,
                        }
                    }
                    CrossSlot::Nodes { pairs, missing }
                }
            })
            .collect();
        Prepared {
            label: f64::from(record.label),
            tokens,
            cross,
        }
    }

    /// Cross values for a prepared sample from the given encoder state.
    fn cross_values(
        &self,
        s: &Prepared,
        source: &CrossFeatureSource,
        pcf: Option<(&PcfParams<f32>, &Matrix<f32>)>,
    ) -> Vec<f64> {
        s.cross
            .iter()
            .map(|slot| match slot {
                CrossSlot::Fixed(v) => *v,
                CrossSlot::Nodes { pairs, missing } => {
                    let (params, h) = pcf.expect("pcf state for node slots");
                    let fallback = source.fallback().unwrap_or(0.0);
                    let sum: f64 = pairs
                        .iter()
                        .map(|(u, v)| {
                            f64::from(sigmoid(cross_logit(h.row(u.index()), h.row(v.index()), params)))
                        })
                        .sum::<f64>()
                        + *missing as f64 * fallback;
                    sum / (pairs.len() + missing) as f64
                }
            })
            .collect()
    }

    fn pcf_state<'a>(&'a self, source: &'a CrossFeatureSource) -> Option<(&'a PcfParams<f32>, &'a Matrix<f32>)> {
        if let Some(t) = &self.tuned {
            return Some((&t.params, &t.encoded.embeddings));
        }
        match source {
            CrossFeatureSource::Pcf(p) => Some((&p.params, &p.encoded.embeddings)),
            _ => None,
        }
    }

    fn input_vector(&self, s: &Prepared, cross: &[f64]) -> Vec<f64> {
        let d = self.field_dim;
        let mut x = Vec::with_capacity(self.input_width());
        for (f, toks) in s.tokens.iter().enumerate() {
            let start = x.len();
            x.resize(start + d, 0.0);
            for &t in toks {
                for (a, b) in x[start..].iter_mut().zip(self.embeddings[f].row(t)) {
                    *a += *b;
                }
            }
            let n = toks.len() as f64;
            x[start..].iter_mut().for_each(|v| *v /= n);
        }
        x.extend_from_slice(cross);
        x
    }

    /// The model's input vector for `record`: field embeddings, then one raw
    /// cross-feature scalar per relation (omitted for [`CrossFeatureSource::None`]).
    pub fn featurize(&self, record: &EventRecord, source: &CrossFeatureSource) -> Result<Vec<f64>> {
        self.check_source(source)?;
        let s = self.prepare(record, source);
        let cross = self.cross_values(&s, source, self.pcf_state(source));
        Ok(self.input_vector(&s, &cross))
    }

    /// Forward through the MLP; returns per-layer activations (input first) and the logit.
    fn mlp_forward(&self, x: Vec<f64>) -> (Vec<Vec<f64>>, f64) {
        let mut acts = vec![x];
        let last = self.layers.len() - 1;
        for (k, l) in self.layers.iter().enumerate() {
            let mut out = vec![0.0; l.bias.len()];
            affine(acts.last().expect("input"), &l.weight, &l.bias, &mut out);
            if k < last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(out);
        }
        let logit = acts.last().expect("output")[0];
        (acts, logit)
    }

    /// Back-propagates d(loss)/d(logit); returns d(loss)/d(input).
    fn mlp_backward(&self, acts: &[Vec<f64>], d_logit: f64, grads: &mut CtrGradients) -> Vec<f64> {
        let mut delta = vec![d_logit];
        for k in (0..self.layers.len()).rev() {
            let l = &self.layers[k];
            let input = &acts[k];
            let g = &mut grads.layers[k];
            for (a, xa) in input.iter().enumerate() {
                if *xa != 0.0 {
                    for (gw, d) in g.weight.row_mut(a).iter_mut().zip(&delta) {
                        *gw += xa * d;
                    }
                }
            }
            for (gb, d) in g.bias.iter_mut().zip(&delta) {
                *gb += d;
            }
            let mut prev: Vec<f64> = (0..input.len())
                .map(|a| crate::tensor::dot(l.weight.row(a), &delta))
                .collect();
            if k > 0 {
                // input of layer k is a ReLU output
                for (p, x) in prev.iter_mut().zip(input) {
                    if *x <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            delta = prev;
        }
        delta
    }

    fn zero_grads(&self) -> CtrGradients {
        CtrGradients {
            embeddings: self
                .embeddings
                .iter()
                .map(|m| Matrix::zeros(m.rows(), m.cols()))
                .collect(),
            layers: self
                .layers
                .iter()
                .map(|l| Dense {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    /// Summed binary cross-entropy and its gradients over `samples`; also
    /// returns d(loss)/d(cross scalar) per sample for fine-tuning.
    fn batch_grad(
        &self,
        samples: &[&Prepared],
        crosses: &[Vec<f64>],
        grads: &mut CtrGradients,
    ) -> (f64, Vec<Vec<f64>>) {
        let d = self.field_dim;
        let nf = self.schema.fields().len();
        let mut total = 0.0;
        let mut d_cross = Vec::with_capacity(samples.len());
        for (s, cross) in samples.iter().zip(crosses) {
            let x = self.input_vector(s, cross);
            let (acts, logit) = self.mlp_forward(x);
            total += bce_with_logit(logit, s.label);
            let p = sigmoid(logit);
            let dx = self.mlp_backward(&acts, p - s.label, grads);
            for (f, toks) in s.tokens.iter().enumerate() {
                let n = toks.len() as f64;
                for &t in toks {
                    for (g, v) in grads.embeddings[f].row_mut(t).iter_mut().zip(&dx[f * d..(f + 1) * d]) {
                        *g += v / n;
                    }
                }
            }
            d_cross.push(dx[nf * d..].to_vec());
        }
        (total, d_cross)
    }

    /// Summed binary cross-entropy over `records` and its gradient with
    /// respect to the embedding tables and MLP weights.
    pub fn loss_and_gradients(
        &self,
        records: &[EventRecord],
        source: &CrossFeatureSource,
    ) -> Result<(f64, CtrGradients)> {
        self.check_source(source)?;
        let prepared: Vec<Prepared> = records.iter().map(|r| self.prepare(r, source)).collect();
        let crosses: Vec<Vec<f64>> = prepared
            .iter()
            .map(|s| self.cross_values(s, source, self.pcf_state(source)))
            .collect();
        let refs: Vec<&Prepared> = prepared.iter().collect();
        let mut grads = self.zero_grads();
        let (l, _) = self.batch_grad(&refs, &crosses, &mut grads);
        Ok((l, grads))
    }

    /// Mutable views of every CTR tensor: embedding tables, then (W, b) per layer.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self.embeddings.iter_mut().map(|m| m.as_mut_slice()).collect();
        for l in &mut self.layers {
            out.push(l.weight.as_mut_slice());
            out.push(&mut l.bias);
        }
        out
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.embeddings.iter().map(|m| m.as_slice()).collect();
        for l in &self.layers {
            out.push(l.weight.as_slice());
            out.push(&l.bias);
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, VERSION);
        w.u32(self.schema.fields().len() as u32);
        for f in self.schema.fields() {
            w.str(f);
        }
        w.u32(self.schema.relation_count() as u32);
        for &(a, b) in self.schema.relations() {
            w.u16(a as u16);
            w.u16(b as u16);
        }
        w.u32(self.field_dim as u32);
        w.u8(self.source_kind.tag());
        for v in &self.vocab {
            let mut sorted: Vec<(&String, &usize)> = v.iter().collect();
            sorted.sort_by_key(|(_, i)| **i);
            w.u64(sorted.len() as u64);
            for (s, _) in sorted {
                w.str(s);
            }
        }
        for m in &self.embeddings {
            w.f64s(m.as_slice());
        }
        w.u32(self.layers.len() as u32);
        for l in &self.layers {
            w.u32(l.weight.rows() as u32);
            w.u32(l.weight.cols() as u32);
            w.f64s(l.weight.as_slice());
            w.f64s(&l.bias);
        }
        match &self.tuned {
            None => w.u8(0),
            Some(t) => {
                w.u8(1);
                w.bytes(&t.params.to_bytes());
            }
        }
        w.finish()
    }

    /// Restores a model; a fine-tuned model needs the graph to re-encode.
    pub fn from_bytes(data: &[u8], graph: Option<&InteractionGraph>) -> Result<Self> {
        let fmt = |message: String| Error::Format {
            kind: "ctr checkpoint",
            message,
        };
        let mut r = Reader::open("ctr checkpoint", data, MAGIC, VERSION)?;
        let nf = r.u32()? as usize;
        let fields = (0..nf).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let nr = r.u32()? as usize;
        let mut rels = Vec::new();
        for _ in 0..nr {
            let (a, b) = (r.u16()? as usize, r.u16()? as usize);
            if a >= nf || b >= nf {
                return Err(fmt("relation field out of range".into()));
            }
            rels.push((fields[a].clone(), fields[b].clone()));
        }
        let schema = RelationSchema::new(&fields, &rels).map_err(|e| fmt(e.to_string()))?;
        let field_dim = r.u32()? as usize;
        let source_kind = SourceKind::from_tag(r.u8()?).ok_or_else(|| fmt("bad source tag".into()))?;
        let mut vocab = Vec::with_capacity(nf);
        for _ in 0..nf {
            let n = r.count(4)?;
            let mut m = HashMap::with_capacity(n);
            for i in 0..n {
                m.insert(r.str()?, i + 1);
            }
            vocab.push(m);
        }
        let mut embeddings = Vec::with_capacity(nf);
        for v in &vocab {
            let rows = v.len() + 1;
            embeddings.push(Matrix::from_vec(rows, field_dim, r.f64s(rows * field_dim)?));
        }
        let nl = r.u32()? as usize;
        let mut layers = Vec::with_capacity(nl);
        for _ in 0..nl {
            let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
            if rows.saturating_mul(cols).saturating_mul(8) > data.len() {
                return Err(fmt("layer dimensions exceed file size".into()));
            }
            let weight = Matrix::from_vec(rows, cols, r.f64s(rows * cols)?);
            let bias = r.f64s(cols)?;
            layers.push(Dense { weight, bias });
        }
        let tuned = match r.u8()? {
            0 => None,
            1 => {
                let params = PcfParams::from_bytes(r.bytes()?)?;
                let graph = graph.ok_or_else(|| {
                    Error::contract("fine-tuned checkpoint needs the pre-training graph to load")
                })?;
                params.check_graph(graph)?;
                let encoded = encode(graph, &params);
                Some(TunedPcf { params, encoded })
            }
            t => return Err(fmt(format!("bad tuned flag {t}"))),
        };
        r.finish()?;
        let model = Self {
            schema,
            field_dim,
            source_kind,
            vocab,
            embeddings,
            layers,
            tuned,
        };
        let n_cross = model.cross_count();
        if model.layers.is_empty() || model.input_width() != nf * field_dim + n_cross {
            return Err(fmt("layer shapes do not match the schema".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, graph: Option<&InteractionGraph>) -> Result<Self> {
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&data, graph)
    }
}

fn bce_with_logit(logit: f64, label: f64) -> f64 {
    // log(1+e^z) − y·z, stable for large |z|
    let softplus = if logit > 0.0 {
        logit + (-logit).exp().ln_1p()
    } else {
        logit.exp().ln_1p()
    };
    softplus - label * logit
}

struct Adam {
    lr: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    fn new(lr: f64, shapes: &[&[f64]]) -> Self {
        Self {
            lr,
            step: 0,
            m: shapes.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: shapes.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.step += 1;
        let c1 = 1.0 - B1.powi(self.step);
        let c2 = 1.0 - B2.powi(self.step);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = B1 * m[i] + (1.0 - B1) * g[i];
                v[i] = B2 * v[i] + (1.0 - B2) * g[i] * g[i];
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + 1e-8);
            }
        }
    }
}

impl CtrGradients {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self.embeddings.iter().map(|m| m.as_slice()).collect();
        for l in &self.layers {
            out.push(l.weight.as_slice());
            out.push(&l.bias);
        }
        out
    }

    fn scale(&mut self, s: f64) {
        for m in &mut self.embeddings {
            m.as_mut_slice().iter_mut().for_each(|x| *x *= s);
        }
        for l in &mut self.layers {
            l.weight.as_mut_slice().iter_mut().for_each(|x| *x *= s);
            l.bias.iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// Trains the click model with Adam on mean binary cross-entropy.
///
/// With a PCF source and `cfg.fine_tune`, gradients of the cross scalars flow
/// back through CrossNet and the encoder into a private copy of the encoder
/// parameters; the source itself is never modified.
pub fn train_ctr(
    records: &[EventRecord],
    schema: &RelationSchema,
    source: &CrossFeatureSource,
    cfg: &CtrConfig,
) -> Result<CtrOutcome> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::contract("cannot train on an empty training set"));
    }
    let mut rng = substream(cfg.seed, "ctr/init");
    let mut model = CtrModel::new(schema, records, source.kind(), cfg, &mut rng);
    let fine_tune = cfg.fine_tune && matches!(source, CrossFeatureSource::Pcf(_));
    let mut pcf_opt = None;
    if fine_tune {
        let CrossFeatureSource::Pcf(p) = source else { unreachable!() };
        let params = (*p.params).clone();
        pcf_opt = Some(OptimizerState::new(Optimizer::adam(), cfg.finetune_lr, &params));
        model.tuned = Some(TunedPcf {
            encoded: (*p.encoded).clone(),
            params,
        });
    }
    let prepared: Vec<Prepared> = records.iter().map(|r| model.prepare(r, source)).collect();
    // frozen cross values never change, compute them once
    let frozen: Vec<Vec<f64>> = if fine_tune {
        Vec::new()
    } else {
        prepared
            .iter()
            .map(|s| model.cross_values(s, source, model.pcf_state(source)))
            .collect()
    };
    let shapes = model.tensors();
    let mut opt = Adam::new(cfg.learning_rate, &shapes);
    let (mut order, validation) = split_validation(prepared.len(), cfg);
    let n_train = order.len();
    let mut shuffle = substream(cfg.seed, "ctr/shuffle");
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, CtrModel)> = None;
    let mut stale = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let samples: Vec<&Prepared> = batch.iter().map(|&i| &prepared[i]).collect();
            let mut grads = model.zero_grads();
            let (loss, d_cross, tape) = if fine_tune {
                let tuned = model.tuned.as_ref().expect("fine-tune state");
                let CrossFeatureSource::Pcf(p) = source else { unreachable!() };
                let targets: Vec<usize> = samples
                    .iter()
                    .flat_map(|s| s.cross.iter())
                    .flat_map(|slot| match slot {
                        CrossSlot::Nodes { pairs, .. } => pairs.clone(),
                        CrossSlot::Fixed(_) => Vec::new(),
                    })
                    .flat_map(|(u, v)| [u.index(), v.index()])
                    .collect();
                let tape = forward(p.graph.as_ref(), &tuned.params, Some(&targets));
                let crosses: Vec<Vec<f64>> = samples
                    .iter()
                    .map(|s| model.cross_values(s, source, Some((&tuned.params, tape.output()))))
                    .collect();
                let (l, dc) = model.batch_grad(&samples, &crosses, &mut grads);
                (l, dc, Some(tape))
            } else {
                let crosses: Vec<Vec<f64>> = batch.iter().map(|&i| frozen[i].clone()).collect();
                let (l, dc) = model.batch_grad(&samples, &crosses, &mut grads);
                (l, dc, None)
            };
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    message: format!("CTR loss is {loss} (learning rate {})", cfg.learning_rate),
                });
            }
            epoch_loss += loss;
            let inv = 1.0 / batch.len() as f64;
            grads.scale(inv);
            if let Some(tape) = tape {
                let CrossFeatureSource::Pcf(p) = source else { unreachable!() };
                let tuned = model.tuned.as_mut().expect("fine-tune state");
                let pg = pcf_gradient(&tuned.params, &tape, &samples, &d_cross, inv, p);
                pcf_opt.as_mut().expect("optimizer").step(&mut tuned.params, &pg);
                if !tuned.params.all_finite() {
                    return Err(Error::NonFinite {
                        epoch,
                        message: "fine-tuned encoder parameters became non-finite".into(),
                    });
                }
            }
            opt.step(model.tensors_mut(), grads.tensors());
        }
        trace.push(epoch_loss / n_train as f64);
        if validation.is_empty() {
            continue;
        }
        let fresh_state = match (&model.tuned, source) {
            (Some(t), CrossFeatureSource::Pcf(p)) => Some((t.params.clone(), encode(&p.graph, &t.params))),
            _ => None,
        };
        let val_loss = validation
            .iter()
            .map(|&i| {
                let s = &prepared[i];
                let cross = match &fresh_state {
                    Some((params, enc)) => model.cross_values(s, source, Some((params, &enc.embeddings))),
                    None => frozen[i].clone(),
                };
                bce_with_logit(model.mlp_forward(model.input_vector(s, &cross)).1, s.label)
            })
            .sum::<f64>()
            / validation.len() as f64;
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, model.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    if let Some((_, m)) = best {
        model = m;
    }
    if let (Some(t), CrossFeatureSource::Pcf(p)) = (model.tuned.as_mut(), source) {
        t.encoded = encode(&p.graph, &t.params);
    }
    Ok(CtrOutcome {
        model,
        loss_trace: trace,
    })
}

/// Deterministic (train, validation) index split; training keeps everything
/// when the held-out share would be empty or would swallow the whole log.
fn split_validation(n: usize, cfg: &CtrConfig) -> (Vec<usize>, Vec<usize>) {
    let k = (n as f64 * cfg.validation_fraction).round() as usize;
    if k == 0 || k >= n {
        return ((0..n).collect(), Vec::new());
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut substream(cfg.seed, "ctr/validation"));
    let mut validation = idx.split_off(n - k);
    idx.sort_unstable();
    validation.sort_unstable();
    (idx, validation)
}

fn pcf_gradient(
    params: &PcfParams<f32>,
    tape: &crate::model::ForwardTape<f32>,
    samples: &[&Prepared],
    d_cross: &[Vec<f64>],
    scale: f64,
    source: &PcfSource,
) -> PcfParams<f32> {
    let h = tape.output();
    let mut grads = params.zeros_like();
    let mut dh = Matrix::<f32>::zeros(h.rows(), h.cols());
    let d = h.cols();
    let (mut du, mut dv) = (vec![0f32; d], vec![0f32; d]);
    for (s, dc) in samples.iter().zip(d_cross) {
        for (slot, g) in s.cross.iter().zip(dc) {
            let CrossSlot::Nodes { pairs, missing } = slot else { continue };
            let share = g * scale / (pairs.len() + missing) as f64;
            for (u, v) in pairs {
                let (hu, hv) = (h.row(u.index()), h.row(v.index()));
                let p = f64::from(sigmoid(cross_logit(hu, hv, params)));
                let d_logit = (share * p * (1.0 - p)) as f32;
                du.iter_mut().for_each(|x| *x = 0.0);
                dv.iter_mut().for_each(|x| *x = 0.0);
                cross_backward(hu, hv, params, d_logit, &mut grads, &mut du, &mut dv);
                for (a, b) in dh.row_mut(u.index()).iter_mut().zip(&du) {
                    *a += *b;
                }
                for (a, b) in dh.row_mut(v.index()).iter_mut().zip(&dv) {
                    *a += *b;
                }
            }
        }
    }
    encoder_backward(source.graph.as_ref(), params, tape, dh, &mut grads);
    grads
}

/// Click probability for one record.
pub fn predict_ctr(model: &CtrModel, record: &EventRecord, source: &CrossFeatureSource) -> Result<f64> {
    let x = model.featurize(record, source)?;
    Ok(sigmoid(model.mlp_forward(x).1))
}

pub fn predict_all(model: &CtrModel, records: &[EventRecord], source: &CrossFeatureSource) -> Result<Vec<f64>> {
    use rayon::prelude::*;
    model.check_source(source)?;
    Ok(records
        .par_iter()
        .map(|r| predict_ctr(model, r, source).expect("source checked"))
        .collect())
}

/// `label<TAB>predicted_probability` lines.
pub fn write_predictions<W: Write>(mut out: W, records: &[EventRecord], scores: &[f64]) -> Result<()> {
    writeln!(out, "label\tpredicted_probability")?;
    for (r, s) in records.iter().zip(scores) {
        writeln!(out, "{}\t{}", r.label, s)?;
    }
    Ok(())
}

pub fn read_predictions(text: &str) -> Result<(Vec<u8>, Vec<f64>)> {
    let mut labels = Vec::new();
    let mut scores = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let err = |m: &str| Error::Parse {
            line: i + 1,
            message: m.to_string(),
        };
        let (l, s) = line.split_once('\t').ok_or_else(|| err("expected two columns"))?;
        labels.push(match l {
            "0" => 0,
            "1" => 1,
            _ => return Err(err("non-binary label")),
        });
        scores.push(s.parse().map_err(|_| err("bad probability"))?);
    }
    Ok((labels, scores))
}
