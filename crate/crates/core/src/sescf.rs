//! Statistical cross-feature baseline: a materialized pair → click-rate table,
//! plus analytic byte accounting against the inferred alternative.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write;

use crate::error::Result;
use crate::graph::InteractionGraph;
use crate::ingest::{FeatureRef, PairKey, RelationSchema};
use crate::model::PcfParams;
use crate::tensor::Scalar;

/// Pair → click rate, mirroring the graph's edges. Immutable once built.
#[derive(Debug, Clone)]
pub struct SescfTable {
    schema: RelationSchema,
    entries: HashMap<PairKey, f32>,
    per_relation: Vec<usize>,
}

pub fn build_table(graph: &InteractionGraph) -> SescfTable {
    let mut entries = HashMap::with_capacity(graph.edge_count());
    let mut per_relation = vec![0; graph.relation_count()];
    for e in graph.edges() {
        entries.insert(
            PairKey::new(e.relation, graph.node_value(e.u), graph.node_value(e.v)),
            e.attribute,
        );
        per_relation[e.relation] += 1;
    }
    SescfTable {
        schema: graph.schema().clone(),
        entries,
        per_relation,
    }
}

impl SescfTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn per_relation(&self) -> &[usize] {
        &self.per_relation
    }

    pub fn schema(&self) -> &RelationSchema {
        &self.schema
    }

    /// Stored click rate of `(u, v)`, in either argument order. `None` for any
    /// pair not in the table, including pairs of two known features.
    pub fn lookup(&self, u: &FeatureRef, v: &FeatureRef) -> Option<f32> {
        let (r, swapped) = self.schema.relation_between(&u.field, &v.field)?;
        let (l, rt) = if swapped { (v, u) } else { (u, v) };
        self.get(r, &l.value, &rt.value)
    }

    pub fn get(&self, relation: usize, left: &str, right: &str) -> Option<f32> {
        self.entries
            .get(&PairKey::new(relation, left, right))
            .copied()
    }

    pub fn sorted_entries(&self) -> Vec<(&PairKey, f32)> {
        let mut out: Vec<_> = self.entries.iter().map(|(k, v)| (k, *v)).collect();
        out.sort_by(|a, b| a.0.cmp(b.0));
        out
    }

    /// `u_field u_value v_field v_value attribute`, sorted by pair.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "u_field\tu_value\tv_field\tv_value\tattribute")?;
        for (k, a) in self.sorted_entries() {
            let (fa, fb) = self.schema.relations()[k.relation];
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                self.schema.fields()[fa],
                k.left,
                self.schema.fields()[fb],
                k.right,
                a
            )?;
        }
        Ok(())
    }
}

/// How key bytes are charged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KeyCost {
    /// Value-string byte lengths plus `field_id_bytes` per field reference.
    Strings { field_id_bytes: u64 },
    /// Fixed sizes per pair key and per node key.
    Fixed { pair: u64, node: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub key: KeyCost,
    pub value_bytes: u64,
    pub entry_overhead: u64,
    pub param_bytes: u64,
}

impl Default for CostModel {
    /// Pair key = both value strings + one byte per field id (2 total);
    /// 4-byte values; 16 bytes of index overhead per table entry; f32 parameters.
    fn default() -> Self {
        Self {
            key: KeyCost::Strings { field_id_bytes: 1 },
            value_bytes: 4,
            entry_overhead: 16,
            param_bytes: 4,
        }
    }
}

impl CostModel {
    fn pair_key(&self, k: &PairKey) -> u64 {
        match self.key {
            KeyCost::Strings { field_id_bytes } => {
                (k.left.len() + k.right.len()) as u64 + 2 * field_id_bytes
            }
            KeyCost::Fixed { pair, .. } => pair,
        }
    }

    fn node_key(&self, value: &str) -> u64 {
        match self.key {
            KeyCost::Strings { field_id_bytes } => value.len() as u64 + field_id_bytes,
            KeyCost::Fixed { node, .. } => node,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryReport {
    pub sescf_bytes: u64,
    pub pcf_bytes: u64,
    /// pcf / sescf; NaN when `ratio_defined` is false.
    pub ratio: f64,
    pub ratio_defined: bool,
    pub table_entries: u64,
    pub sescf_key_bytes: u64,
    pub sescf_value_bytes: u64,
    pub sescf_overhead_bytes: u64,
    pub nodes: u64,
    pub embed_dim: u64,
    pub pcf_embedding_bytes: u64,
    pub pcf_crossnet_bytes: u64,
    pub pcf_node_key_bytes: u64,
}

/// Byte cost of serving cross features from `table` versus from the
/// pre-computed final node embeddings plus CrossNet. `node_values` are the
/// node-table keys (one per row of the embedding table).
pub fn memory_report<F: Scalar>(
    table: &SescfTable,
    params: &PcfParams<F>,
    node_values: &[&str],
    cost: &CostModel,
) -> MemoryReport {
    let entries = table.len() as u64;
    let key_bytes: u64 = table.entries.keys().map(|k| cost.pair_key(k)).sum();
    let value_bytes = entries * cost.value_bytes;
    let overhead = entries * cost.entry_overhead;
    let sescf = key_bytes + value_bytes + overhead;

    let n = params.node_count() as u64;
    let d = params.output_dim() as u64;
    let emb = n * d * cost.param_bytes;
    let cross = (params.cross_weight.len() as u64 + 1) * cost.param_bytes;
    let node_keys: u64 = node_values.iter().map(|v| cost.node_key(v)).sum();
    let pcf = if n == 0 { 0 } else { emb + cross + node_keys };
    let ratio_defined = sescf > 0;
    MemoryReport {
        sescf_bytes: sescf,
        pcf_bytes: pcf,
        ratio: if ratio_defined {
            pcf as f64 / sescf as f64
        } else {
            f64::NAN
        },
        ratio_defined,
        table_entries: entries,
        sescf_key_bytes: key_bytes,
        sescf_value_bytes: value_bytes,
        sescf_overhead_bytes: overhead,
        nodes: n,
        embed_dim: d,
        pcf_embedding_bytes: emb,
        pcf_crossnet_bytes: if n == 0 { 0 } else { cross },
        pcf_node_key_bytes: node_keys,
    }
}

/// [`memory_report`] with node keys taken from the graph.
pub fn graph_memory_report<F: Scalar>(
    graph: &InteractionGraph,
    table: &SescfTable,
    params: &PcfParams<F>,
    cost: &CostModel,
) -> MemoryReport {
    let values: Vec<&str> = (0..graph.node_count())
        .map(|i| graph.node_value(crate::graph::NodeId(i as u32)))
        .collect();
    memory_report(table, params, &values, cost)
}

impl MemoryReport {
    fn rows(&self) -> Vec<(&'static str, String)> {
        vec![
            ("table_entries", self.table_entries.to_string()),
            ("sescf_key_bytes", self.sescf_key_bytes.to_string()),
            ("sescf_value_bytes", self.sescf_value_bytes.to_string()),
            ("sescf_overhead_bytes", self.sescf_overhead_bytes.to_string()),
            ("sescf_bytes", self.sescf_bytes.to_string()),
            ("nodes", self.nodes.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("pcf_embedding_bytes", self.pcf_embedding_bytes.to_string()),
            ("pcf_crossnet_bytes", self.pcf_crossnet_bytes.to_string()),
            ("pcf_node_key_bytes", self.pcf_node_key_bytes.to_string()),
            ("pcf_bytes", self.pcf_bytes.to_string()),
            ("ratio", format!("{:.6}", self.ratio)),
            ("ratio_defined", self.ratio_defined.to_string()),
        ]
    }

    pub fn to_kv(&self) -> String {
        self.rows()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let rows = self.rows();
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let vwidth = rows.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<width$}  {v:>vwidth$}");
        }
        out
    }
}
