//! The heterogeneous interaction graph: one node per feature value, one
//! undirected edge per observed cross pair, edge attribute = empirical click rate.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::ingest::{FeatureRef, PairStatsMap, RelationSchema};

const MAGIC: &[u8; 4] = b"PCFG";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// `u` belongs to the relation's left field, `v` to its right field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub u: NodeId,
    pub v: NodeId,
    pub relation: usize,
    pub count: u64,
    pub attribute: f32,
}

/// Click rate of a pair: clicks / co-occurrences.
pub fn click_rate(click_count: u64, count: u64) -> f32 {
    (click_count as f64 / count as f64) as f32
}

#[derive(Debug, Clone)]
pub struct InteractionGraph {
    schema: RelationSchema,
    /// (field index, value) per node.
    nodes: Vec<(usize, String)>,
    node_index: HashMap<(usize, String), NodeId>,
    edges: Vec<Edge>,
    edge_index: HashMap<(NodeId, NodeId, usize), usize>,
    /// adjacency[node][relation], ascending.
    adjacency: Vec<Vec<Vec<NodeId>>>,
}

impl PartialEq for InteractionGraph {
    fn eq(&self, other: &Self) -> bool {
        self.schema == other.schema
            && self.nodes == other.nodes
            && self.edges.len() == other.edges.len()
            && self.edges.iter().zip(&other.edges).all(|(a, b)| {
                a.u == b.u
                    && a.v == b.v
                    && a.relation == b.relation
                    && a.count == b.count
                    && a.attribute.to_bits() == b.attribute.to_bits()
            })
    }
}

/// Builds the graph from pair statistics, one edge per pair.
pub fn build_graph(stats: &PairStatsMap, schema: &RelationSchema) -> InteractionGraph {
    build_graph_pruned(stats, schema, 1)
}

/// Like [`build_graph`], dropping pairs seen fewer than `min_count` times.
pub fn build_graph_pruned(
    stats: &PairStatsMap,
    schema: &RelationSchema,
    min_count: u64,
) -> InteractionGraph {
    let kept = || stats.iter().filter(|(_, s)| s.count >= min_count.max(1));
    let mut features = BTreeSet::new();
    for (key, _) in kept() {
        let (a, b) = schema.relations()[key.relation];
        features.insert((a, key.left.clone()));
        features.insert((b, key.right.clone()));
    }
    let nodes: Vec<(usize, String)> = features.into_iter().collect();
    let node_index: HashMap<(usize, String), NodeId> = nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.clone(), NodeId(i as u32)))
        .collect();
    let edges = kept()
        .map(|(key, s)| {
            let (a, b) = schema.relations()[key.relation];
            Edge {
                u: node_index[&(a, key.left.clone())],
                v: node_index[&(b, key.right.clone())],
                relation: key.relation,
                count: s.count,
                attribute: click_rate(s.click_count, s.count),
            }
        })
        .collect();
    InteractionGraph::assemble(schema.clone(), nodes, node_index, edges)
        .expect("stats-derived graph is consistent")
}

impl InteractionGraph {
    /// Assembles a graph from an explicit node table and edge list, validating both.
    pub fn from_parts(schema: RelationSchema, nodes: Vec<FeatureRef>, edges: Vec<Edge>) -> Result<Self> {
        let mut table = Vec::with_capacity(nodes.len());
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.into_iter().enumerate() {
            let f = schema
                .field_index(&n.field)
                .ok_or_else(|| Error::contract(format!("node {i} has undeclared field `{}`", n.field)))?;
            if index.insert((f, n.value.clone()), NodeId(i as u32)).is_some() {
                return Err(Error::contract(format!("duplicate node {n}")));
            }
            table.push((f, n.value));
        }
        Self::assemble(schema, table, index, edges)
    }

    fn assemble(
        schema: RelationSchema,
        nodes: Vec<(usize, String)>,
        node_index: HashMap<(usize, String), NodeId>,
        edges: Vec<Edge>,
    ) -> Result<Self> {
        let n = nodes.len();
        let rels = schema.relation_count();
        let mut adjacency = vec![vec![Vec::new(); rels]; n];
        let mut edge_index = HashMap::with_capacity(edges.len());
        for (idx, e) in edges.iter().enumerate() {
            if e.u.index() >= n || e.v.index() >= n || e.relation >= rels {
                return Err(Error::contract(format!("edge {idx} out of range")));
            }
            let (a, b) = schema.relations()[e.relation];
            if nodes[e.u.index()].0 != a || nodes[e.v.index()].0 != b {
                return Err(Error::contract(format!(
                    "edge {idx} endpoints do not match relation {} fields",
                    e.relation
                )));
            }
            if e.count == 0 || !(0.0..=1.0).contains(&e.attribute) {
                return Err(Error::contract(format!(
                    "edge {idx} has count {} attribute {}",
                    e.count, e.attribute
                )));
            }
            if edge_index.insert((e.u, e.v, e.relation), idx).is_some() {
                return Err(Error::contract(format!("duplicate edge {idx}")));
            }
            adjacency[e.u.index()][e.relation].push(e.v);
            adjacency[e.v.index()][e.relation].push(e.u);
        }
        for lists in &mut adjacency {
            for l in lists.iter_mut() {
                l.sort_unstable();
            }
        }
        Ok(Self {
            schema,
            nodes,
            node_index,
            edges,
            edge_index,
            adjacency,
        })
    }

    pub fn schema(&self) -> &RelationSchema {
        &self.schema
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn relation_count(&self) -> usize {
        self.schema.relation_count()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn field_of(&self, node: NodeId) -> usize {
        self.nodes[node.index()].0
    }

    pub fn feature(&self, node: NodeId) -> FeatureRef {
        let (f, v) = &self.nodes[node.index()];
        FeatureRef::new(self.schema.fields()[*f].clone(), v.clone())
    }

    pub fn node_value(&self, node: NodeId) -> &str {
        &self.nodes[node.index()].1
    }

    pub fn node_of(&self, feature: &FeatureRef) -> Option<NodeId> {
        let f = self.schema.field_index(&feature.field)?;
        self.node_by_field(f, &feature.value)
    }

    pub fn node_by_field(&self, field: usize, value: &str) -> Option<NodeId> {
        // HashMap<(usize, String)> cannot be probed with &str without allocating.
        self.node_index.get(&(field, value.to_string())).copied()
    }

    /// N_r(i): neighbors of `node` under relation `r`, ascending.
    pub fn neighbors(&self, node: NodeId, r: usize) -> Result<&[NodeId]> {
        if node.index() >= self.nodes.len() {
            return Err(Error::contract(format!(
                "node {} out of range (N={})",
                node.0,
                self.nodes.len()
            )));
        }
        if r >= self.relation_count() {
            return Err(Error::contract(format!(
                "relation {r} out of range (R={})",
                self.relation_count()
            )));
        }
        Ok(&self.adjacency[node.index()][r])
    }

    pub(crate) fn adj(&self, node: usize, r: usize) -> &[NodeId] {
        &self.adjacency[node][r]
    }

    /// Edge for `(u, v)` under `r`, in either orientation.
    pub fn edge_between(&self, u: NodeId, v: NodeId, r: usize) -> Option<&Edge> {
        self.edge_index
            .get(&(u, v, r))
            .or_else(|| self.edge_index.get(&(v, u, r)))
            .map(|&i| &self.edges[i])
    }

    /// Node count per schema field (N₁, N₂, ...).
    pub fn nodes_per_field(&self) -> Vec<usize> {
        let mut out = vec![0; self.schema.fields().len()];
        for (f, _) in &self.nodes {
            out[*f] += 1;
        }
        out
    }

    pub fn mean_attribute(&self) -> Option<f64> {
        if self.edges.is_empty() {
            return None;
        }
        Some(self.edges.iter().map(|e| f64::from(e.attribute)).sum::<f64>() / self.edges.len() as f64)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, VERSION);
        w.u32(self.schema.fields().len() as u32);
        for f in self.schema.fields() {
            w.str(f);
        }
        w.u32(self.relation_count() as u32);
        for &(a, b) in self.schema.relations() {
            w.u16(a as u16);
            w.u16(b as u16);
        }
        w.u64(self.nodes.len() as u64);
        for (f, v) in &self.nodes {
            w.u16(*f as u16);
            w.str(v);
        }
        w.u64(self.edges.len() as u64);
        for e in &self.edges {
            w.u32(e.u.0);
            w.u32(e.v.0);
            w.u16(e.relation as u16);
            w.u64(e.count);
            w.f32(e.attribute);
        }
        w.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let fmt = |message: String| Error::Format {
            kind: "graph",
            message,
        };
        let mut r = Reader::open("graph", data, MAGIC, VERSION)?;
        let nf = r.u32()? as usize;
        let fields = (0..nf).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
        let nr = r.u32()? as usize;
        let mut relations = Vec::with_capacity(nr);
        for _ in 0..nr {
            let (a, b) = (r.u16()? as usize, r.u16()? as usize);
            let name = |i: usize| {
                fields
                    .get(i)
                    .cloned()
                    .ok_or_else(|| fmt(format!("relation field {i} out of range")))
            };
            relations.push((name(a)?, name(b)?));
        }
        let schema = RelationSchema::new(&fields, &relations).map_err(|e| fmt(e.to_string()))?;
        let n = r.count(6)?;
        let mut nodes = Vec::with_capacity(n);
        for _ in 0..n {
            let f = r.u16()? as usize;
            let v = r.str()?;
            let field = fields
                .get(f)
                .ok_or_else(|| fmt(format!("node field {f} out of range")))?;
            nodes.push(FeatureRef::new(field.clone(), v));
        }
        let m = r.count(22)?;
        let mut edges = Vec::with_capacity(m);
        for _ in 0..m {
            edges.push(Edge {
                u: NodeId(r.u32()?),
                v: NodeId(r.u32()?),
                relation: r.u16()? as usize,
                count: r.u64()?,
                attribute: r.f32()?,
            });
        }
        r.finish()?;
        Self::from_parts(schema, nodes, edges).map_err(|e| fmt(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&data)
    }

    /// Debug export: `u_field u_value v_field v_value relation count attribute`.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "u_field\tu_value\tv_field\tv_value\trelation\tcount\tattribute")?;
        for e in &self.edges {
            let (fu, vu) = &self.nodes[e.u.index()];
            let (fv, vv) = &self.nodes[e.v.index()];
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}",
                self.schema.fields()[*fu],
                vu,
                self.schema.fields()[*fv],
                vv,
                e.relation,
                e.count,
                e.attribute
            )?;
        }
        Ok(())
    }
}

/// Free-function form of [`InteractionGraph::save`].
pub fn save_graph(graph: &InteractionGraph, path: &Path) -> Result<()> {
    graph.save(path)
}

pub fn load_graph(path: &Path) -> Result<InteractionGraph> {
    InteractionGraph::load(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{PairKey, PairStats};

    fn schema() -> RelationSchema {
        RelationSchema::new(&["user", "item"], &[("user", "item")]).unwrap()
    }

    fn single(count: u64, clicks: u64) -> InteractionGraph {
        let mut stats = PairStatsMap::new();
        stats.insert(
            PairKey::new(0, "U1", "I1"),
            PairStats {
                count,
                click_count: clicks,
            },
        );
        build_graph(&stats, &schema())
    }

    #[test]
    fn click_rate_attributes() {
        let g = single(10, 3);
        assert_eq!(g.edges()[0].attribute, 0.3f32);
        assert_eq!(single(4, 0).edges()[0].attribute, 0.0);
        assert_eq!(g.node_count(), 2);
    }

    #[test]
    fn neighbors_symmetric_and_checked() {
        let g = single(1, 1);
        assert_eq!(g.neighbors(NodeId(0), 0).unwrap(), &[NodeId(1)]);
        assert_eq!(g.neighbors(NodeId(1), 0).unwrap(), &[NodeId(0)]);
        assert!(g.neighbors(NodeId(2), 0).is_err());
        assert!(g.neighbors(NodeId(0), 1).is_err());
    }

    #[test]
    fn isolated_node_has_no_neighbors() {
        let g = InteractionGraph::from_parts(
            schema(),
            vec![
                FeatureRef::new("user", "a"),
                FeatureRef::new("item", "b"),
                FeatureRef::new("user", "c"),
            ],
            vec![Edge {
                u: NodeId(0),
                v: NodeId(1),
                relation: 0,
                count: 2,
                attribute: 0.5,
            }],
        )
        .unwrap();
        assert!(g.neighbors(NodeId(2), 0).unwrap().is_empty());
    }

    #[test]
    fn roundtrip_bit_exact() {
        let g = single(10, 3);
        let back = InteractionGraph::from_bytes(&g.to_bytes()).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.edges()[0].attribute.to_bits(), 0.3f32.to_bits());

        let empty = build_graph(&PairStatsMap::new(), &schema());
        let back = InteractionGraph::from_bytes(&empty.to_bytes()).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.edge_count(), 0);
    }

    #[test]
    fn load_rejects_damage() {
        let bytes = single(10, 3).to_bytes();
        let mut bad = bytes.clone();
        bad[20] ^= 0xff;
        assert!(InteractionGraph::from_bytes(&bad).is_err());
        assert!(InteractionGraph::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(InteractionGraph::from_bytes(&v2).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn pruning_drops_rare_pairs() {
        let mut stats = PairStatsMap::new();
        stats.insert(PairKey::new(0, "a", "x"), PairStats { count: 1, click_count: 1 });
        stats.insert(PairKey::new(0, "b", "x"), PairStats { count: 5, click_count: 1 });
        let g = build_graph_pruned(&stats, &schema(), 2);
        assert_eq!(g.edge_count(), 1);
        assert_eq!(g.node_count(), 2);
        assert!(g.node_of(&FeatureRef::new("user", "a")).is_none());
    }
}
