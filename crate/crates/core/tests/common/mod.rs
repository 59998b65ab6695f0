//! Test-only oracles shared by the integration suites. Nothing here calls into
//! the code path it checks except through the public forward/loss functions.
#![allow(dead_code)]

use std::collections::BTreeMap;

use pcfgnn::graph::{Edge, InteractionGraph, NodeId};
use pcfgnn::ingest::{EventRecord, FeatureRef, PairKey, PairStats, RelationSchema};
use pcfgnn::model::{forward, ModelConfig, PcfParams};
use pcfgnn::pretrain::{backward, loss, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Schema with `relations` ∈ {1, 2}: a–b, and b–c when two.
pub fn chain_schema(relations: usize) -> RelationSchema {
    match relations {
        1 => RelationSchema::new(&["a", "b"], &[("a", "b")]).unwrap(),
        2 => RelationSchema::new(&["a", "b", "c"], &[("a", "b"), ("b", "c")]).unwrap(),
        _ => panic!("1 or 2 relations"),
    }
}

/// Random graph with at most `max_nodes` nodes and at least one edge.
pub fn random_graph(rng: &mut ChaCha8Rng, max_nodes: usize, relations: usize) -> InteractionGraph {
    let schema = chain_schema(relations);
    let nf = schema.fields().len();
    loop {
        let n = rng.random_range(nf.max(2)..=max_nodes);
        let nodes: Vec<FeatureRef> = (0..n)
            .map(|i| FeatureRef::new(schema.fields()[i % nf].clone(), format!("n{i}")))
            .collect();
        let mut edges = Vec::new();
        for (r, &(fa, fb)) in schema.relations().iter().enumerate() {
            for u in (0..n).filter(|i| i % nf == fa) {
                for v in (0..n).filter(|i| i % nf == fb) {
                    if rng.random_bool(0.5) {
                        let count = rng.random_range(1..20u64);
                        let clicks = rng.random_range(0..=count);
                        edges.push(Edge {
                            u: NodeId(u as u32),
                            v: NodeId(v as u32),
                            relation: r,
                            count,
                            attribute: (clicks as f64 / count as f64) as f32,
                        });
                    }
                }
            }
        }
        if !edges.is_empty() {
            return InteractionGraph::from_parts(schema, nodes, edges).unwrap();
        }
    }
}

pub struct GradReport {
    pub checked: usize,
    pub kinks: usize,
    pub failures: Vec<String>,
    pub max_rel: f64,
}

fn relu_pattern(graph: &InteractionGraph, params: &PcfParams<f64>) -> Vec<bool> {
    let tape = forward(graph, params, None);
    tape.pre
        .iter()
        .flat_map(|m| m.as_slice().iter().map(|z| *z > 0.0).collect::<Vec<_>>())
        .collect()
}

/// Compares every analytic gradient entry against central differences of the
/// loss. Entries whose ±step straddles a ReLU kink are retried at a 100×
/// smaller step; a straddle at that step too is counted as a kink, not checked.
pub fn gradient_check(
    graph: &InteractionGraph,
    params: &PcfParams<f64>,
    cfg: &TrainConfig,
    step: f64,
    rel_tol: f64,
    abs_floor: f64,
) -> GradReport {
    let edges: Vec<usize> = (0..graph.edge_count()).collect();
    let (_, grads) = backward(graph, params, &edges, cfg);
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
    let names = params.tensor_names();
    let mut report = GradReport {
        checked: 0,
        kinks: 0,
        failures: Vec::new(),
        max_rel: 0.0,
    };
    let mut work = params.clone();
    for (ti, tensor) in analytic.iter().enumerate() {
        for (ei, &a) in tensor.iter().enumerate() {
            let mut numeric = None;
            for h in [step, step / 100.0] {
                let orig = work.tensors()[ti][ei];
                work.tensors_mut()[ti][ei] = orig + h;
                let lp = loss(graph, &work, &edges, cfg);
                let pp = relu_pattern(graph, &work);
                work.tensors_mut()[ti][ei] = orig - h;
                let lm = loss(graph, &work, &edges, cfg);
                let pm = relu_pattern(graph, &work);
                work.tensors_mut()[ti][ei] = orig;
                if pp == pm {
                    numeric = Some((lp - lm) / (2.0 * h));
                    break;
                }
            }
            let Some(n) = numeric else {
                report.kinks += 1;
                continue;
            };
            report.checked += 1;
            let diff = (a - n).abs();
            let scale = a.abs().max(n.abs());
            if diff > abs_floor {
                let rel = diff / scale;
                report.max_rel = report.max_rel.max(rel);
                if rel > rel_tol {
                    report.failures.push(format!("{}[{ei}]: analytic {a:e} numeric {n:e}", names[ti]));
                }
            }
        }
    }
    report
}

/// Random small model config: d ∈ [2,4], K layers of width [2,5].
pub fn random_model(rng: &mut ChaCha8Rng, k: usize) -> ModelConfig {
    ModelConfig {
        embed_dim: rng.random_range(2..=4),
        layer_widths: (0..k).map(|_| rng.random_range(2..=5)).collect(),
        ..ModelConfig::default()
    }
}

/// Brute-force tally: for every relation, loop over events, then over that
/// event's value pairs, counting into a fresh map.
pub fn brute_force_tally(events: &[EventRecord], schema: &RelationSchema) -> BTreeMap<PairKey, PairStats> {
    let mut out: BTreeMap<PairKey, PairStats> = BTreeMap::new();
    for (r, &(a, b)) in schema.relations().iter().enumerate() {
        for ev in events {
            for x in &ev.cells[a] {
                for y in &ev.cells[b] {
                    let s = out.entry(PairKey::new(r, x.clone(), y.clone())).or_default();
                    s.count += 1;
                    if ev.label == 1 {
                        s.click_count += 1;
                    }
                }
            }
        }
    }
    out
}

/// Random log over a 3-field schema with small vocabularies (so pairs repeat)
/// and occasional multi-valued cells.
pub fn random_log(rng: &mut ChaCha8Rng, max_events: usize) -> Vec<EventRecord> {
    let n = rng.random_range(0..=max_events);
    (0..n)
        .map(|_| {
            let label = rng.random_range(0..2u8);
            let cells = (0..3)
                .map(|f| {
                    let k = if f == 1 && rng.random_bool(0.2) { 2 } else { 1 };
                    (0..k).map(|_| format!("v{}", rng.random_range(0..6))).collect()
                })
                .collect();
            EventRecord::new(label, cells)
        })
        .collect()
}

/// O(n²) AUC: fraction of (positive, negative) pairs ranked correctly, ties count ½.
pub fn pairwise_auc(labels: &[u8], scores: &[f64]) -> f64 {
    let mut num = 0.0;
    let (mut np, mut nn) = (0usize, 0usize);
    for &l in labels {
        if l == 1 {
            np += 1;
        } else {
            nn += 1;
        }
    }
    for i in 0..labels.len() {
        for j in 0..labels.len() {
            if labels[i] == 1 && labels[j] == 0 {
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / (np as f64 * nn as f64)
}

pub fn default_train() -> TrainConfig {
    TrainConfig::default()
}

/// Compares a built graph with a brute-force tally edge by edge.
pub fn graph_matches_tally(
    graph: &pcfgnn::graph::InteractionGraph,
    tally: &BTreeMap<PairKey, PairStats>,
) -> Result<(), String> {
    if graph.edge_count() != tally.len() {
        return Err(format!("{} edges vs {} tallied pairs", graph.edge_count(), tally.len()));
    }
    for e in graph.edges() {
        let key = PairKey::new(e.relation, graph.node_value(e.u), graph.node_value(e.v));
        let s = tally.get(&key).ok_or_else(|| format!("edge {key:?} not in tally"))?;
        if s.count != e.count {
            return Err(format!("{key:?}: count {} vs {}", e.count, s.count));
        }
        let expect = s.click_count as f32 / s.count as f32;
        if e.attribute != expect {
            return Err(format!("{key:?}: attribute {} vs {expect}", e.attribute));
        }
    }
    Ok(())
}
