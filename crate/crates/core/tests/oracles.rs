mod common;

use std::sync::Arc;

use common::{brute_force_tally, chain_schema, graph_matches_tally, pairwise_auc, random_log, rng};
use pcfgnn::ctr::CrossFeatureSource;
use pcfgnn::eval::{auc, hit_rate, split_new_org};
use pcfgnn::graph::build_graph;
use pcfgnn::ingest::{accumulate_stats, accumulate_stats_sharded, EventRecord};
use pcfgnn::model::{ModelConfig, PcfParams};
use pcfgnn::rng::substream;
use rand::Rng;

#[test]
fn counting_matches_brute_force() {
    let schema = chain_schema(2);
    let mut r = rng(11);
    for _ in 0..100 {
        let log = random_log(&mut r, 200);
        let tally = brute_force_tally(&log, &schema);
        let stats = accumulate_stats(&log, &schema);
        assert_eq!(stats, tally);
        assert_eq!(accumulate_stats_sharded(&log, &schema, 4), tally);
        graph_matches_tally(&build_graph(&stats, &schema), &tally).unwrap();
    }
}

#[test]
fn auc_matches_pair_counting() {
    let mut r = rng(12);
    let mut checked = 0;
    while checked < 1000 {
        let n = r.random_range(2..=50);
        let labels: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
        // coarse grid forces ties
        let scores: Vec<f64> = (0..n).map(|_| f64::from(r.random_range(0..8u8)) / 8.0).collect();
        if labels.iter().all(|&l| l == labels[0]) {
            assert!(auc(&labels, &scores).is_err());
            continue;
        }
        assert_eq!(auc(&labels, &scores).unwrap(), pairwise_auc(&labels, &scores));
        checked += 1;
    }
}

fn random_split(seed: u64) -> (pcfgnn::graph::InteractionGraph, Vec<EventRecord>) {
    let schema = chain_schema(2);
    let mut r = rng(seed);
    let pre = random_log(&mut r, 60);
    let test: Vec<EventRecord> = random_log(&mut r, 60)
        .into_iter()
        .map(|mut e| {
            // some values never seen in pre-training
            if r.random_bool(0.2) {
                e.cells[0][0] = "unseen".into();
            }
            e
        })
        .collect();
    (build_graph(&accumulate_stats(&pre, &schema), &schema), test)
}

#[test]
fn new_split_matches_membership_scan() {
    let schema = chain_schema(2);
    for seed in 0..30 {
        let (graph, test) = random_split(seed);
        let edges: std::collections::HashSet<(usize, String, String)> = graph
            .edges()
            .iter()
            .map(|e| (e.relation, graph.node_value(e.u).to_string(), graph.node_value(e.v).to_string()))
            .collect();
        let expect: Vec<usize> = test
            .iter()
            .enumerate()
            .filter(|(_, rec)| {
                schema.relations().iter().enumerate().all(|(r, &(a, b))| {
                    rec.cells[a]
                        .iter()
                        .all(|x| rec.cells[b].iter().all(|y| !edges.contains(&(r, x.clone(), y.clone()))))
                })
            })
            .map(|(i, _)| i)
            .collect();
        assert_eq!(split_new_org(&test, &graph, &schema), expect);
    }
}

#[test]
fn hit_rate_matches_enumeration() {
    let schema = chain_schema(2);
    for seed in 0..30 {
        let (graph, test) = random_split(seed);
        let known = |f: usize, v: &str| graph.node_by_field(f, v).is_some();
        let seen = |r: usize, x: &str, y: &str| {
            graph.edges().iter().any(|e| {
                e.relation == r && graph.node_value(e.u) == x && graph.node_value(e.v) == y
            })
        };
        let (mut s_hits, mut p_hits, mut s_q, mut p_q) = (0, 0, 0, 0);
        for rec in &test {
            let mut s_all = true;
            let mut p_all = true;
            for (r, &(a, b)) in schema.relations().iter().enumerate() {
                let s = rec.cells[a].iter().all(|x| rec.cells[b].iter().all(|y| seen(r, x, y)));
                let p = rec.cells[a].iter().all(|x| known(a, x)) && rec.cells[b].iter().all(|y| known(b, y));
                s_q += usize::from(s);
                p_q += usize::from(p);
                s_all &= s;
                p_all &= p;
            }
            s_hits += usize::from(s_all);
            p_hits += usize::from(p_all);
        }
        let n = test.len().max(1) as f64;
        let sescf = hit_rate(&test, &CrossFeatureSource::sescf(&graph), &schema);
        assert_eq!(sescf.per_sample, if test.is_empty() { 0.0 } else { s_hits as f64 / n });
        let g = Arc::new(graph);
        let params = PcfParams::init(g.node_count(), 2, &ModelConfig::default(), &mut substream(seed, "p"));
        let pcf = hit_rate(&test, &CrossFeatureSource::pcf(g, params, false).unwrap(), &schema);
        assert_eq!(pcf.per_sample, if test.is_empty() { 0.0 } else { p_hits as f64 / n });
        if !test.is_empty() {
            assert_eq!(sescf.per_query, s_q as f64 / (2.0 * n));
            assert_eq!(pcf.per_query, p_q as f64 / (2.0 * n));
        }
    }
}
