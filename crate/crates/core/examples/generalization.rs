//! Held-out edge fit: pre-train on 80% of the synthetic graph's edges and
//! predict the rest, against the global-mean predictor.
//!
//! Usage: cargo run --release --example generalization -- [seed] [key=value ...]

use pcfgnn::config::KvConfig;
use pcfgnn::eval::{edge_fit, generate_synthetic, pretrain_graph, BenchmarkConfig, SyntheticSpec};

fn main() -> pcfgnn::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map_or(Ok(0), |s| s.parse()).expect("seed");
    let mut kv = KvConfig::default();
    for a in args {
        let (k, v) = a.split_once('=').expect("key=value");
        kv.set(k, v);
    }
    let mut cfg = BenchmarkConfig::default();
    cfg.apply(&kv)?;
    let mut spec = SyntheticSpec::default();
    spec.apply(&kv)?;
    spec.seed = seed;
    let data = generate_synthetic(&spec)?;
    let graph = pretrain_graph(&data.pretrain, &data.schema);
    println!("graph: {} nodes, {} edges", graph.node_count(), graph.edge_count());
    // planted probabilities bound what any predictor can reach on noisy click rates
    let (mut se_planted, mut se_mean) = (0.0, 0.0);
    let mean = graph.mean_attribute().unwrap_or(0.0);
    for e in graph.edges() {
        let user: usize = graph.node_value(e.u)[1..].parse().expect("synthetic user id");
        let item: usize = graph.node_value(e.v)[1..].parse().expect("synthetic item id");
        let a = f64::from(e.attribute);
        se_planted += (data.probability(user, item) - a).powi(2);
        se_mean += (mean - a).powi(2);
    }
    println!(
        "planted-probability predictor: improvement {:.1}% over the mean (upper bound)",
        100.0 * (1.0 - (se_planted / se_mean).sqrt())
    );
    let fit = edge_fit(&graph, &cfg.model, &cfg.pretrain, 0.2, seed)?;
    println!(
        "held-out {}: model rmse {:.4}, mean rmse {:.4}, improvement {:.1}%",
        fit.held_out,
        fit.model_rmse,
        fit.mean_rmse,
        100.0 * fit.improvement()
    );
    Ok(())
}
