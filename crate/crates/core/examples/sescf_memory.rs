//! Memory of a materialized cross-feature table versus inferring from node embeddings.
//!
//! Usage: cargo run --release --example sescf_memory -- [n1 n2]

use pcfgnn::eval::complete_bipartite;
use pcfgnn::model::{ModelConfig, PcfParams};
use pcfgnn::rng::substream;
use pcfgnn::sescf::{build_table, graph_memory_report, CostModel, KeyCost};

fn main() {
    let mut args = std::env::args().skip(1).map(|s| s.parse::<usize>().expect("node count"));
    let n1 = args.next().unwrap_or(500);
    let n2 = args.next().unwrap_or(n1);
    let graph = complete_bipartite(n1, n2);
    let table = build_table(&graph);
    let model = ModelConfig::default();
    let params = PcfParams::<f32>::init(graph.node_count(), 1, &model, &mut substream(0, "init"));

    let costs = [
        ("string keys", CostModel::default()),
        (
            "fixed keys",
            CostModel {
                key: KeyCost::Fixed { pair: 16, node: 8 },
                entry_overhead: 0,
                ..CostModel::default()
            },
        ),
    ];
    for (name, cost) in costs {
        println!("== {name}");
        print!("{}", graph_memory_report(&graph, &table, &params, &cost).to_text());
    }
}
