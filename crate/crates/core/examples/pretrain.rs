//! Self-supervised pre-training on a planted-factor graph, printing the loss curve.
//!
//! Usage: cargo run --release --example pretrain -- [epochs]

use pcfgnn::eval::{generate_synthetic, pretrain_graph, SyntheticSpec};
use pcfgnn::model::ModelConfig;
use pcfgnn::pretrain::{train, TrainConfig};

fn main() -> pcfgnn::Result<()> {
    let epochs: usize = std::env::args().nth(1).map_or(Ok(100), |s| s.parse()).expect("epoch count");
    let data = generate_synthetic(&SyntheticSpec {
        users: 60,
        items: 30,
        pretrain_samples: 10_000,
        ..SyntheticSpec::default()
    })?;
    let graph = pretrain_graph(&data.pretrain, &data.schema);
    let cfg = TrainConfig {
        epochs,
        batch: Some(256),
        ..TrainConfig::default()
    };
    let out = train(&graph, &ModelConfig::default(), &cfg)?;
    println!("{} nodes, {} edges, {} parameters", graph.node_count(), graph.edge_count(), out.params.param_count());
    let step = (epochs / 10).max(1);
    for (epoch, loss) in out.loss_trace.iter().enumerate().filter(|(e, _)| e % step == 0 || e + 1 == epochs) {
        println!("epoch {epoch:>4}  loss {loss:.5}");
    }
    println!("checkpoint checksum {}", out.params.checksum());
    Ok(())
}
