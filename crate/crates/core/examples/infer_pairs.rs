//! Inferring cross-feature values for pairs the pre-training log never contained.
//!
//! Usage: cargo run --release --example infer_pairs

use pcfgnn::eval::{generate_synthetic, pretrain_graph, SyntheticSpec};
use pcfgnn::ingest::FeatureRef;
use pcfgnn::model::{encode, infer_with, ModelConfig};
use pcfgnn::pretrain::{train, TrainConfig};
use pcfgnn::sescf::build_table;

fn main() -> pcfgnn::Result<()> {
    let data = generate_synthetic(&SyntheticSpec {
        users: 60,
        items: 30,
        pretrain_samples: 10_000,
        ..SyntheticSpec::default()
    })?;
    let graph = pretrain_graph(&data.pretrain, &data.schema);
    let cfg = TrainConfig {
        epochs: 100,
        batch: Some(256),
        ..TrainConfig::default()
    };
    let params = train(&graph, &ModelConfig::default(), &cfg)?.params;
    let encoded = encode(&graph, &params);
    let table = build_table(&graph);

    println!("user  item  planted  table   inferred");
    let unseen = data.fresh.iter().enumerate().filter(|(_, f)| **f).map(|(p, _)| p);
    for pair in unseen.take(10) {
        let (user, item) = (pair / data.items, pair % data.items);
        let u = FeatureRef::new("user", format!("u{user}"));
        let v = FeatureRef::new("item", format!("i{item}"));
        let stored = table.lookup(&u, &v).map_or("-".to_string(), |x| format!("{x:.3}"));
        let inferred = infer_with(&graph, &params, &encoded, &u, &v).map_or("NA".to_string(), |x| format!("{x:.3}"));
        println!("u{user:<4} i{item:<4} {:.3}    {stored:<7} {inferred}", data.probability(user, item));
    }
    let missing = FeatureRef::new("user", "nobody");
    let any_item = FeatureRef::new("item", "i0");
    println!("unknown node -> {:?}", infer_with(&graph, &params, &encoded, &missing, &any_item));
    Ok(())
}
