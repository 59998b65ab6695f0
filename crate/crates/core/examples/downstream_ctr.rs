//! Downstream CTR model with no cross feature, table lookups, or inferred values.
//!
//! Usage: cargo run --release --example downstream_ctr -- [seed]

use std::sync::Arc;

use pcfgnn::ctr::{train_ctr, CrossFeatureSource};
use pcfgnn::eval::{
    attach_deltas, evaluate, generate_synthetic, pretrain_graph, split_new_org, BenchmarkConfig, SyntheticSpec,
};
use pcfgnn::pretrain::train;

fn main() -> pcfgnn::Result<()> {
    let seed: u64 = std::env::args().nth(1).map_or(Ok(0), |s| s.parse()).expect("seed");
    let data = generate_synthetic(&SyntheticSpec {
        seed,
        ..SyntheticSpec::default()
    })?;
    let graph = Arc::new(pretrain_graph(&data.pretrain, &data.schema));
    let cfg = BenchmarkConfig::default().seeded(seed);
    let params = train(&graph, &cfg.model, &cfg.pretrain)?.params;
    let new_idx = split_new_org(&data.test, &graph, &data.schema);

    let sources = [
        ("no_escf", CrossFeatureSource::None),
        ("sescf", CrossFeatureSource::sescf(&graph)),
        ("pcf", CrossFeatureSource::pcf(graph.clone(), params, false)?),
    ];
    let mut rows = Vec::new();
    for (name, source) in &sources {
        let out = train_ctr(&data.train, &data.schema, source, &cfg.ctr)?;
        println!("{name}: {} epochs, final loss {:.4}", out.loss_trace.len(), out.loss_trace.last().unwrap_or(&f64::NAN));
        rows.push(evaluate(name, &out.model, source, &data.test, &new_idx)?);
    }
    attach_deltas(&mut rows, "no_escf")?;
    for r in &rows {
        println!(
            "{:<8} auc {:.4}  auc_new {}  hr {:.3}  d_org {}  d_new {}",
            r.name,
            r.auc_org,
            r.auc_new.map_or("-".into(), |x| format!("{x:.4}")),
            r.hit_rate,
            r.delta_org.map_or("-".into(), |x| format!("{x:+.4}")),
            r.delta_new.map_or("-".into(), |x| format!("{x:+.4}")),
        );
    }
    Ok(())
}
