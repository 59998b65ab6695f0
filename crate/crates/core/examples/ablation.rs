//! Base / +GNN / +WL / +FT ablation on the planted benchmark.
//!
//! Usage: cargo run --release --example ablation -- [seeds] [key=value ...]

use std::sync::Arc;

use pcfgnn::config::KvConfig;
use pcfgnn::eval::{
    generate_synthetic, mean_se, pretrain_graph, run_ablation, standard_ablation, BenchmarkConfig,
    SyntheticSpec,
};

fn main() -> pcfgnn::Result<()> {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().map_or(Ok(1), |s| s.parse()).expect("seed count");
    let mut kv = KvConfig::default();
    for a in args {
        let (k, v) = a.split_once('=').expect("key=value");
        kv.set(k, v);
    }
    let mut cfg = BenchmarkConfig::default();
    cfg.apply(&kv)?;
    let rows = standard_ablation();
    let mut aucs = vec![Vec::new(); rows.len() + 1];
    for seed in 0..seeds {
        let mut spec = SyntheticSpec::default();
        spec.apply(&kv)?;
        spec.seed = seed;
        let data = generate_synthetic(&spec)?;
        let graph = Arc::new(pretrain_graph(&data.pretrain, &data.schema));
        let table = run_ablation(graph, &data.train, &data.test, &cfg, &rows, seed)?;
        println!("seed {seed}");
        for line in table.to_text().lines().take_while(|l| !l.is_empty()) {
            println!("  {line}");
        }
        for (slot, r) in aucs.iter_mut().zip(&table.rows) {
            slot.push(r.auc_org);
        }
    }
    let names = std::iter::once("no_escf").chain(rows.iter().map(|r| r.name.as_str()));
    for (name, xs) in names.zip(&aucs) {
        let (m, se) = mean_se(xs);
        println!("{name:<16} mean auc {m:.4} ± {se:.4}");
    }
    Ok(())
}
