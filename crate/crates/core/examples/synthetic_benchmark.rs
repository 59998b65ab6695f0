//! Planted-factor benchmark: No-ESCF vs SESCF vs PCF rows over several seeds.
//!
//! Usage: cargo run --release --example synthetic_benchmark -- [seeds] [key=value ...]

use std::sync::Arc;
use std::time::Instant;

use pcfgnn::config::KvConfig;
use pcfgnn::eval::{
    average_tables, generate_synthetic, pretrain_graph, run_benchmark, BenchmarkConfig, SyntheticSpec,
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
    let mut tables = Vec::new();
    for seed in 0..seeds {
        let start = Instant::now();
        let mut spec = SyntheticSpec {
            seed,
            ..SyntheticSpec::default()
        };
        spec.apply(&kv)?;
        spec.seed = seed;
        let data = generate_synthetic(&spec)?;
        let graph = Arc::new(pretrain_graph(&data.pretrain, &data.schema));
        let table = run_benchmark(graph, &data.train, &data.test, &cfg, seed)?;
        println!("seed {seed} ({:.1}s)", start.elapsed().as_secs_f64());
        for line in table.to_text().lines().take_while(|l| !l.is_empty()) {
            println!("  {line}");
        }
        tables.push(table);
    }
    for (name, (mean, se)) in average_tables(&tables) {
        println!("{name:<10} mean auc {mean:.4} ± {se:.4}");
    }
    Ok(())
}
