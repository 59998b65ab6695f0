//! One PASS/FAIL line per acceptance criterion.
//!
//! Run with: cargo test --release -p pcfgnn --test acceptance -- --nocapture

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use common::{
    brute_force_tally, chain_schema, gradient_check, graph_matches_tally, pairwise_auc, random_graph, random_log,
    random_model, rng,
};
use pcfgnn::eval::{
    auc, complete_bipartite, edge_fit, generate_synthetic, mean_se, pretrain_graph, run_ablation, run_benchmark,
    standard_ablation, BenchmarkConfig, ReportTable, SyntheticSpec,
};
use pcfgnn::graph::build_graph;
use pcfgnn::ingest::accumulate_stats;
use pcfgnn::model::{CrossNetInput, ModelConfig, PcfParams};
use pcfgnn::pretrain::TrainConfig;
use pcfgnn::rng::substream;
use pcfgnn::sescf::{build_table, graph_memory_report, CostModel, KeyCost};
use rand::Rng;

const SEEDS: u64 = 5;
const GRAD_REL: f64 = 1e-4;
const GRAD_ABS: f64 = 1e-6;
const MIN_AUC_GAIN: f64 = 0.005;
const MIN_NEW_FRACTION: f64 = 0.20;
const MAX_MEMORY_RATIO: f64 = 0.05;
const MIN_EDGE_FIT: f64 = 0.30;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gradients() -> Outcome {
    let mut graphs = 0;
    let mut entries = 0;
    let mut seed = 1000;
    for k in 0..=2 {
        for relations in 1..=2 {
            for cross in [CrossNetInput::Concat, CrossNetInput::ConcatProduct] {
                for weighted in [true, false] {
                    let mut r = rng(seed);
                    let graph = random_graph(&mut r, 10, relations);
                    let mut model = random_model(&mut r, k);
                    model.cross_input = cross;
                    let mut params =
                        PcfParams::<f64>::init(graph.node_count(), relations, &model, &mut substream(seed, "init"));
                    for l in &mut params.layers {
                        l.bias.iter_mut().for_each(|b| *b = r.random_range(-0.1..0.3));
                    }
                    params.cross_bias = r.random_range(-0.5..0.5);
                    let cfg = TrainConfig {
                        weighted_loss: weighted,
                        ..TrainConfig::default()
                    };
                    let rep = gradient_check(&graph, &params, &cfg, 1e-4, GRAD_REL, GRAD_ABS);
                    ensure(rep.failures.is_empty(), || {
                        format!("graph seed {seed} K={k} R={relations}: {:?}", rep.failures.first())
                    })?;
                    graphs += 1;
                    entries += rep.checked;
                    seed += 1;
                }
            }
        }
    }
    ensure(graphs >= 20, || format!("only {graphs} graphs"))?;
    Ok(format!("{graphs} graphs, {entries} entries within {GRAD_REL} rel / {GRAD_ABS} abs"))
}

fn counting() -> Outcome {
    let schema = chain_schema(2);
    let mut r = rng(21);
    for i in 0..100 {
        let log = random_log(&mut r, 200);
        let tally = brute_force_tally(&log, &schema);
        let stats = accumulate_stats(&log, &schema);
        ensure(stats == tally, || format!("log {i}: stats differ from the oracle"))?;
        graph_matches_tally(&build_graph(&stats, &schema), &tally).map_err(|e| format!("log {i}: {e}"))?;
    }
    Ok("100 logs match exactly".into())
}

fn auc_oracle() -> Outcome {
    let mut r = rng(22);
    let mut checked = 0;
    while checked < 1000 {
        let n = r.random_range(2..=50);
        let labels: Vec<u8> = (0..n).map(|_| r.random_range(0..2)).collect();
        let scores: Vec<f64> = (0..n).map(|_| f64::from(r.random_range(0..8u8)) / 8.0).collect();
        if labels.iter().all(|&l| l == labels[0]) {
            continue;
        }
        let got = auc(&labels, &scores).map_err(|e| e.to_string())?;
        let want = pairwise_auc(&labels, &scores);
        ensure(got == want, || format!("instance {checked}: {got} vs {want}"))?;
        checked += 1;
    }
    Ok("1000 instances match exactly".into())
}

struct SyntheticRuns {
    benchmark: Vec<ReportTable>,
    ablation: Vec<ReportTable>,
    seconds: f64,
}

fn synthetic_runs() -> pcfgnn::Result<SyntheticRuns> {
    let start = Instant::now();
    let cfg = BenchmarkConfig::default();
    let rows = standard_ablation();
    let (mut benchmark, mut ablation) = (Vec::new(), Vec::new());
    for seed in 0..SEEDS {
        let spec = SyntheticSpec {
            seed,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec)?;
        let graph = Arc::new(pretrain_graph(&data.pretrain, &data.schema));
        benchmark.push(run_benchmark(graph.clone(), &data.train, &data.test, &cfg, seed)?);
        ablation.push(run_ablation(graph, &data.train, &data.test, &cfg, &rows, seed)?);
    }
    Ok(SyntheticRuns {
        benchmark,
        ablation,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn column(tables: &[ReportTable], name: &str, f: impl Fn(&pcfgnn::eval::EvalReport) -> Option<f64>) -> Result<Vec<f64>, String> {
    tables
        .iter()
        .map(|t| t.row(name).and_then(&f).ok_or_else(|| format!("row {name} missing a value")))
        .collect()
}

fn table_one(runs: &SyntheticRuns) -> Outcome {
    let m = |name| column(&runs.benchmark, name, |r| Some(r.auc_org)).map(|xs| mean_se(&xs).0);
    let (none, sescf, pcf) = (m("no_escf")?, m("sescf")?, m("pcf")?);
    let detail = format!("no_escf {none:.4} < sescf {sescf:.4} <= pcf {pcf:.4}, gain {:+.4}", pcf - none);
    ensure(none < sescf && sescf <= pcf && pcf - none >= MIN_AUC_GAIN, || detail.clone())?;
    Ok(format!("{detail} ({SEEDS} seeds)"))
}

fn table_three(runs: &SyntheticRuns) -> Outcome {
    let mean = |name, f: fn(&pcfgnn::eval::EvalReport) -> Option<f64>| {
        column(&runs.benchmark, name, f).map(|xs| mean_se(&xs).0)
    };
    let new_frac = mean("pcf", |r| Some(r.n_new as f64 / r.n_test as f64))?;
    let min_new = column(&runs.benchmark, "pcf", |r| Some(r.n_new as f64 / r.n_test as f64))?
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    let hr_pcf = mean("pcf", |r| Some(r.hit_rate))?;
    let hr_sescf = mean("sescf", |r| Some(r.hit_rate))?;
    let dn_pcf = mean("pcf", |r| r.delta_new)?;
    let dn_sescf = mean("sescf", |r| r.delta_new)?;
    let detail = format!(
        "new {:.1}% (min {:.1}%), HR pcf {hr_pcf:.3} > sescf {hr_sescf:.3}, dNew pcf {dn_pcf:+.4} > sescf {dn_sescf:+.4}",
        100.0 * new_frac,
        100.0 * min_new
    );
    ensure(
        min_new >= MIN_NEW_FRACTION && hr_pcf > hr_sescf && dn_pcf > dn_sescf,
        || detail.clone(),
    )?;
    Ok(detail)
}

fn memory() -> Outcome {
    let (n1, n2, d) = (500u64, 500u64, 8usize);
    let graph = complete_bipartite(n1 as usize, n2 as usize);
    let table = build_table(&graph);
    let mut parts = Vec::new();

    // default encoder with string-priced keys
    let model = ModelConfig {
        embed_dim: d,
        ..ModelConfig::default()
    };
    let params = PcfParams::<f32>::init(graph.node_count(), 1, &model, &mut substream(0, "init"));
    let cost = CostModel::default();
    let rep = graph_memory_report(&graph, &table, &params, &cost);
    let digits = |n: u64| -> u64 { (0..n).map(|i| i.to_string().len() as u64 + 1).sum() };
    let (left_key, right_key) = (digits(n1), digits(n2));
    let want_sescf = n1 * n2 * (2 + cost.value_bytes + cost.entry_overhead) + n2 * left_key + n1 * right_key;
    let dk = model.output_dim() as u64;
    let cross = (CrossNetInput::ConcatProduct.width(dk as usize) as u64 + 1) * cost.param_bytes;
    let want_pcf = (n1 + n2) * dk * cost.param_bytes + cross + left_key + right_key + n1 + n2;
    ensure(rep.table_entries == n1 * n2, || format!("{} table entries", rep.table_entries))?;
    ensure(rep.sescf_bytes == want_sescf, || format!("sescf {} vs closed form {want_sescf}", rep.sescf_bytes))?;
    ensure(rep.pcf_bytes == want_pcf, || format!("pcf {} vs closed form {want_pcf}", rep.pcf_bytes))?;
    ensure(rep.ratio < MAX_MEMORY_RATIO, || format!("ratio {:.4}", rep.ratio))?;
    parts.push(format!("string keys ratio {:.4}", rep.ratio));

    // fixed-size keys, raw attributes, concat head
    let model = ModelConfig {
        embed_dim: d,
        layer_widths: Vec::new(),
        cross_input: CrossNetInput::Concat,
        fanout: None,
    };
    let params = PcfParams::<f32>::init(graph.node_count(), 1, &model, &mut substream(0, "init"));
    let cost = CostModel {
        key: KeyCost::Fixed { pair: 16, node: 8 },
        entry_overhead: 0,
        ..CostModel::default()
    };
    let rep = graph_memory_report(&graph, &table, &params, &cost);
    let want_sescf = n1 * n2 * (16 + 4);
    let want_pcf = (n1 + n2) * d as u64 * 4 + (2 * d as u64 + 1) * 4 + (n1 + n2) * 8;
    ensure(rep.sescf_bytes == want_sescf && want_sescf == 5_000_000, || {
        format!("fixed sescf {} vs {want_sescf}", rep.sescf_bytes)
    })?;
    ensure(rep.pcf_bytes == want_pcf && want_pcf == 40_068, || {
        format!("fixed pcf {} vs {want_pcf}", rep.pcf_bytes)
    })?;
    ensure(rep.ratio < MAX_MEMORY_RATIO, || format!("fixed ratio {:.4}", rep.ratio))?;
    parts.push(format!("fixed keys {} / {} = {:.4}", rep.pcf_bytes, rep.sescf_bytes, rep.ratio));
    Ok(parts.join("; "))
}

fn ablation(runs: &SyntheticRuns) -> Outcome {
    let stat = |name| column(&runs.ablation, name, |r| Some(r.auc_org)).map(|xs| mean_se(&xs));
    let base = stat("base")?;
    let gnn = stat("base+gnn")?;
    let wl = stat("base+gnn+wl")?;
    let ft = stat("base+gnn+wl+ft")?;
    // a >= b holds when a falls short of b by at most the larger of the two SEs
    let at_least = |a: (f64, f64), b: (f64, f64)| a.0 >= b.0 - a.1.max(b.1);
    let detail = format!(
        "base {:.4}±{:.4}, +gnn {:.4}±{:.4}, +wl {:.4}±{:.4}, +ft {:.4}±{:.4}",
        base.0, base.1, gnn.0, gnn.1, wl.0, wl.1, ft.0, ft.1
    );
    ensure(at_least(wl, gnn) && at_least(gnn, base) && ft.0.is_finite(), || detail.clone())?;
    Ok(detail)
}

fn cli_artifacts(dir: &Path, threads: &str) -> Result<Vec<(String, Vec<u8>)>, String> {
    let bin = env!("CARGO_BIN_EXE_pcfgnn");
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    let f = |name: &str| fixture.join(name).to_string_lossy().into_owned();
    let pairs = p("pairs.tsv");
    std::fs::write(&pairs, "u_field\tu_value\tv_field\tv_value\nuser\tbob\titem\tcup\nitem\ttea\ttag\thot\n")
        .map_err(|e| e.to_string())?;
    let steps: Vec<Vec<String>> = vec![
        vec!["build-graph".into(), "--log".into(), f("sample_log.tsv"), "--schema".into(), f("sample_schema.cfg"), "--out".into(), p("g.pcfg")],
        vec!["pretrain".into(), "--graph".into(), p("g.pcfg"), "--out".into(), p("m.pcfm"), "--epochs".into(), "50".into()],
        vec!["infer".into(), "--checkpoint".into(), p("m.pcfm"), "--graph".into(), p("g.pcfg"), "--pairs".into(), pairs.clone(), "--out".into(), p("pred.tsv")],
        vec!["export-sescf".into(), "--graph".into(), p("g.pcfg"), "--out".into(), p("sescf.tsv")],
        vec!["memory-report".into(), "--graph".into(), p("g.pcfg"), "--checkpoint".into(), p("m.pcfm"), "--out".into(), p("mem.txt")],
        vec![
            "train-ctr".into(), "--schema".into(), f("sample_schema.cfg"), "--train".into(), f("sample_log.tsv"),
            "--source".into(), "pcf".into(), "--graph".into(), p("g.pcfg"), "--checkpoint".into(), p("m.pcfm"),
            "--fine-tune".into(), "--out".into(), p("ctr.pcfc"), "--test".into(), f("sample_log.tsv"),
            "--predictions".into(), p("ctr_pred.tsv"),
        ],
        vec![
            "eval".into(), "--synthetic".into(), "--out-dir".into(), p("eval"), "--set".into(), "users=20".into(),
            "--set".into(), "items=10".into(), "--set".into(), "pretrain_samples=2000".into(), "--set".into(),
            "train_samples=800".into(), "--set".into(), "test_samples=400".into(), "--set".into(), "epochs=20".into(),
            "--set".into(), "ctr_epochs=3".into(),
        ],
    ];
    for step in steps {
        let out = Command::new(bin)
            .args(&step)
            .args(["--seed", "13", "--threads", threads])
            .env_remove("PCFGNN_CONFIG")
            .output()
            .map_err(|e| e.to_string())?;
        ensure(out.status.success(), || {
            format!("{} failed: {}", step[0], String::from_utf8_lossy(&out.stderr).trim())
        })?;
    }
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| e.to_string())? {
            let path = entry.map_err(|e| e.to_string())?.path();
            if path.is_dir() {
                stack.push(path);
            } else if !path.to_string_lossy().ends_with("manifest.json") {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                files.push((rel, std::fs::read(&path).map_err(|e| e.to_string())?));
            }
        }
    }
    files.sort();
    Ok(files)
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let runs = [("a", "4"), ("b", "4"), ("c", "1")];
    let mut outputs = Vec::new();
    for (name, threads) in runs {
        let dir = tmp.path().join(name);
        std::fs::create_dir(&dir).map_err(|e| e.to_string())?;
        outputs.push(cli_artifacts(&dir, threads)?);
    }
    let names = |o: &[(String, Vec<u8>)]| o.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>();
    for (i, other) in outputs.iter().enumerate().skip(1) {
        ensure(names(other) == names(&outputs[0]), || format!("run {i} produced different files"))?;
        for ((name, a), (_, b)) in outputs[0].iter().zip(other) {
            ensure(a == b, || format!("{name} differs between runs 0 and {i}"))?;
        }
    }
    Ok(format!("{} artifacts byte-identical across threads 4, 4, 1", outputs[0].len()))
}

fn edge_attribute_fit() -> Outcome {
    let cfg = BenchmarkConfig::default();
    let mut fits = Vec::new();
    for seed in 0..SEEDS {
        let data = generate_synthetic(&SyntheticSpec {
            seed,
            ..SyntheticSpec::default()
        })
        .map_err(|e| e.to_string())?;
        let graph = pretrain_graph(&data.pretrain, &data.schema);
        let fit = edge_fit(&graph, &cfg.model, &cfg.seeded(seed).pretrain, 0.2, seed).map_err(|e| e.to_string())?;
        fits.push(fit.improvement());
    }
    let shown: Vec<String> = fits.iter().map(|f| format!("{:.1}%", 100.0 * f)).collect();
    let detail = format!("held-out RMSE improvement over mean: {}", shown.join(" "));
    ensure(fits.iter().all(|&f| f >= MIN_EDGE_FIT), || detail.clone())?;
    Ok(detail)
}

fn run(id: usize, title: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
    let secs = start.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("PASS {id} {title}: {detail} [{secs:.1}s]");
            true
        }
        Err(detail) => {
            println!("FAIL {id} {title}: {detail} [{secs:.1}s]");
            false
        }
    }
}

#[test]
fn acceptance() {
    let mut passed = vec![
        run(1, "gradient correctness", gradients),
        run(2, "counting oracle", counting),
        run(3, "auc oracle", auc_oracle),
    ];
    let runs = synthetic_runs();
    if let Ok(r) = &runs {
        println!("     synthetic benchmark + ablation, {SEEDS} seeds: {:.1}s", r.seconds);
    }
    let with_runs = |f: fn(&SyntheticRuns) -> Outcome| match &runs {
        Ok(r) => f(r),
        Err(e) => Err(format!("synthetic run failed: {e}")),
    };
    passed.push(run(4, "no_escf < sescf <= pcf", || with_runs(table_one)));
    passed.push(run(5, "generalization to new pairs", || with_runs(table_three)));
    passed.push(run(6, "memory structure", memory));
    passed.push(run(7, "ablation ordering", || with_runs(ablation)));
    passed.push(run(8, "cli determinism", determinism));
    passed.push(run(9, "edge attribute fit", edge_attribute_fit));
    let failed: Vec<usize> = passed
        .iter()
        .enumerate()
        .filter(|(_, ok)| !**ok)
        .map(|(i, _)| i + 1)
        .collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
