//! Event log to interaction graph: tally pair statistics and print the edges.
//!
//! Usage: cargo run --example build_graph -- [log.tsv schema.cfg]

use std::path::PathBuf;

use pcfgnn::graph::build_graph;
use pcfgnn::ingest::{accumulate_stats, read_event_log, RelationSchema};

fn main() -> pcfgnn::Result<()> {
    let fixtures = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let mut args = std::env::args().skip(1);
    let log = args.next().map_or_else(|| fixtures.join("sample_log.tsv"), PathBuf::from);
    let schema = args.next().map_or_else(|| fixtures.join("sample_schema.cfg"), PathBuf::from);

    let schema = RelationSchema::load(&schema)?;
    let events = read_event_log(&log, &schema)?;
    let stats = accumulate_stats(&events, &schema);
    let graph = build_graph(&stats, &schema);
    println!(
        "{} events -> {} nodes, {} edges over {} relations",
        events.len(),
        graph.node_count(),
        graph.edge_count(),
        graph.relation_count()
    );
    graph.write_tsv(std::io::stdout().lock())
}
