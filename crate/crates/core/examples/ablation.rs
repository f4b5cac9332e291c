// The four-way ablation: Baseline, +IN, +FN and DualNorm, across seeds.
//
// At this size the ordering is noisy; the `ablate` subcommand on the default
// corpus is the real comparison.
//
// `cargo run --release --example ablation`

use dualnorm::experiment::{cell_threads, run_ablation, ExperimentConfig};
use dualnorm::synthdata::{generate_benchmark, BenchmarkConfig};

pub fn run_example() {
    let corpus = generate_benchmark(&BenchmarkConfig { ids_per_source: 10, test_ids: 8, ..BenchmarkConfig::desk(5) })
        .expect("corpus");
    let base = ExperimentConfig { epochs: 2, lr_decay_epoch: 1, num_splits: 4, ..ExperimentConfig::desk() };
    let report = run_ablation(&corpus, &base, &[1, 2], cell_threads(), &|r| {
        eprintln!("  done {:?}: rank-1 {:.1}", r.cell, r.rank1);
    })
    .expect("ablation");
    print!("{}", report.to_table());
    assert_eq!(report.rows.len(), 4);
    assert_eq!(report.cells.len(), 8);
}

#[allow(dead_code)]
fn main() {
    run_example();
}
