// Where should instance norm go? Train feature-norm-free models with IN on
// progressively deeper prefixes of the backbone.
//
// `cargo run --release --example in_sweep`

use dualnorm::experiment::{cell_threads, parse_ranges, run_sweep, ExperimentConfig};
use dualnorm::synthdata::{generate_benchmark, BenchmarkConfig};

pub fn run_example() {
    let corpus = generate_benchmark(&BenchmarkConfig { ids_per_source: 10, test_ids: 8, ..BenchmarkConfig::desk(5) })
        .expect("corpus");
    let base = ExperimentConfig { epochs: 2, lr_decay_epoch: 1, num_splits: 4, ..ExperimentConfig::desk() };
    let ranges = parse_ranges("none,1-2,1-6,1-8").expect("ranges");
    let report = run_sweep(&corpus, &base, &ranges, &[1], cell_threads(), &|_| {}).expect("sweep");
    print!("{}", report.to_table());
    assert_eq!(report.rows.len(), ranges.len());
}

#[allow(dead_code)]
fn main() {
    run_example();
}
