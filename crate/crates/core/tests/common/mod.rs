#![allow(dead_code)]

pub mod oracle;

use dualnorm::experiment::ExperimentConfig;
use dualnorm::synthdata::{generate_benchmark, BenchmarkConfig, Corpus};

/// Three sources × 8 identities × 4 images, 6 held-out identities.
pub fn small_benchmark(seed: u64) -> BenchmarkConfig {
    BenchmarkConfig { ids_per_source: 8, test_ids: 6, ..BenchmarkConfig::desk(seed) }
}

pub fn small_corpus(seed: u64) -> Corpus {
    generate_benchmark(&small_benchmark(seed)).expect("small corpus")
}

/// Desk settings cut to two epochs and three splits.
pub fn quick_config() -> ExperimentConfig {
    ExperimentConfig { epochs: 2, lr_decay_epoch: 1, num_splits: 3, ..ExperimentConfig::desk() }
}
