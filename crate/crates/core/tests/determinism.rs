//! Same configuration and seed, same bytes.

mod common;

use std::fs;

use dualnorm::experiment::{run_cells, train_and_evaluate, Cell, Variant};
use dualnorm::backbone::InRange;
use dualnorm::synthdata::{generate_benchmark, MANIFEST_FILE, PIXELS_FILE};

#[test]
fn corpus_files_are_byte_identical() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        generate_benchmark(&common::small_benchmark(21)).unwrap().save(d.path(), false).unwrap();
    }
    for f in [MANIFEST_FILE, PIXELS_FILE] {
        let a = fs::read(dirs[0].path().join(f)).unwrap();
        let b = fs::read(dirs[1].path().join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
    let other = generate_benchmark(&common::small_benchmark(22)).unwrap();
    assert_ne!(other.pixels(), common::small_corpus(21).pixels());
}

#[test]
fn checkpoint_and_cmc_files_are_byte_identical() {
    let corpus = common::small_corpus(23);
    let cfg = common::quick_config();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let run = train_and_evaluate(&corpus, &cfg, |_| {}).unwrap();
        run.checkpoint.to_files(&d.path().join("ckpt.toml")).unwrap();
        for r in &run.results {
            fs::write(d.path().join(format!("cmc_{}.toml", r.tap)), r.to_toml().unwrap()).unwrap();
        }
    }
    for f in ["ckpt.toml", "ckpt.bin", "cmc_post-fn.toml", "cmc_pre-fn.toml"] {
        let a = fs::read(dirs[0].path().join(f)).unwrap();
        let b = fs::read(dirs[1].path().join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
}

#[test]
fn seed_changes_the_model() {
    let corpus = common::small_corpus(23);
    let a = train_and_evaluate(&corpus, &common::quick_config(), |_| {}).unwrap();
    let cfg = dualnorm::experiment::ExperimentConfig { seed: 1, ..common::quick_config() };
    let b = train_and_evaluate(&corpus, &cfg, |_| {}).unwrap();
    assert_ne!(a.checkpoint.fingerprint(), b.checkpoint.fingerprint());
}

#[test]
fn grid_results_do_not_depend_on_thread_count() {
    let corpus = common::small_corpus(24);
    let cfg = dualnorm::experiment::ExperimentConfig { epochs: 1, ..common::quick_config() };
    let cells: Vec<Cell> = [Variant::Baseline, Variant::DualNorm]
        .iter()
        .flat_map(|&v| [1, 2].map(|s| Cell::for_variant(v, InRange::new(1, 6), s)))
        .collect();
    let serial = run_cells(&corpus, &cfg, &cells, 1, &|_| {}).unwrap();
    let parallel = run_cells(&corpus, &cfg, &cells, 3, &|_| {}).unwrap();
    assert_eq!(serial, parallel);
}
