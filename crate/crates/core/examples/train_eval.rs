// Train a DualNorm model on a few source domains and score it on the unseen one.
//
// `cargo run --release --example train_eval`

use dualnorm::backbone::Checkpoint;
use dualnorm::evalkit::run_protocol;
use dualnorm::experiment::{train_and_evaluate, ExperimentConfig, Variant};
use dualnorm::synthdata::{generate_benchmark, BenchmarkConfig};

pub fn run_example() {
    let corpus = generate_benchmark(&BenchmarkConfig { ids_per_source: 12, test_ids: 10, ..BenchmarkConfig::desk(3) })
        .expect("corpus");
    let cfg = ExperimentConfig { variant: Variant::DualNorm, epochs: 3, lr_decay_epoch: 2, num_splits: 5, seed: 1, ..ExperimentConfig::desk() };

    let mut run = train_and_evaluate(&corpus, &cfg, |r| {
        println!("epoch {:>2}  loss {:.3}  acc {:.3}  lr {:.4}", r.epoch, r.loss, r.accuracy, r.lr);
    })
    .expect("training");
    for r in &run.results {
        println!("{}: rank-1 {:.1}%  mAP {:.1}%", r.tap, 100.0 * r.rank1(), 100.0 * r.mean_map);
    }

    // The feature norm has no shift, before or after training.
    let fnorm = run.model.feature_norm().expect("DualNorm has a feature norm");
    assert!(fnorm.params().beta.value.data().iter().all(|b| b.to_bits() == 0));

    // A restored checkpoint reproduces the scores exactly.
    let mut restored = Checkpoint::capture(&mut run.model).restore::<f32>().expect("restore");
    let again = run_protocol(&mut restored, &corpus, &cfg.protocol(), cfg.tap).expect("eval");
    assert_eq!(again.mean_cmc, run.results[0].mean_cmc);
}

#[allow(dead_code)]
fn main() {
    run_example();
}
