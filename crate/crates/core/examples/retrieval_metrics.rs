// CMC and mAP on a hand-made gallery, without any network.
//
// `cargo run --example retrieval_metrics`

use dualnorm::backbone::FeatureTap;
use dualnorm::evalkit::{cmc_curve, mean_ap, pairwise_euclidean, FeatureSet};

pub fn run_example() {
    // Two probes, four gallery entries, 2-d features.
    let probe = FeatureSet::new(2, vec![0.0, 0.0, 5.0, 5.0], vec![0, 1], FeatureTap::PostFn).expect("probe");
    let gallery = FeatureSet::new(
        2,
        vec![0.1, 0.0, 4.0, 4.0, 6.0, 6.5, 9.0, 9.0],
        vec![0, 2, 1, 3],
        FeatureTap::PostFn,
    )
    .expect("gallery");

    let d = pairwise_euclidean(&probe, &gallery).expect("distances");
    for (i, row) in d.chunks(gallery.rows()).enumerate() {
        let shown: Vec<String> = row.iter().map(|v| format!("{v:.2}")).collect();
        println!("probe {i} (id {}): {}", probe.labels[i], shown.join("  "));
    }

    // Probe 0 finds its match first; probe 1 sees identity 2 before its own.
    let cmc = cmc_curve(&d, &probe.labels, &gallery.labels, &[1, 2, 3]).expect("cmc");
    let map = mean_ap(&d, &probe.labels, &gallery.labels).expect("map");
    println!("CMC@1,2,3 = {cmc:?}, mAP = {map:.3}");
    assert_eq!(cmc, vec![0.5, 1.0, 1.0]);
    assert!((map - 0.75).abs() < 1e-12);
}

#[allow(dead_code)]
fn main() {
    run_example();
}
