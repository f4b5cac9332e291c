// Generate a small multi-domain corpus and look at how far apart the domains are.
//
// `cargo run --release --example synth_corpus`

use dualnorm::synthdata::{generate_benchmark, style_gap, BenchmarkConfig, Corpus};

pub fn run_example() {
    let cfg = BenchmarkConfig { ids_per_source: 10, test_ids: 8, ..BenchmarkConfig::desk(11) };
    let corpus = generate_benchmark(&cfg).expect("corpus");
    let m = &corpus.manifest;
    println!(
        "{} sources, {} training identities, {} held-out identities, {} images of {}x{}",
        m.domains.len(),
        m.num_train_identities,
        m.test_ids,
        corpus.len(),
        m.image.height,
        m.image.width
    );

    let images_of = |domain: usize| {
        m.samples.iter().filter(move |s| s.domain_id == domain).map(|s| corpus.image(s.index))
    };
    let held_out = m.held_out.domain_id;
    for d in &m.domains {
        let gap = style_gap(images_of(d.domain_id), images_of(held_out));
        println!("  {:<10} colour gap to {}: {:.3}", d.name, m.held_out.name, gap);
        assert!(gap > 0.0);
    }

    // The same seed always yields the same pixels.
    let again = generate_benchmark(&cfg).expect("corpus");
    assert_eq!(corpus.manifest.blob_sha256, again.manifest.blob_sha256);

    let dir = tempfile::tempdir().expect("tempdir");
    corpus.save(dir.path(), false).expect("save");
    let loaded = Corpus::load(dir.path()).expect("load");
    assert_eq!(loaded, corpus);
    println!("saved and reloaded, sha256 {}", &loaded.manifest.blob_sha256[..16]);
}

#[allow(dead_code)]
fn main() {
    run_example();
}
