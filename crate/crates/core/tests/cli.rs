//! The `dualnorm` binary end to end on a tiny corpus.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dualnorm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualnorm")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = dualnorm(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    dualnorm(args).status.code().expect("exit code")
}

fn synth(dir: &Path, extra: &[&str]) -> String {
    let d = dir.to_str().unwrap();
    let mut args = vec!["synth", "--out", d, "--ids-per-source", "6", "--test-ids", "5"];
    args.extend_from_slice(extra);
    ok(&args)
}

#[test]
fn synth_train_eval_report() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run) = (tmp.path().join("data"), tmp.path().join("run"));
    let (data_s, run_s) = (data.to_str().unwrap(), run.to_str().unwrap());

    let summary = synth(&data, &[]);
    assert!(summary.contains("K=3 source domains, N=18 training identities"), "{summary}");
    assert_eq!(code(&["synth", "--out", data_s, "--ids-per-source", "6"]), 2, "refuses to overwrite");

    let trained = ok(&["train", "--data", data_s, "--out", run_s, "--epochs", "1", "--set", "num_splits=2", "--seed", "3"]);
    assert!(trained.contains("variant = \"dualnorm\""), "{trained}");
    assert!(trained.contains("held-out rank-1 (pre-fn)"));
    for f in ["config.toml", "train_log.tsv", "checkpoint.toml", "checkpoint.bin"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(run.join("train_log.tsv")).unwrap();
    assert!(log.contains("epoch\tloss\taccuracy\tlr\tseconds"));
    assert!(log.contains("momentum"), "assumptions are listed in the header");

    let ckpt = run.join("checkpoint.toml");
    let evald = ok(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", data_s, "--out", run_s, "--splits", "3", "--save-features"]);
    assert!(evald.contains("tap post-fn (5 identities, 3 splits)"), "{evald}");
    for f in ["cmc_post-fn.toml", "cmc_pre-fn.toml", "cmc_post-fn.tsv", "features_post-fn.bin"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let report = ok(&["report", run_s]);
    assert!(report.contains("== evaluation, tap post-fn"), "{report}");
}

#[test]
fn ablate_and_sweep_write_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, &[]);
    let (d, out) = (data.to_str().unwrap(), tmp.path().join("grid"));
    let o = out.to_str().unwrap();
    let table = ok(&["ablate", "--data", d, "--out", o, "--epochs", "1", "--set", "num_splits=2", "--seeds", "1"]);
    for v in ["Baseline", "+IN", "+FN", "DualNorm"] {
        assert!(table.contains(v), "{table}");
    }
    let sweep = ok(&["sweep-in", "--data", d, "--out", o, "--epochs", "1", "--set", "num_splits=2", "--seeds", "1", "--ranges", "none,1-2,1-8"]);
    assert!(sweep.contains("1-8"), "{sweep}");
    assert!(out.join("ablation.toml").exists() && out.join("sweep_in.tsv").exists());
    let report = ok(&["report", o]);
    assert!(report.contains("== ablation") && report.contains("== IN placement sweep"), "{report}");
}

#[test]
fn error_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let d = data.to_str().unwrap();
    let missing = tmp.path().join("nothing.toml");
    // A directory without a manifest is not a corpus; a missing checkpoint is an I/O failure.
    assert_eq!(code(&["train", "--data", d, "--out", d, "--epochs", "1"]), 3);
    synth(&data, &[]);
    assert_eq!(code(&["eval", "--checkpoint", missing.to_str().unwrap(), "--data", d, "--out", d]), 5);
    // Unknown key, malformed override, invalid value.
    assert_eq!(code(&["train", "--data", d, "--out", d, "--set", "learning_rate=0.1"]), 2);
    assert_eq!(code(&["train", "--data", d, "--out", d, "--set", "epochs"]), 2);
    assert_eq!(code(&["train", "--data", d, "--out", d, "--set", "batch_size=1"]), 2);
    // The desk backbone has eight groups.
    assert_eq!(code(&["sweep-in", "--data", d, "--out", d, "--seeds", "1", "--ranges", "1-9"]), 2);
    // Damaged pixels.
    let pixels = data.join("pixels.bin");
    let mut bytes = fs::read(&pixels).unwrap();
    bytes[7] ^= 1;
    fs::write(&pixels, bytes).unwrap();
    assert_eq!(code(&["train", "--data", d, "--out", d, "--epochs", "1"]), 3);
}

#[test]
fn single_source_corpus_warns() {
    let tmp = tempfile::tempdir().unwrap();
    let out = synth(tmp.path(), &["--sources", "1"]);
    assert!(out.contains("warning:") && out.contains("K=1"), "{out}");
    assert_eq!(code(&["synth", "--out", tmp.path().to_str().unwrap(), "--sources", "4", "--force"]), 2);
}

#[test]
fn degenerate_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let out = synth(tmp.path(), &["--degenerate"]);
    assert!(out.contains("-flat"), "{out}");
}
