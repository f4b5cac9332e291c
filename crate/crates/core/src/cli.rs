//! Command-line front end: `synth`, `train`, `eval`, `ablate`, `sweep-in`, `report`.
//!
//! Every command writes its results under `--out` in two forms, a TOML document
//! that embeds the resolved configuration and a tab-separated table.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::backbone::{load_checkpoint, FeatureTap};
use crate::error::{Error, Result};
use crate::evalkit::{extract_features, CMCResult, EvalProtocol};
use crate::experiment::{
    cell_threads, parse_ranges, run_ablation, run_sweep, train_and_evaluate, AblationReport, CellResult,
    ExperimentConfig, SweepReport, DEFAULT_SWEEP,
};
use crate::fsio::write_atomic;
use crate::synthdata::{generate_benchmark, BenchmarkConfig, Corpus};
use crate::trainer::TrainLog;

pub const CHECKPOINT_FILE: &str = "checkpoint.toml";
pub const TRAIN_LOG_FILE: &str = "train_log.tsv";
pub const CONFIG_ECHO_FILE: &str = "config.toml";

#[derive(Debug, Parser)]
#[command(name = "dualnorm", version, about = "Instance + feature normalization experiments on a synthetic multi-domain benchmark")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-domain corpus.
    Synth(SynthArgs),
    /// Train one model and write its checkpoint and log.
    Train(TrainArgs),
    /// Score a checkpoint on the held-out domain.
    Eval(EvalArgs),
    /// Train all four variants over several seeds.
    Ablate(GridArgs),
    /// Train one model per instance-norm range, feature norm off.
    SweepIn(SweepArgs),
    /// Print the tables of results already written to a directory.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Number of source domains (1 to 3).
    #[arg(long, default_value_t = 3)]
    pub sources: usize,
    #[arg(long, default_value_t = 100)]
    pub ids_per_source: usize,
    #[arg(long, default_value_t = 4)]
    pub samples_per_id: usize,
    #[arg(long, default_value_t = 30)]
    pub test_ids: usize,
    #[arg(long, default_value_t = 4)]
    pub test_samples_per_id: usize,
    /// Collapse every style and content range (no domain shift).
    #[arg(long)]
    pub degenerate: bool,
    #[arg(long)]
    pub force: bool,
}

/// Configuration shared by every command that trains.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Flat TOML file of experiment keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value` override, applied after the file; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self, extra: &[String]) -> Result<ExperimentConfig> {
        let mut overrides = self.set.clone();
        if let Some(e) = self.epochs {
            overrides.push(format!("epochs={e}"));
        }
        overrides.extend_from_slice(extra);
        ExperimentConfig::resolve(self.config.as_deref(), &overrides)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// baseline | in_only | fn_only | dualnorm
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub splits: usize,
    #[arg(long, default_value_t = 0)]
    pub eval_seed: u64,
    /// Unit-normalize features before ranking (diagnostic).
    #[arg(long)]
    pub l2: bool,
    /// Also write the held-out feature matrix for each tap.
    #[arg(long)]
    pub save_features: bool,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Comma-separated training seeds.
    #[arg(long, default_value = "1,2,3,4,5")]
    pub seeds: String,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub grid: GridArgs,
    /// Comma-separated IN group ranges.
    #[arg(long)]
    pub ranges: Option<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    pub dir: PathBuf,
}

pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|t| t.trim().parse::<u64>().map_err(|_| Error::Parse(format!("bad seed {t:?}"))))
        .collect()
}

fn load_corpus(dir: &Path) -> Result<Corpus> {
    Corpus::load(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Ablate(a) => cmd_ablate(&a, out),
        Command::SweepIn(a) => cmd_sweep_in(&a, out),
        Command::Report(a) => cmd_report(&a.dir, out),
    }
}

pub fn cmd_synth(a: &SynthArgs, out: &mut dyn Write) -> Result<()> {
    let mut cfg = if a.degenerate { BenchmarkConfig::desk_degenerate(a.seed) } else { BenchmarkConfig::desk(a.seed) };
    if a.sources == 0 || a.sources > cfg.sources.len() {
        return Err(Error::Config(format!("--sources must be between 1 and {}", cfg.sources.len())));
    }
    cfg.sources.truncate(a.sources);
    cfg.ids_per_source = a.ids_per_source;
    cfg.samples_per_id = a.samples_per_id;
    cfg.test_ids = a.test_ids;
    cfg.test_samples_per_id = a.test_samples_per_id;
    if a.out.join(crate::synthdata::MANIFEST_FILE).exists() && !a.force {
        return Err(Error::Config(format!("{} already holds a corpus; pass --force to overwrite", a.out.display())));
    }
    let corpus = generate_benchmark(&cfg)?;
    corpus.save(&a.out, a.force)?;
    let m = &corpus.manifest;
    for w in &m.warnings {
        writeln!(out, "warning: {w}")?;
    }
    writeln!(
        out,
        "K={} source domains, N={} training identities, {} training images; held-out domain {:?} with {} identities, {} images",
        m.domains.len(),
        m.num_train_identities,
        m.splits.train_source,
        m.held_out.name,
        m.test_ids,
        m.splits.test
    )?;
    writeln!(out, "pixels sha256 {}", m.blob_sha256)?;
    Ok(())
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut extra = Vec::new();
    if let Some(v) = &a.variant {
        extra.push(format!("variant={v}"));
    }
    if let Some(s) = a.seed {
        extra.push(format!("seed={s}"));
    }
    let cfg = a.cfg.resolve(&extra)?;
    let corpus = load_corpus(&a.data)?;
    let bcfg = cfg.backbone(corpus.manifest.num_train_identities)?;
    let run = train_and_evaluate(&corpus, &cfg, |r| {
        eprintln!("epoch {:>3}  loss {:.4}  acc {:.3}  lr {:.3e}  {:.1}s", r.epoch, r.loss, r.accuracy, r.lr, r.seconds)
    })?;
    let mut log = run.log;
    log.header.push(format!("backbone: {} layers, feature_dim {}", run.model.layers().len(), bcfg.feature_dim));
    fs::create_dir_all(&a.out)?;
    write_text(&a.out.join(CONFIG_ECHO_FILE), &cfg.to_toml()?)?;
    write_text(&a.out.join(TRAIN_LOG_FILE), &log.to_text())?;
    run.checkpoint.to_files(&a.out.join(CHECKPOINT_FILE))?;
    write!(out, "{}", cfg.to_toml()?)?;
    if let Some(last) = log.last() {
        writeln!(out, "final loss {:.4}, train accuracy {:.3}", last.loss, last.accuracy)?;
    }
    for r in &run.results {
        writeln!(out, "held-out rank-1 ({}) {:.1}", r.tap, 100.0 * r.rank1())?;
    }
    writeln!(out, "checkpoint {} ({})", a.out.join(CHECKPOINT_FILE).display(), run.checkpoint.fingerprint())?;
    Ok(())
}

fn cmc_paths(dir: &Path, tap: FeatureTap) -> (PathBuf, PathBuf) {
    (dir.join(format!("cmc_{tap}.toml")), dir.join(format!("cmc_{tap}.tsv")))
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    if !a.checkpoint.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("checkpoint {} not found", a.checkpoint.display()),
        )));
    }
    let mut model = load_checkpoint::<f32>(&a.checkpoint)?;
    let corpus = load_corpus(&a.data)?;
    let protocol = EvalProtocol { num_splits: a.splits, seed: a.eval_seed, l2_normalize: a.l2, ..EvalProtocol::single_shot(0) };
    let fingerprint = crate::backbone::Checkpoint::from_files(&a.checkpoint)?.fingerprint();
    let taps: &[FeatureTap] =
        if model.feature_norm().is_some() { &[FeatureTap::PostFn, FeatureTap::PreFn] } else { &[FeatureTap::PreFn] };
    for &tap in taps {
        let test = corpus.manifest.test_indices();
        let mut features = extract_features(&mut model, &corpus, &test, tap, 64)?;
        features.fingerprint = fingerprint.clone();
        let result = crate::evalkit::score_protocol(&features, &test, &protocol)?;
        let (toml_path, tsv_path) = cmc_paths(&a.out, tap);
        write_text(&toml_path, &result.to_toml()?)?;
        write_text(&tsv_path, &result.to_table())?;
        if a.save_features {
            features.save(&a.out.join(format!("features_{tap}.bin")))?;
        }
        writeln!(out, "tap {tap} ({} identities, {} splits)", result.identities, result.splits.len())?;
        write!(out, "{}", result.to_table())?;
        for w in &result.warnings {
            writeln!(out, "warning: {w}")?;
        }
    }
    Ok(())
}

fn progress(r: &CellResult) {
    eprintln!(
        "done: IN {} FN {} seed {}  rank-1 {:.1}  (train acc {:.3})",
        r.cell.in_range,
        if r.cell.feature_norm { "on" } else { "off" },
        r.cell.seed,
        r.rank1,
        r.final_accuracy
    );
}

pub fn cmd_ablate(a: &GridArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = a.cfg.resolve(&[])?;
    let seeds = parse_seeds(&a.seeds)?;
    let corpus = load_corpus(&a.data)?;
    let report = run_ablation(&corpus, &cfg, &seeds, cell_threads(), &progress)?;
    write_text(&a.out.join("ablation.toml"), &toml::to_string(&report)?)?;
    write_text(&a.out.join("ablation.tsv"), &report.to_tsv())?;
    write!(out, "{}", report.to_table())?;
    Ok(())
}

pub fn cmd_sweep_in(a: &SweepArgs, out: &mut dyn Write) -> Result<()> {
    let g = &a.grid;
    let cfg = g.cfg.resolve(&[])?;
    let seeds = parse_seeds(&g.seeds)?;
    let ranges = parse_ranges(a.ranges.as_deref().unwrap_or(&DEFAULT_SWEEP.join(",")))?;
    let corpus = load_corpus(&g.data)?;
    let report = run_sweep(&corpus, &cfg, &ranges, &seeds, cell_threads(), &progress)?;
    write_text(&g.out.join("sweep_in.toml"), &toml::to_string(&report)?)?;
    write_text(&g.out.join("sweep_in.tsv"), &report.to_tsv())?;
    write!(out, "{}", report.to_table())?;
    Ok(())
}

/// Prints every report found in `dir`.
pub fn cmd_report(dir: &Path, out: &mut dyn Write) -> Result<()> {
    let mut found = false;
    let read = |name: &str| fs::read_to_string(dir.join(name)).ok();
    if let Some(t) = read("ablation.toml") {
        let r: AblationReport = toml::from_str(&t)?;
        writeln!(out, "== ablation (seeds {:?}, corpus seed {})", r.seeds, r.corpus.seed)?;
        write!(out, "{}", r.to_table())?;
        found = true;
    }
    if let Some(t) = read("sweep_in.toml") {
        let r: SweepReport = toml::from_str(&t)?;
        writeln!(out, "== IN placement sweep (seeds {:?}, corpus seed {})", r.seeds, r.corpus.seed)?;
        write!(out, "{}", r.to_table())?;
        found = true;
    }
    for tap in [FeatureTap::PostFn, FeatureTap::PreFn] {
        if let Some(t) = read(&format!("cmc_{tap}.toml")) {
            let r: CMCResult = toml::from_str(&t)?;
            writeln!(out, "== evaluation, tap {tap}")?;
            write!(out, "{}", r.to_table())?;
            found = true;
        }
    }
    if let Some(t) = read(TRAIN_LOG_FILE) {
        let log = TrainLog::parse(&t)?;
        if let Some(last) = log.last() {
            writeln!(out, "== training: {} epochs, final loss {:.4}, accuracy {:.3}", log.epochs.len(), last.loss, last.accuracy)?;
        }
        found = true;
    }
    if !found {
        return Err(Error::Config(format!("no reports found in {}", dir.display())));
    }
    Ok(())
}
