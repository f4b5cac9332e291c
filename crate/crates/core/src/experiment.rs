//! Experiment configuration and the two experiment grids: the four-variant
//! ablation and the instance-norm placement sweep.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{build_model, BackboneConfig, Checkpoint, FeatureTap, InRange, Model};
use crate::error::{Error, Result};
use crate::evalkit::{run_protocol, CMCResult, EvalProtocol, DEFAULT_KS};
use crate::synthdata::Corpus;
use crate::trainer::{fit_with, EpochRecord, TrainConfig, TrainLog};

/// Environment variable holding the number of grid cells trained concurrently.
pub const THREADS_ENV: &str = "DUALNORM_THREADS";

/// Published rank-1 ordering the ablation is compared against.
pub const REFERENCE_ORDERING: &str =
    "DualNorm > +IN > Baseline and DualNorm > +FN > Baseline (reference rank-1: Baseline 42.1, +IN 52.7, +FN 48.1, DualNorm 53.9)";

pub const DEFAULT_SWEEP: [&str; 8] = ["none", "1-3", "1-4", "1-5", "1-6", "2-6", "1-7", "1-8"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    InOnly,
    FnOnly,
    #[serde(rename = "dualnorm")]
    DualNorm,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::InOnly, Variant::FnOnly, Variant::DualNorm];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::InOnly => "in_only",
            Variant::FnOnly => "fn_only",
            Variant::DualNorm => "dualnorm",
        }
    }

    /// Row label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "Baseline",
            Variant::InOnly => "+IN",
            Variant::FnOnly => "+FN",
            Variant::DualNorm => "DualNorm",
        }
    }

    pub fn has_in(self) -> bool {
        matches!(self, Variant::InOnly | Variant::DualNorm)
    }

    pub fn has_fn(self) -> bool {
        matches!(self, Variant::FnOnly | Variant::DualNorm)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| Error::Parse(format!("unknown variant {s:?} (baseline | in_only | fn_only | dualnorm)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arch {
    Desk,
    FullScale,
}

/// Every setting of one training-plus-evaluation run, as flat keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub variant: Variant,
    /// Groups receiving instance norm in the variants that use it.
    pub in_range: InRange,
    pub in_affine: bool,
    pub arch: Arch,
    pub width_multiplier: f64,
    /// Expected size of the training label space; checked against the corpus when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_identities: Option<usize>,
    pub tap: FeatureTap,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_epoch: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub augment: bool,
    pub seed: u64,
    pub num_splits: usize,
    pub eval_seed: u64,
    pub l2_normalize: bool,
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let train = TrainConfig::preset(name, 0)?;
        let arch = if name == "full-scale" { Arch::FullScale } else { Arch::Desk };
        Ok(ExperimentConfig {
            variant: Variant::DualNorm,
            in_range: InRange::new(1, 6),
            in_affine: true,
            arch,
            width_multiplier: 1.0,
            num_identities: None,
            tap: FeatureTap::PostFn,
            epochs: train.epochs,
            batch_size: train.batch_size,
            lr: train.lr_initial,
            lr_decay_factor: train.lr_decay_factor,
            lr_decay_epoch: train.lr_decay_epoch,
            momentum: train.momentum,
            weight_decay: train.weight_decay,
            label_smoothing: train.label_smoothing_eps,
            augment: train.augment,
            seed: 0,
            num_splits: 10,
            eval_seed: 0,
            l2_normalize: false,
        })
    }

    pub fn desk() -> Self {
        Self::preset("desk").expect("desk preset exists")
    }

    /// Preset, then the file's keys, then `key=value` overrides; unknown keys are errors.
    /// A `preset` key (file or override) picks the starting point.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match file {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?
                .parse::<toml::Table>()
                .map_err(|e| Error::Parse(format!("{}: {e}", p.display())))?,
            None => toml::Table::new(),
        };
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("override {o:?} is not key=value")))?;
            table.insert(k.trim().to_string(), parse_value(v.trim()));
        }
        let preset = match table.remove("preset") {
            Some(toml::Value::String(s)) => s,
            Some(other) => return Err(Error::Parse(format!("preset must be a string, got {other}"))),
            None => "desk".to_string(),
        };
        let mut merged = match toml::Value::try_from(Self::preset(&preset)?)? {
            toml::Value::Table(t) => t,
            _ => unreachable!("config serializes to a table"),
        };
        merged.extend(table);
        let cfg: ExperimentConfig =
            toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.protocol().validate()?;
        if !(self.width_multiplier > 0.0) {
            return Err(Error::Config("width_multiplier must be > 0".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        ExperimentConfig { variant, ..self.clone() }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_initial: self.lr,
            lr_decay_factor: self.lr_decay_factor,
            lr_decay_epoch: self.lr_decay_epoch,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            label_smoothing_eps: self.label_smoothing,
            augment: self.augment,
            seed: self.seed,
        }
    }

    pub fn protocol(&self) -> EvalProtocol {
        EvalProtocol {
            num_splits: self.num_splits,
            seed: self.eval_seed,
            ks: DEFAULT_KS.to_vec(),
            l2_normalize: self.l2_normalize,
        }
    }

    /// Architecture for this variant over a label space of `num_identities`.
    pub fn backbone(&self, num_identities: usize) -> Result<BackboneConfig> {
        if let Some(n) = self.num_identities.filter(|&n| n != num_identities) {
            return Err(Error::Config(format!(
                "config expects {n} training identities but the corpus has {num_identities}"
            )));
        }
        let base = match self.arch {
            Arch::Desk => BackboneConfig::desk(num_identities),
            Arch::FullScale => BackboneConfig::full_scale(num_identities, self.width_multiplier),
        };
        let range = if self.variant.has_in() { self.in_range } else { InRange::NONE };
        if range.last > base.num_groups() {
            return Err(Error::Config(format!("IN range {range} exceeds the {} groups of the backbone", base.num_groups())));
        }
        let mut cfg = base.with_in_range(range).with_feature_norm(self.variant.has_fn());
        cfg.in_affine = self.in_affine;
        cfg.feature_tap = self.tap;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_value(v: &str) -> toml::Value {
    format!("v = {v}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()))
}

/// What a report needs to identify the corpus it was measured on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusInfo {
    pub seed: u64,
    pub degenerate: bool,
    pub sources: usize,
    pub train_identities: usize,
    pub test_identities: usize,
    pub blob_sha256: String,
}

impl CorpusInfo {
    pub fn of(corpus: &Corpus) -> Self {
        let m = &corpus.manifest;
        CorpusInfo {
            seed: m.seed,
            degenerate: m.degenerate,
            sources: m.domains.len(),
            train_identities: m.num_train_identities,
            test_identities: m.test_ids,
            blob_sha256: m.blob_sha256.clone(),
        }
    }
}

/// A trained model with everything measured on it.
pub struct TrainedRun {
    pub model: Model<f32>,
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
    /// One result per tap: the configured one first, then pre-FN when feature norm is present.
    pub results: Vec<CMCResult>,
}

/// Builds, trains and evaluates one model.
pub fn train_and_evaluate(
    corpus: &Corpus,
    cfg: &ExperimentConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainedRun> {
    let bcfg = cfg.backbone(corpus.manifest.num_train_identities)?;
    let mut model = build_model::<f32>(&bcfg, cfg.seed)?;
    let (checkpoint, mut log) = fit_with(&mut model, corpus, &cfg.train_config(), on_epoch)?;
    log.header.insert(0, format!("variant {} (in_range {}, feature_norm {})", cfg.variant, bcfg.in_range().unwrap_or(InRange::NONE), bcfg.feature_norm));
    let results = evaluate(&mut model, corpus, &cfg.protocol(), cfg.tap)?;
    Ok(TrainedRun { model, checkpoint, log, results })
}

/// The configured tap, plus the other tap when the model has a feature norm.
pub fn evaluate(model: &mut Model<f32>, corpus: &Corpus, protocol: &EvalProtocol, tap: FeatureTap) -> Result<Vec<CMCResult>> {
    let mut out = vec![run_protocol(model, corpus, protocol, tap)?];
    if model.feature_norm().is_some() {
        let other = match tap {
            FeatureTap::PostFn => FeatureTap::PreFn,
            FeatureTap::PreFn => FeatureTap::PostFn,
        };
        out.push(run_protocol(model, corpus, protocol, other)?);
    }
    Ok(out)
}

/// One point of an experiment grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub in_range: InRange,
    pub feature_norm: bool,
    pub seed: u64,
}

impl Cell {
    pub fn for_variant(variant: Variant, in_range: InRange, seed: u64) -> Self {
        Cell {
            in_range: if variant.has_in() { in_range } else { InRange::NONE },
            feature_norm: variant.has_fn(),
            seed,
        }
    }

    fn config(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let variant = match (self.in_range.is_empty(), self.feature_norm) {
            (true, false) => Variant::Baseline,
            (false, false) => Variant::InOnly,
            (true, true) => Variant::FnOnly,
            (false, true) => Variant::DualNorm,
        };
        ExperimentConfig { variant, in_range: self.in_range, seed: self.seed, ..base.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: Cell,
    /// Held-out rank-1 (percent) at the configured tap.
    pub rank1: f64,
    /// Held-out rank-1 (percent) on pooled features before any feature norm.
    pub rank1_pre_fn: f64,
    pub map: f64,
    pub final_loss: f64,
    pub final_accuracy: f64,
    pub checkpoint_fingerprint: String,
}

/// Concurrent cells from `DUALNORM_THREADS`, defaulting to the available cores.
pub fn cell_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

pub fn run_cell(corpus: &Corpus, base: &ExperimentConfig, cell: Cell) -> Result<CellResult> {
    let cfg = cell.config(base);
    let run = train_and_evaluate(corpus, &cfg, |_| {})?;
    let main = &run.results[0];
    let pre = run.results.iter().find(|r| r.tap == FeatureTap::PreFn).unwrap_or(main);
    let last = run.log.last().cloned();
    Ok(CellResult {
        cell,
        rank1: 100.0 * main.rank1(),
        rank1_pre_fn: 100.0 * pre.rank1(),
        map: 100.0 * main.mean_map,
        final_loss: last.as_ref().map_or(f64::NAN, |r| r.loss),
        final_accuracy: last.map_or(f64::NAN, |r| r.accuracy),
        checkpoint_fingerprint: run.checkpoint.fingerprint(),
    })
}

/// Trains every cell, `threads` at a time; results come back in input order.
/// `on_done` is called as cells finish.
pub fn run_cells(
    corpus: &Corpus,
    base: &ExperimentConfig,
    cells: &[Cell],
    threads: usize,
    on_done: &(dyn Fn(&CellResult) + Sync),
) -> Result<Vec<CellResult>> {
    let work = |c: &Cell| {
        let r = run_cell(corpus, base, *c)?;
        on_done(&r);
        Ok(r)
    };
    if threads <= 1 {
        return cells.iter().map(work).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {threads} worker threads: {e}")))?;
    pool.install(|| cells.par_iter().map(work).collect())
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub claim: String,
    pub holds: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    /// Rank-1 (percent) per seed at the configured tap.
    pub rank1: Vec<f64>,
    pub rank1_pre_fn: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
    pub mean_pre_fn: f64,
    pub mean_map: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: ExperimentConfig,
    pub corpus: CorpusInfo,
    pub seeds: Vec<u64>,
    pub reference: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    pub rows: Vec<AblationRow>,
    pub verdicts: Vec<Verdict>,
    pub cells: Vec<CellResult>,
}

/// Ordering checks on mean rank-1 (percent): Baseline, +IN, +FN, DualNorm.
pub fn ablation_verdicts(baseline: f64, in_only: f64, fn_only: f64, dualnorm: f64) -> Vec<Verdict> {
    let v = |claim: &str, holds: bool, detail: String| Verdict { claim: claim.into(), holds, detail };
    vec![
        v("DualNorm >= Baseline + 5", dualnorm >= baseline + 5.0, format!("{dualnorm:.1} vs {:.1}", baseline + 5.0)),
        v("+IN > Baseline", in_only > baseline, format!("{in_only:.1} vs {baseline:.1}")),
        v("+FN > Baseline", fn_only > baseline, format!("{fn_only:.1} vs {baseline:.1}")),
        v(
            "DualNorm >= max(+IN, +FN) - 1",
            dualnorm >= in_only.max(fn_only) - 1.0,
            format!("{dualnorm:.1} vs {:.1}", in_only.max(fn_only) - 1.0),
        ),
    ]
}

/// The four ablation variants as cells, seed-major within each variant.
pub fn ablation_cells(base: &ExperimentConfig, seeds: &[u64]) -> Vec<Cell> {
    Variant::ALL
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| Cell::for_variant(v, base.in_range, s)))
        .collect()
}

/// Assembles the report from finished cells (which may include cells of other grids).
pub fn ablation_report(corpus: &Corpus, base: &ExperimentConfig, seeds: &[u64], results: &[CellResult]) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for v in Variant::ALL {
        let mine: Vec<&CellResult> = seeds
            .iter()
            .map(|&s| {
                let want = Cell::for_variant(v, base.in_range, s);
                results
                    .iter()
                    .find(|r| r.cell == want)
                    .ok_or_else(|| Error::State(format!("no result for {} seed {s}", v.label())))
            })
            .collect::<Result<_>>()?;
        let rank1: Vec<f64> = mine.iter().map(|r| r.rank1).collect();
        let pre: Vec<f64> = mine.iter().map(|r| r.rank1_pre_fn).collect();
        let (mean, sd) = mean_sd(&rank1);
        rows.push(AblationRow {
            variant: v,
            mean,
            sd,
            mean_pre_fn: mean_sd(&pre).0,
            mean_map: mean_sd(&mine.iter().map(|r| r.map).collect::<Vec<_>>()).0,
            rank1,
            rank1_pre_fn: pre,
        });
    }
    let mut warnings = Vec::new();
    if seeds.len() < 2 {
        warnings.push("single seed: means carry high variance and no spread estimate".into());
    }
    let verdicts = ablation_verdicts(rows[0].mean, rows[1].mean, rows[2].mean, rows[3].mean);
    let cells = ablation_cells(base, seeds)
        .iter()
        .filter_map(|c| results.iter().find(|r| r.cell == *c).cloned())
        .collect();
    Ok(AblationReport {
        config: base.clone(),
        corpus: CorpusInfo::of(corpus),
        seeds: seeds.to_vec(),
        reference: REFERENCE_ORDERING.into(),
        warnings,
        rows,
        verdicts,
        cells,
    })
}

pub fn run_ablation(
    corpus: &Corpus,
    base: &ExperimentConfig,
    seeds: &[u64],
    threads: usize,
    on_done: &(dyn Fn(&CellResult) + Sync),
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    for v in Variant::ALL {
        base.with_variant(v).backbone(corpus.manifest.num_train_identities)?;
    }
    let results = run_cells(corpus, base, &ablation_cells(base, seeds), threads, on_done)?;
    ablation_report(corpus, base, seeds, &results)
}

impl AblationReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "variant    rank-1 mean ± sd   pre-FN rank-1   mAP     per-seed rank-1");
        for r in &self.rows {
            let seeds: Vec<String> = r.rank1.iter().map(|v| format!("{v:.1}")).collect();
            let _ = writeln!(
                s,
                "{:<10} {:>6.1} ± {:<5.1}      {:>6.1}        {:>5.1}   {}",
                r.variant.label(),
                r.mean,
                r.sd,
                r.mean_pre_fn,
                r.mean_map,
                seeds.join(" ")
            );
        }
        let _ = writeln!(s, "\nmeasured ordering:");
        for v in &self.verdicts {
            let _ = writeln!(s, "  [{}] {} ({})", if v.holds { "yes" } else { "no" }, v.claim, v.detail);
        }
        let _ = writeln!(s, "reference ordering: {}", self.reference);
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        s
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("variant\tseed\trank1\trank1_pre_fn\tmap\tfinal_loss\tfinal_accuracy\n");
        for c in &self.cells {
            let v = self.rows.iter().map(|r| r.variant).find(|&v| Cell::for_variant(v, self.config.in_range, c.cell.seed) == c.cell);
            let _ = writeln!(
                s,
                "{}\t{}\t{:.2}\t{:.2}\t{:.2}\t{:.5}\t{:.4}",
                v.map_or("?", Variant::tag),
                c.cell.seed,
                c.rank1,
                c.rank1_pre_fn,
                c.map,
                c.final_loss,
                c.final_accuracy
            );
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub in_range: InRange,
    pub rank1: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config: ExperimentConfig,
    pub corpus: CorpusInfo,
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
    /// Range reaching the deepest group.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deepest: Option<InRange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_shallow: Option<InRange>,
    /// Deepest range's mean rank-1 does not exceed the best shallower range's.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deep_not_better: Option<bool>,
    pub cells: Vec<CellResult>,
}

pub fn parse_ranges(list: &str) -> Result<Vec<InRange>> {
    list.split(',').map(str::parse).collect()
}

pub fn sweep_cells(ranges: &[InRange], seeds: &[u64]) -> Vec<Cell> {
    ranges
        .iter()
        .flat_map(|&r| seeds.iter().map(move |&seed| Cell { in_range: r, feature_norm: false, seed }))
        .collect()
}

/// Rejects any range that places instance norm on a 1×1 plane before anything trains.
pub fn check_ranges(base: &ExperimentConfig, ranges: &[InRange], num_identities: usize) -> Result<()> {
    for &r in ranges {
        ExperimentConfig { variant: Variant::InOnly, in_range: r, ..base.clone() }
            .backbone(num_identities)
            .map_err(|e| Error::Config(format!("IN range {r}: {e}")))?;
    }
    Ok(())
}

pub fn sweep_report(corpus: &Corpus, base: &ExperimentConfig, ranges: &[InRange], seeds: &[u64], results: &[CellResult]) -> Result<SweepReport> {
    let mut rows = Vec::new();
    for &r in ranges {
        let rank1: Vec<f64> = seeds
            .iter()
            .map(|&seed| {
                let want = Cell { in_range: r, feature_norm: false, seed };
                results
                    .iter()
                    .find(|c| c.cell == want)
                    .map(|c| c.rank1)
                    .ok_or_else(|| Error::State(format!("no result for range {r} seed {seed}")))
            })
            .collect::<Result<_>>()?;
        let (mean, sd) = mean_sd(&rank1);
        rows.push(SweepRow { in_range: r, rank1, mean, sd });
    }
    let deepest_row = rows
        .iter()
        .filter(|r| !r.in_range.is_empty())
        .max_by_key(|r| (r.in_range.last, std::cmp::Reverse(r.in_range.first)));
    let deepest = deepest_row.map(|r| r.in_range);
    let best_shallow_row = rows
        .iter()
        .filter(|r| !r.in_range.is_empty() && deepest.is_some_and(|d| r.in_range.last < d.last))
        .max_by(|a, b| a.mean.total_cmp(&b.mean));
    let deep_not_better = deepest_row.zip(best_shallow_row).map(|(d, s)| d.mean <= s.mean);
    let cells = sweep_cells(ranges, seeds)
        .iter()
        .filter_map(|c| results.iter().find(|r| r.cell == *c).cloned())
        .collect();
    Ok(SweepReport {
        config: ExperimentConfig { variant: Variant::InOnly, ..base.clone() },
        corpus: CorpusInfo::of(corpus),
        seeds: seeds.to_vec(),
        best_shallow: best_shallow_row.map(|r| r.in_range),
        deepest,
        deep_not_better,
        rows,
        cells,
    })
}

/// One feature-norm-free model per IN range and seed.
pub fn run_sweep(
    corpus: &Corpus,
    base: &ExperimentConfig,
    ranges: &[InRange],
    seeds: &[u64],
    threads: usize,
    on_done: &(dyn Fn(&CellResult) + Sync),
) -> Result<SweepReport> {
    if seeds.is_empty() || ranges.is_empty() {
        return Err(Error::Config("the sweep needs at least one range and one seed".into()));
    }
    check_ranges(base, ranges, corpus.manifest.num_train_identities)?;
    let results = run_cells(corpus, base, &sweep_cells(ranges, seeds), threads, on_done)?;
    sweep_report(corpus, base, ranges, seeds, &results)
}

impl SweepReport {
    pub fn to_table(&self) -> String {
        let mut s = String::from("IN range   rank-1 mean ± sd   per-seed rank-1\n");
        for r in &self.rows {
            let seeds: Vec<String> = r.rank1.iter().map(|v| format!("{v:.1}")).collect();
            let _ = writeln!(s, "{:<10} {:>6.1} ± {:<5.1}      {}", r.in_range.to_string(), r.mean, r.sd, seeds.join(" "));
        }
        if let (Some(d), Some(b), Some(flag)) = (self.deepest, self.best_shallow, self.deep_not_better) {
            let _ = writeln!(
                s,
                "\ndeepest range {d} {} best shallower range {b}: [{}] IN in deep groups does not help",
                if flag { "<=" } else { ">" },
                if flag { "yes" } else { "no" }
            );
        }
        s
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("in_range\tseed\trank1\tmap\tfinal_loss\tfinal_accuracy\n");
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{}\t{}\t{:.2}\t{:.2}\t{:.5}\t{:.4}",
                c.cell.in_range, c.cell.seed, c.rank1, c.map, c.final_loss, c.final_accuracy
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_set_both_switches() {
        let base = ExperimentConfig::desk();
        let b = base.with_variant(Variant::Baseline).backbone(10).unwrap();
        assert!(b.in_mask.iter().all(|m| !m) && !b.feature_norm);
        let d = base.with_variant(Variant::DualNorm).backbone(10).unwrap();
        assert_eq!(d.in_range(), Some(InRange::new(1, 6)));
        assert!(d.feature_norm);
    }

    #[test]
    fn overrides_beat_preset() {
        let c = ExperimentConfig::resolve(None, &["epochs=3".into(), "variant=\"in_only\"".into(), "in_range=1-5".into()])
            .unwrap();
        assert_eq!(c.epochs, 3);
        assert_eq!(c.variant, Variant::InOnly);
        assert_eq!(c.in_range, InRange::new(1, 5));
        assert!(matches!(ExperimentConfig::resolve(None, &["bogus=1".into()]), Err(Error::Parse(_))));
    }

    #[test]
    fn config_round_trips() {
        let c = ExperimentConfig::desk();
        let back: ExperimentConfig = toml::from_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn identity_count_mismatch_rejected() {
        let c = ExperimentConfig { num_identities: Some(300), ..ExperimentConfig::desk() };
        assert!(matches!(c.backbone(299), Err(Error::Config(_))));
    }

    #[test]
    fn verdicts_follow_thresholds() {
        let v = ablation_verdicts(40.0, 45.0, 41.0, 45.0);
        assert_eq!(v.iter().map(|v| v.holds).collect::<Vec<_>>(), vec![true, true, true, true]);
        let v = ablation_verdicts(40.0, 50.0, 39.0, 44.0);
        assert_eq!(v.iter().map(|v| v.holds).collect::<Vec<_>>(), vec![false, true, false, false]);
    }

    #[test]
    fn sweep_cells_share_baseline_key() {
        let base = ExperimentConfig::desk();
        let none = sweep_cells(&[InRange::NONE], &[3])[0];
        assert_eq!(none, Cell::for_variant(Variant::Baseline, base.in_range, 3));
        let in6 = sweep_cells(&[InRange::new(1, 6)], &[3])[0];
        assert_eq!(in6, Cell::for_variant(Variant::InOnly, base.in_range, 3));
    }
}
