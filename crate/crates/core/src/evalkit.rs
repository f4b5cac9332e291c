//! Feature extraction, Euclidean retrieval and single-shot CMC / mAP scoring
//! averaged over random probe/gallery splits.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::{FeatureTap, Model};
use crate::error::{Error, Result};
use crate::fsio::{f32_from_le, f32_le_bytes, write_atomic};
use crate::synthdata::Corpus;
use crate::tensor::Mode;

pub const FEATURE_FORMAT: &str = "dualnorm-features v1";
pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

/// Feature rows with their identity labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub dim: usize,
    pub data: Vec<f32>,
    pub labels: Vec<usize>,
    pub tap: FeatureTap,
    pub fingerprint: String,
    pub warnings: Vec<String>,
}

impl FeatureSet {
    pub fn new(dim: usize, data: Vec<f32>, labels: Vec<usize>, tap: FeatureTap) -> Result<Self> {
        if dim == 0 || data.len() != dim * labels.len() {
            return Err(Error::Config(format!(
                "{} values cannot form {} rows of dimension {dim}",
                data.len(),
                labels.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("feature matrix has non-finite entries".into()));
        }
        Ok(FeatureSet { dim, data, labels, tap, fingerprint: String::new(), warnings: Vec::new() })
    }

    pub fn rows(&self) -> usize {
        self.labels.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> FeatureSet {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        FeatureSet { data, labels: idx.iter().map(|&i| self.labels[i]).collect(), ..self.clone() }
    }

    /// Each row scaled to unit Euclidean norm; zero rows stay zero.
    pub fn l2_normalized(&self) -> FeatureSet {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.dim) {
            let norm = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|v| *v = (*v as f64 / norm) as f32);
            }
        }
        out
    }

    /// Text header terminated by a blank line, then the row-major f32 matrix.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = String::new();
        let _ = writeln!(head, "{FEATURE_FORMAT}");
        let _ = writeln!(head, "rows {}", self.rows());
        let _ = writeln!(head, "dim {}", self.dim);
        let _ = writeln!(head, "tap {}", self.tap);
        let _ = writeln!(head, "fingerprint {}", self.fingerprint);
        let labels: Vec<String> = self.labels.iter().map(|l| l.to_string()).collect();
        let _ = writeln!(head, "labels {}", labels.join(" "));
        for w in &self.warnings {
            let _ = writeln!(head, "warning {w}");
        }
        head.push('\n');
        let mut bytes = head.into_bytes();
        bytes.extend(f32_le_bytes(self.data.iter().copied()));
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| Error::Corruption("feature file has no header terminator".into()))?;
        let head = std::str::from_utf8(&bytes[..split]).map_err(|_| Error::Corruption("feature header is not text".into()))?;
        let mut lines = head.lines();
        if lines.next() != Some(FEATURE_FORMAT) {
            return Err(Error::Corruption("not a feature file".into()));
        }
        let (mut rows, mut dim, mut tap, mut fingerprint, mut labels, mut warnings) =
            (None, None, FeatureTap::PostFn, String::new(), Vec::new(), Vec::new());
        for line in lines {
            let (key, value) = line.split_once(' ').unwrap_or((line, ""));
            let bad = || Error::Corruption(format!("bad feature header line {line:?}"));
            match key {
                "rows" => rows = Some(value.parse::<usize>().map_err(|_| bad())?),
                "dim" => dim = Some(value.parse::<usize>().map_err(|_| bad())?),
                "tap" => tap = value.parse().map_err(|_| bad())?,
                "fingerprint" => fingerprint = value.to_string(),
                "labels" => {
                    labels = value.split_whitespace().map(|t| t.parse().map_err(|_| bad())).collect::<Result<_>>()?
                }
                "warning" => warnings.push(value.to_string()),
                _ => return Err(bad()),
            }
        }
        let (rows, dim) = rows.zip(dim).ok_or_else(|| Error::Corruption("feature header lacks rows/dim".into()))?;
        let data = f32_from_le(&bytes[split + 2..], "feature matrix")?;
        if labels.len() != rows || data.len() != rows * dim {
            return Err(Error::Corruption(format!(
                "feature file declares {rows}x{dim} but holds {} values and {} labels",
                data.len(),
                labels.len()
            )));
        }
        let mut fs = FeatureSet::new(dim, data, labels, tap)?;
        fs.fingerprint = fingerprint;
        fs.warnings = warnings;
        Ok(fs)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// Eval-mode features of `samples`, `batch_size` images at a time.
pub fn extract_features(
    model: &mut Model<f32>,
    corpus: &Corpus,
    samples: &[usize],
    tap: FeatureTap,
    batch_size: usize,
) -> Result<FeatureSet> {
    let mut warnings = Vec::new();
    if model.min_norm_updates() == 0 {
        warnings.push("running statistics were never updated; eval-mode features use their initial values".into());
    }
    let mut data = Vec::with_capacity(samples.len() * model.feature_dim());
    for chunk in samples.chunks(batch_size.max(1)) {
        let f = model.forward_features(&corpus.batch(chunk), Mode::Eval, tap)?;
        data.extend_from_slice(f.data());
    }
    let mut fs = FeatureSet::new(model.feature_dim(), data, corpus.labels(samples), tap)?;
    fs.warnings = warnings;
    Ok(fs)
}

/// Input-independent Gaussian features: each sample index gets its own fixed draw.
pub fn random_features(corpus: &Corpus, samples: &[usize], dim: usize, seed: u64) -> Result<FeatureSet> {
    let mut data = Vec::with_capacity(samples.len() * dim);
    for &s in samples {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(s as u64);
        data.extend((0..dim).map(|_| StandardNormal.sample(&mut rng)).map(|v: f64| v as f32));
    }
    FeatureSet::new(dim, data, corpus.labels(samples), FeatureTap::PreFn)
}

/// Row-major `Q×G` Euclidean distances, summed in f64 in coordinate order.
pub fn pairwise_euclidean(probe: &FeatureSet, gallery: &FeatureSet) -> Result<Vec<f64>> {
    if probe.dim != gallery.dim {
        return Err(Error::Config(format!("probe dim {} != gallery dim {}", probe.dim, gallery.dim)));
    }
    let mut out = Vec::with_capacity(probe.rows() * gallery.rows());
    for i in 0..probe.rows() {
        let q = probe.row(i);
        for j in 0..gallery.rows() {
            let s: f64 = q.iter().zip(gallery.row(j)).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
            out.push(s.sqrt());
        }
    }
    Ok(out)
}

/// Gallery order for one probe: ascending distance, ties by ascending gallery index.
fn ranking(row: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    order
}

fn check_matrix(distances: &[f64], probe_labels: &[usize], gallery_labels: &[usize]) -> Result<usize> {
    let g = gallery_labels.len();
    if distances.len() != probe_labels.len() * g || g == 0 {
        return Err(Error::Config(format!(
            "distance matrix has {} entries for {}x{g}",
            distances.len(),
            probe_labels.len()
        )));
    }
    if let Some((i, y)) = probe_labels.iter().enumerate().find(|(_, y)| !gallery_labels.contains(y)) {
        return Err(Error::Protocol(format!("probe {i} has identity {y}, which is absent from the gallery")));
    }
    Ok(g)
}

/// Fraction of probes whose first true match lies within the top `k`, for each `k`.
pub fn cmc_curve(distances: &[f64], probe_labels: &[usize], gallery_labels: &[usize], ks: &[usize]) -> Result<Vec<f64>> {
    let g = check_matrix(distances, probe_labels, gallery_labels)?;
    let mut hits = vec![0usize; ks.len()];
    for (i, &y) in probe_labels.iter().enumerate() {
        let order = ranking(&distances[i * g..(i + 1) * g]);
        let pos = order.iter().position(|&j| gallery_labels[j] == y).expect("checked above");
        for (h, &k) in hits.iter_mut().zip(ks) {
            if pos < k {
                *h += 1;
            }
        }
    }
    let n = probe_labels.len().max(1) as f64;
    Ok(hits.into_iter().map(|h| h as f64 / n).collect())
}

/// Mean over probes of the average precision of the ranked gallery.
pub fn mean_ap(distances: &[f64], probe_labels: &[usize], gallery_labels: &[usize]) -> Result<f64> {
    let g = check_matrix(distances, probe_labels, gallery_labels)?;
    let mut total = 0.0;
    for (i, &y) in probe_labels.iter().enumerate() {
        let order = ranking(&distances[i * g..(i + 1) * g]);
        let (mut found, mut ap) = (0usize, 0.0);
        for (rank, &j) in order.iter().enumerate() {
            if gallery_labels[j] == y {
                found += 1;
                ap += found as f64 / (rank + 1) as f64;
            }
        }
        total += ap / found as f64;
    }
    Ok(total / probe_labels.len().max(1) as f64)
}

/// Single-shot split rule: per split, two images of every test identity are drawn;
/// the first is the probe, the second the gallery entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub num_splits: usize,
    pub seed: u64,
    pub ks: Vec<usize>,
    /// Unit-normalize features before computing distances (diagnostic only).
    #[serde(default)]
    pub l2_normalize: bool,
}

impl EvalProtocol {
    pub fn single_shot(seed: u64) -> Self {
        EvalProtocol { num_splits: 10, seed, ks: DEFAULT_KS.to_vec(), l2_normalize: false }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_splits == 0 || self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config("protocol needs at least one split and positive ranks".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitScore {
    pub split: usize,
    pub cmc: Vec<f64>,
    pub map: f64,
    /// Sample indices used as probes and gallery, in identity order.
    pub probes: Vec<usize>,
    pub gallery: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CMCResult {
    pub tap: FeatureTap,
    pub ks: Vec<usize>,
    pub identities: usize,
    pub mean_cmc: Vec<f64>,
    pub mean_map: f64,
    /// Standard deviation of rank-1 across splits.
    pub rank1_sd: f64,
    pub splits: Vec<SplitScore>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl CMCResult {
    pub fn rank1(&self) -> f64 {
        self.mean_cmc[0]
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Tab-separated table: one row per split, then the mean.
    pub fn to_table(&self) -> String {
        let mut s = String::from("split");
        for k in &self.ks {
            let _ = write!(s, "\trank{k}");
        }
        s.push_str("\tmAP\n");
        let mut row = |name: &str, cmc: &[f64], map: f64| {
            s.push_str(name);
            for v in cmc {
                let _ = write!(s, "\t{:.4}", v);
            }
            let _ = writeln!(s, "\t{:.4}", map);
        };
        for sp in &self.splits {
            row(&sp.split.to_string(), &sp.cmc, sp.map);
        }
        row("mean", &self.mean_cmc, self.mean_map);
        s
    }
}

/// Scores an already-extracted feature set of the held-out samples.
pub fn score_protocol(features: &FeatureSet, samples: &[usize], protocol: &EvalProtocol) -> Result<CMCResult> {
    protocol.validate()?;
    let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (row, &label) in features.labels.iter().enumerate() {
        by_id.entry(label).or_default().push(row);
    }
    if let Some((id, rows)) = by_id.iter().find(|(_, r)| r.len() < 2) {
        return Err(Error::Protocol(format!("identity {id} has {} image(s); a split needs two", rows.len())));
    }
    let features = if protocol.l2_normalize { features.l2_normalized() } else { features.clone() };
    let mut splits = Vec::with_capacity(protocol.num_splits);
    for split in 0..protocol.num_splits {
        let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);
        rng.set_stream(split as u64);
        let (mut probe_rows, mut gallery_rows) = (Vec::new(), Vec::new());
        for rows in by_id.values() {
            let pick: Vec<usize> = rows.choose_multiple(&mut rng, 2).copied().collect();
            probe_rows.push(pick[0]);
            gallery_rows.push(pick[1]);
        }
        let (p, g) = (features.select(&probe_rows), features.select(&gallery_rows));
        let d = pairwise_euclidean(&p, &g)?;
        splits.push(SplitScore {
            split,
            cmc: cmc_curve(&d, &p.labels, &g.labels, &protocol.ks)?,
            map: mean_ap(&d, &p.labels, &g.labels)?,
            probes: probe_rows.iter().map(|&r| samples[r]).collect(),
            gallery: gallery_rows.iter().map(|&r| samples[r]).collect(),
        });
    }
    let n = splits.len() as f64;
    let mean_cmc: Vec<f64> =
        (0..protocol.ks.len()).map(|k| splits.iter().map(|s| s.cmc[k]).sum::<f64>() / n).collect();
    let rank1_sd = (splits.iter().map(|s| (s.cmc[0] - mean_cmc[0]).powi(2)).sum::<f64>() / n).sqrt();
    Ok(CMCResult {
        tap: features.tap,
        ks: protocol.ks.clone(),
        identities: by_id.len(),
        mean_cmc,
        mean_map: splits.iter().map(|s| s.map).sum::<f64>() / n,
        rank1_sd,
        splits,
        warnings: features.warnings.clone(),
    })
}

/// Extracts held-out features once and scores every split of `protocol`.
pub fn run_protocol(model: &mut Model<f32>, corpus: &Corpus, protocol: &EvalProtocol, tap: FeatureTap) -> Result<CMCResult> {
    let test = corpus.manifest.test_indices();
    if test.is_empty() {
        return Err(Error::Protocol("corpus has no held-out samples".into()));
    }
    if let Some(&s) = test.iter().find(|&&s| corpus.manifest.label(s) < model.num_identities()) {
        return Err(Error::Protocol(format!(
            "held-out sample {s} carries a training label; evaluation identities must be unseen"
        )));
    }
    let features = extract_features(model, corpus, &test, tap, 64)?;
    score_protocol(&features, &test, protocol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_four_five() {
        let q = FeatureSet::new(2, vec![0.0, 0.0], vec![0], FeatureTap::PreFn).unwrap();
        let g = FeatureSet::new(2, vec![3.0, 4.0], vec![0], FeatureTap::PreFn).unwrap();
        assert_eq!(pairwise_euclidean(&q, &g).unwrap(), vec![5.0]);
    }

    #[test]
    fn hand_counted_cmc() {
        // probe 0 matches gallery 0 (nearest); probe 1 matches gallery 2, ranked third
        let d = vec![0.1, 0.5, 0.9, 0.2, 0.3, 0.4];
        let cmc = cmc_curve(&d, &[7, 9], &[7, 8, 9], &[1, 5]).unwrap();
        assert_eq!(cmc, vec![0.5, 1.0]);
    }

    #[test]
    fn textbook_ap() {
        let d = vec![0.1, 0.2, 0.3, 0.4];
        assert_eq!(mean_ap(&d, &[1], &[0, 1, 2, 3]).unwrap(), 0.5);
    }

    #[test]
    fn ties_go_to_lower_index() {
        let d = vec![1.0, 1.0];
        assert_eq!(cmc_curve(&d, &[5], &[5, 6], &[1]).unwrap(), vec![1.0]);
        assert_eq!(cmc_curve(&d, &[6], &[5, 6], &[1]).unwrap(), vec![0.0]);
    }

    #[test]
    fn absent_identity_is_protocol_error() {
        assert!(matches!(cmc_curve(&[0.0], &[1], &[2], &[1]), Err(Error::Protocol(_))));
    }

    #[test]
    fn feature_file_round_trip() {
        let mut fs = FeatureSet::new(3, vec![1.0, -2.0, 0.5, 4.0, 0.0, 1e-7], vec![3, 8], FeatureTap::PostFn).unwrap();
        fs.fingerprint = "abc".into();
        fs.warnings.push("w".into());
        assert_eq!(FeatureSet::from_bytes(&fs.to_bytes()).unwrap(), fs);
    }
}
