//! Synthetic multi-domain person corpus.
//!
//! Each identity is a procedurally drawn figure (hair, skin, top, bottom,
//! shoes, optional stripe and bag, per-identity proportions). A sample is the
//! identity rendered under a domain's content transform (scale, aspect,
//! translation) followed by its style transform (per-channel gain, offset and
//! contrast) and sensor noise. Every per-sample parameter is recorded in the
//! manifest, so any image can be reproduced from the manifest alone.
//!
//! On disk a corpus is a directory holding `manifest.toml` and `pixels.bin`
//! (little-endian f32, sample-major, `3×H×W` per sample).

mod domain;
mod render;
mod sampler;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio::{f32_from_le, f32_le_bytes, sha256_hex, write_atomic};
use crate::tensor::Tensor;

pub use domain::{desk_held_out, desk_sources, ContentSpec, DomainSpec, SampleDraw, Span, StyleSpec};
pub use render::{apply_style, render_content, render_sample, Bag, IdentitySpec, ImageSize, Stripe, BACKGROUND};
pub use sampler::{augment, augment_with, multi_source_batch_sampler, AugmentDraw, BatchSampler, CROP_PADDING};

pub const CORPUS_FORMAT: &str = "dualnorm-corpus";
pub const CORPUS_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const PIXELS_FILE: &str = "pixels.bin";

/// Stream used for identity appearance draws; domain draws use their `rng_seed`.
const IDENTITY_STREAM: u64 = 1 << 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSplit {
    /// Labelled source-domain training data.
    Train,
    /// Held-out domain; probe and gallery are picked per evaluation split.
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityRecord {
    pub domain_id: usize,
    pub split: SampleSplit,
    pub appearance: IdentitySpec,
}

impl IdentityRecord {
    pub fn id(&self) -> usize {
        self.appearance.identity_id
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub identity: usize,
    pub domain_id: usize,
    pub split: SampleSplit,
    pub draw: SampleDraw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub train_source: usize,
    pub test: usize,
}

/// Everything needed to regenerate or interpret a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub image: ImageSize,
    /// All ranges collapsed: the no-shift control corpus.
    pub degenerate: bool,
    pub ids_per_source: usize,
    pub samples_per_id: usize,
    pub test_ids: usize,
    pub test_samples_per_id: usize,
    /// Size of the union training label space.
    pub num_train_identities: usize,
    pub blob_file: String,
    pub blob_sha256: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    pub splits: SplitSummary,
    /// Source domains, in label order.
    pub domains: Vec<DomainSpec>,
    pub held_out: DomainSpec,
    pub identities: Vec<IdentityRecord>,
    pub samples: Vec<SampleRecord>,
}

/// Generation parameters for a corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub sources: Vec<DomainSpec>,
    pub held_out: DomainSpec,
    pub ids_per_source: usize,
    pub samples_per_id: usize,
    pub test_ids: usize,
    pub test_samples_per_id: usize,
    pub image: ImageSize,
    pub degenerate: bool,
    pub seed: u64,
}

impl BenchmarkConfig {
    /// Three sources × 100 identities × 4 images; 30 unseen identities × 4 images in the held-out domain.
    pub fn desk(seed: u64) -> Self {
        BenchmarkConfig {
            sources: desk_sources(),
            held_out: desk_held_out(),
            ids_per_source: 100,
            samples_per_id: 4,
            test_ids: 30,
            test_samples_per_id: 4,
            image: ImageSize::DESK,
            degenerate: false,
            seed,
        }
    }

    /// Same sizes, but every domain (held-out included) is the neutral daylight domain
    /// with zero-width style and content ranges.
    pub fn desk_degenerate(seed: u64) -> Self {
        let base = desk_sources()[0].degenerate();
        let mut sources = Vec::new();
        for (i, d) in desk_sources().iter().enumerate() {
            sources.push(DomainSpec { domain_id: i, name: format!("{}-flat", d.name), rng_seed: d.rng_seed, ..base.clone() });
        }
        let h = desk_held_out();
        let held_out = DomainSpec { domain_id: h.domain_id, name: format!("{}-flat", h.name), rng_seed: h.rng_seed, ..base };
        BenchmarkConfig { sources, held_out, degenerate: true, ..Self::desk(seed) }
    }
}

/// A manifest together with its pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub manifest: DatasetManifest,
    pixels: Vec<f32>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Builds the corpus: identities first, then per-domain sample draws, then pixels.
pub fn generate_benchmark(cfg: &BenchmarkConfig) -> Result<Corpus> {
    let k = cfg.sources.len();
    if k == 0 {
        return Err(Error::Config("at least one source domain is required".into()));
    }
    if cfg.ids_per_source == 0 || cfg.samples_per_id == 0 {
        return Err(Error::Config("sources need at least one identity and one sample each".into()));
    }
    if cfg.test_samples_per_id < 2 && cfg.test_ids > 0 {
        return Err(Error::Config("held-out identities need at least two images (probe and gallery)".into()));
    }
    let mut warnings = Vec::new();
    if k == 1 {
        warnings.push("only one source domain: domain generalization expects several".to_string());
    }
    let n_train = k * cfg.ids_per_source;
    let mut id_rng = stream_rng(cfg.seed, IDENTITY_STREAM);
    let mut identities = Vec::with_capacity(n_train + cfg.test_ids);
    for (d, dom) in cfg.sources.iter().enumerate() {
        for j in 0..cfg.ids_per_source {
            identities.push(IdentityRecord {
                domain_id: dom.domain_id,
                split: SampleSplit::Train,
                appearance: IdentitySpec::random(d * cfg.ids_per_source + j, &mut id_rng),
            });
        }
    }
    for j in 0..cfg.test_ids {
        identities.push(IdentityRecord {
            domain_id: cfg.held_out.domain_id,
            split: SampleSplit::Test,
            appearance: IdentitySpec::random(n_train + j, &mut id_rng),
        });
    }

    let mut samples = Vec::new();
    let mut push_domain = |dom: &DomainSpec, ids: &[IdentityRecord], per_id: usize, split| {
        let mut rng = stream_rng(cfg.seed, dom.rng_seed);
        for rec in ids {
            for _ in 0..per_id {
                samples.push(SampleRecord {
                    index: samples.len(),
                    identity: rec.id(),
                    domain_id: dom.domain_id,
                    split,
                    draw: dom.draw(&mut rng),
                });
            }
        }
    };
    for (d, dom) in cfg.sources.iter().enumerate() {
        let ids = &identities[d * cfg.ids_per_source..(d + 1) * cfg.ids_per_source];
        push_domain(dom, ids, cfg.samples_per_id, SampleSplit::Train);
    }
    push_domain(&cfg.held_out, &identities[n_train..], cfg.test_samples_per_id, SampleSplit::Test);

    let mut manifest = DatasetManifest {
        format: CORPUS_FORMAT.into(),
        version: CORPUS_VERSION,
        seed: cfg.seed,
        image: cfg.image,
        degenerate: cfg.degenerate,
        ids_per_source: cfg.ids_per_source,
        samples_per_id: cfg.samples_per_id,
        test_ids: cfg.test_ids,
        test_samples_per_id: cfg.test_samples_per_id,
        num_train_identities: n_train,
        blob_file: PIXELS_FILE.into(),
        blob_sha256: String::new(),
        warnings,
        splits: SplitSummary {
            train_source: n_train * cfg.samples_per_id,
            test: cfg.test_ids * cfg.test_samples_per_id,
        },
        domains: cfg.sources.clone(),
        held_out: cfg.held_out.clone(),
        identities,
        samples,
    };
    manifest.validate()?;
    let pixels = render_all(&manifest)?;
    manifest.blob_sha256 = sha256_hex(&f32_le_bytes(pixels.iter().copied()));
    Ok(Corpus { manifest, pixels })
}

/// Renders every sample of a manifest; order and values do not depend on the thread count.
pub fn render_all(manifest: &DatasetManifest) -> Result<Vec<f32>> {
    let by_id: BTreeMap<usize, &IdentityRecord> = manifest.identities.iter().map(|r| (r.id(), r)).collect();
    let images: Vec<Vec<f32>> = manifest
        .samples
        .par_iter()
        .map(|s| {
            let dom = manifest.domain(s.domain_id).expect("validated");
            render_sample(&by_id[&s.identity].appearance, dom, &s.draw, manifest.image).into_vec()
        })
        .collect();
    Ok(images.concat())
}

impl DatasetManifest {
    pub fn domain(&self, domain_id: usize) -> Option<&DomainSpec> {
        self.domains.iter().chain(std::iter::once(&self.held_out)).find(|d| d.domain_id == domain_id)
    }

    /// Structural checks: unique ids, disjoint source label spaces, held-out identities unseen
    /// in training, samples consistent with their identities.
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Manifest(m));
        if self.format != CORPUS_FORMAT {
            return err(format!("unknown corpus format {:?}", self.format));
        }
        if self.domains.is_empty() {
            return err("no source domains".into());
        }
        let mut domain_ids = BTreeSet::new();
        for d in self.domains.iter().chain(std::iter::once(&self.held_out)) {
            if !domain_ids.insert(d.domain_id) {
                return err(format!("domain id {} used twice", d.domain_id));
            }
        }
        for d in &self.domains {
            d.validate(true, self.degenerate)?;
        }
        self.held_out.validate(false, self.degenerate)?;

        let mut owner: BTreeMap<usize, &IdentityRecord> = BTreeMap::new();
        for rec in &self.identities {
            if let Some(prev) = owner.insert(rec.id(), rec) {
                return err(format!(
                    "identity {} appears in domain {} and domain {}",
                    rec.id(),
                    prev.domain_id,
                    rec.domain_id
                ));
            }
            let expected = if rec.domain_id == self.held_out.domain_id { SampleSplit::Test } else { SampleSplit::Train };
            if rec.split != expected || self.domain(rec.domain_id).is_none() {
                return err(format!("identity {} has an inconsistent domain or split", rec.id()));
            }
        }
        let train: BTreeSet<usize> =
            self.identities.iter().filter(|r| r.split == SampleSplit::Train).map(|r| r.id()).collect();
        if train.len() != self.num_train_identities || train.iter().next_back().is_some_and(|&m| m + 1 != train.len()) {
            return err(format!(
                "training labels must be exactly 0..{}, found {} identities",
                self.num_train_identities,
                train.len()
            ));
        }
        for (i, s) in self.samples.iter().enumerate() {
            let Some(rec) = owner.get(&s.identity) else {
                return err(format!("sample {i} refers to unknown identity {}", s.identity));
            };
            if s.index != i || s.domain_id != rec.domain_id || s.split != rec.split {
                return err(format!("sample {i} disagrees with identity {}", s.identity));
            }
        }
        Ok(())
    }

    pub fn indices(&self, split: SampleSplit) -> Vec<usize> {
        self.samples.iter().filter(|s| s.split == split).map(|s| s.index).collect()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.indices(SampleSplit::Train)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.indices(SampleSplit::Test)
    }

    pub fn label(&self, sample: usize) -> usize {
        self.samples[sample].identity
    }
}

impl Corpus {
    pub fn image_len(&self) -> usize {
        self.manifest.image.pixels()
    }

    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// Pixels of one sample, `3×H×W`.
    pub fn image(&self, sample: usize) -> &[f32] {
        let n = self.image_len();
        &self.pixels[sample * n..(sample + 1) * n]
    }

    /// Stacks samples into an `N×3×H×W` batch.
    pub fn batch(&self, samples: &[usize]) -> Tensor<f32> {
        let mut data = Vec::with_capacity(samples.len() * self.image_len());
        for &s in samples {
            data.extend_from_slice(self.image(s));
        }
        Tensor::from_vec(self.manifest.image.shape(samples.len()), data).expect("batch size matches")
    }

    /// Like [`Corpus::batch`], with flip and pad-and-crop applied per image.
    pub fn augmented_batch<R: Rng>(&self, samples: &[usize], rng: &mut R) -> Tensor<f32> {
        let size = self.manifest.image;
        let mut data = Vec::with_capacity(samples.len() * self.image_len());
        for &s in samples {
            data.extend(augment(self.image(s), size, rng));
        }
        Tensor::from_vec(size.shape(samples.len()), data).expect("batch size matches")
    }

    pub fn labels(&self, samples: &[usize]) -> Vec<usize> {
        samples.iter().map(|&s| self.manifest.label(s)).collect()
    }

    /// Writes `manifest.toml` and `pixels.bin` into `dir`. An existing corpus is only
    /// replaced with `force`.
    pub fn save(&self, dir: &Path, force: bool) -> Result<()> {
        let manifest_path = dir.join(MANIFEST_FILE);
        if manifest_path.exists() && !force {
            return Err(Error::Config(format!(
                "{} already holds a corpus; pass --force to overwrite",
                dir.display()
            )));
        }
        fs::create_dir_all(dir)?;
        write_atomic(&dir.join(&self.manifest.blob_file), &f32_le_bytes(self.pixels.iter().copied()))?;
        write_atomic(&manifest_path, toml::to_string(&self.manifest)?.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Corpus> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Manifest(format!("cannot read {}: {e}", path.display())))?;
        let manifest: DatasetManifest =
            toml::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        manifest.validate()?;
        let bytes = fs::read(dir.join(&manifest.blob_file))?;
        if sha256_hex(&bytes) != manifest.blob_sha256 {
            return Err(Error::Corruption(format!("{} does not match its manifest checksum", manifest.blob_file)));
        }
        let pixels = f32_from_le(&bytes, &manifest.blob_file)?;
        if pixels.len() != manifest.samples.len() * manifest.image.pixels() {
            return Err(Error::Corruption(format!(
                "pixel blob holds {} values, manifest needs {}",
                pixels.len(),
                manifest.samples.len() * manifest.image.pixels()
            )));
        }
        Ok(Corpus { manifest, pixels })
    }
}

/// Mean and standard deviation, over images, of each image's per-channel mean.
pub fn channel_mean_stats<'a>(images: impl IntoIterator<Item = &'a [f32]>) -> ([f64; 3], [f64; 3]) {
    let per_image: Vec<[f64; 3]> = images
        .into_iter()
        .map(|img| {
            let p = img.len() / 3;
            let mut m = [0.0; 3];
            for (k, chan) in img.chunks(p).enumerate() {
                m[k] = chan.iter().map(|&v| v as f64).sum::<f64>() / p as f64;
            }
            m
        })
        .collect();
    let n = per_image.len().max(1) as f64;
    let mut mean = [0.0; 3];
    let mut sd = [0.0; 3];
    for k in 0..3 {
        mean[k] = per_image.iter().map(|m| m[k]).sum::<f64>() / n;
        sd[k] = (per_image.iter().map(|m| (m[k] - mean[k]).powi(2)).sum::<f64>() / n).sqrt();
    }
    (mean, sd)
}

/// Largest per-channel distance between the average channel means of two image sets.
pub fn style_gap<'a>(a: impl IntoIterator<Item = &'a [f32]>, b: impl IntoIterator<Item = &'a [f32]>) -> f64 {
    let (ma, _) = channel_mean_stats(a);
    let (mb, _) = channel_mean_stats(b);
    (0..3).map(|k| (ma[k] - mb[k]).abs()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> BenchmarkConfig {
        BenchmarkConfig { ids_per_source: 3, samples_per_id: 2, test_ids: 2, test_samples_per_id: 2, ..BenchmarkConfig::desk(seed) }
    }

    #[test]
    fn counts_and_labels() {
        let c = generate_benchmark(&small(1)).unwrap();
        let m = &c.manifest;
        assert_eq!(m.num_train_identities, 9);
        assert_eq!(m.train_indices().len(), 18);
        assert_eq!(m.test_indices().len(), 4);
        assert_eq!(c.pixels().len(), 22 * 3 * 64 * 32);
        assert!(m.test_indices().iter().all(|&i| m.label(i) >= 9));
        assert!(c.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn overlapping_identity_is_manifest_error() {
        let mut m = generate_benchmark(&small(2)).unwrap().manifest;
        m.identities[4].appearance.identity_id = 0;
        assert!(matches!(m.validate(), Err(Error::Manifest(_))));
    }

    #[test]
    fn test_identity_reused_in_training_is_manifest_error() {
        let mut m = generate_benchmark(&small(2)).unwrap().manifest;
        let last = m.identities.len() - 1;
        m.identities[last].appearance.identity_id = 3;
        assert!(matches!(m.validate(), Err(Error::Manifest(_))));
    }

    #[test]
    fn single_source_warns() {
        let mut cfg = small(3);
        cfg.sources.truncate(1);
        let c = generate_benchmark(&cfg).unwrap();
        assert_eq!(c.manifest.warnings.len(), 1);
    }

    #[test]
    fn rerender_reproduces_pixels() {
        let c = generate_benchmark(&small(4)).unwrap();
        assert_eq!(render_all(&c.manifest).unwrap(), c.pixels);
    }
}
