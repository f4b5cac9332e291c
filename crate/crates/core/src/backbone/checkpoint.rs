//! Checkpoint file pair: a TOML manifest and a blob of little-endian f32 arrays
//! concatenated in manifest order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{build_model, BackboneConfig, Model};
use crate::error::{Error, Result};
use crate::fsio::{f32_from_le, sha256_hex, write_atomic};
use crate::norm::NormStats;
use crate::tensor::{Param, Scalar, Shape, Tensor};

pub const CHECKPOINT_FORMAT: &str = "dualnorm-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Param,
    RunningMean,
    RunningVar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub kind: EntryKind,
    pub shape: Vec<usize>,
    /// Offset in f32 values from the start of the blob.
    pub offset: usize,
    pub count: usize,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub frozen: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub updates: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conventions {
    pub epsilon: f64,
    pub momentum: f64,
    pub variance: String,
    pub dtype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub blob_bytes: usize,
    pub blob_sha256: String,
    pub conventions: Conventions,
    pub config: BackboneConfig,
    pub entries: Vec<CheckpointEntry>,
}

/// In-memory checkpoint; `to_files`/`from_files` move it to and from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub blob: Vec<u8>,
}

fn push_f32<T: Scalar>(blob: &mut Vec<u8>, values: &[T]) {
    for v in values {
        blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
}

impl Checkpoint {
    pub fn capture<T: Scalar>(model: &mut Model<T>) -> Checkpoint {
        struct Collect {
            blob: Vec<u8>,
            entries: Vec<CheckpointEntry>,
            offset: usize,
            conventions: Option<(f64, f64)>,
        }
        impl<T: Scalar> super::StateVisitor<T> for Collect {
            fn param(&mut self, name: &str, p: &mut Param<T>) {
                let n = p.value.len();
                push_f32(&mut self.blob, p.value.data());
                self.entries.push(CheckpointEntry {
                    name: name.to_string(),
                    kind: EntryKind::Param,
                    shape: p.shape().dims().to_vec(),
                    offset: self.offset,
                    count: n,
                    frozen: p.frozen,
                    updates: None,
                });
                self.offset += n;
            }
            fn stats(&mut self, name: &str, s: &mut NormStats<T>) {
                self.conventions.get_or_insert((s.epsilon, s.momentum));
                for (kind, values, suffix) in [
                    (EntryKind::RunningMean, &s.running_mean, "running_mean"),
                    (EntryKind::RunningVar, &s.running_var, "running_var"),
                ] {
                    push_f32(&mut self.blob, values);
                    self.entries.push(CheckpointEntry {
                        name: format!("{}.{suffix}", name.trim_end_matches(".stats")),
                        kind,
                        shape: vec![values.len()],
                        offset: self.offset,
                        count: values.len(),
                        frozen: false,
                        updates: Some(s.updates),
                    });
                    self.offset += values.len();
                }
            }
        }
        let mut c = Collect { blob: Vec::new(), entries: Vec::new(), offset: 0, conventions: None };
        model.visit(&mut c);
        let (epsilon, momentum) = c
            .conventions
            .unwrap_or((crate::norm::DEFAULT_EPSILON, crate::norm::DEFAULT_MOMENTUM));
        let sha = sha256_hex(&c.blob);
        Checkpoint {
            manifest: CheckpointManifest {
                format: CHECKPOINT_FORMAT.into(),
                version: CHECKPOINT_VERSION,
                seed: model.seed(),
                blob_bytes: c.blob.len(),
                blob_sha256: sha,
                conventions: Conventions {
                    epsilon,
                    momentum,
                    variance: "population".into(),
                    dtype: "f32-le".into(),
                },
                config: model.config().clone(),
                entries: c.entries,
            },
            blob: c.blob,
        }
    }

    /// Short content hash identifying the model state.
    pub fn fingerprint(&self) -> String {
        self.manifest.blob_sha256.chars().take(16).collect()
    }

    /// Rebuilds the model; fails without returning anything partial.
    pub fn restore<T: Scalar>(&self) -> Result<Model<T>> {
        let m = &self.manifest;
        if m.format != CHECKPOINT_FORMAT || m.version != CHECKPOINT_VERSION {
            return Err(Error::Corruption(format!("unknown checkpoint format {} v{}", m.format, m.version)));
        }
        let total: usize = m.entries.iter().map(|e| e.count).sum();
        if self.blob.len() != m.blob_bytes || self.blob.len() != total * 4 {
            return Err(Error::Corruption(format!(
                "blob has {} bytes, manifest declares {} ({} values)",
                self.blob.len(),
                m.blob_bytes,
                total
            )));
        }
        if sha256_hex(&self.blob) != m.blob_sha256 {
            return Err(Error::Corruption("checkpoint blob does not match its sha256".into()));
        }
        let values = f32_from_le(&self.blob, "checkpoint blob")?;
        let mut model = build_model::<T>(&m.config, m.seed)?;
        let expected = Checkpoint::capture(&mut model).manifest.entries;
        if expected.len() != m.entries.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} entries, its config builds {}",
                m.entries.len(),
                expected.len()
            )));
        }
        for (e, want) in m.entries.iter().zip(&expected) {
            if e.name != want.name || e.kind != want.kind || e.shape != want.shape || e.count != want.count {
                return Err(Error::Config(format!(
                    "checkpoint entry {} {:?} does not match model entry {} {:?}",
                    e.name, e.shape, want.name, want.shape
                )));
            }
            if e.offset + e.count > values.len() {
                return Err(Error::Corruption(format!("entry {} runs past the blob", e.name)));
            }
        }
        let slice = |e: &CheckpointEntry| -> Vec<T> {
            values[e.offset..e.offset + e.count].iter().map(|&v| T::from_f64(v as f64)).collect()
        };
        let mut entries = m.entries.iter();
        let mut failure = None;
        struct Load<'a, I, F> {
            entries: &'a mut I,
            slice: F,
            failure: &'a mut Option<Error>,
        }
        impl<'a, T, I, F> super::StateVisitor<T> for Load<'a, I, F>
        where
            T: Scalar,
            I: Iterator<Item = &'a CheckpointEntry>,
            F: Fn(&CheckpointEntry) -> Vec<T>,
        {
            fn param(&mut self, _: &str, p: &mut Param<T>) {
                let e = self.entries.next().expect("entry count checked");
                let d = &e.shape;
                match Tensor::from_vec(Shape::new(d[0], d[1], d[2], d[3]), (self.slice)(e)) {
                    Ok(t) => {
                        p.value = t;
                        p.frozen = e.frozen;
                    }
                    Err(err) => *self.failure = Some(err),
                }
            }
            fn stats(&mut self, _: &str, s: &mut NormStats<T>) {
                let mean = self.entries.next().expect("entry count checked");
                let var = self.entries.next().expect("entry count checked");
                s.running_mean = (self.slice)(mean);
                s.running_var = (self.slice)(var);
                s.updates = mean.updates.unwrap_or(0);
            }
        }
        model.visit(&mut Load { entries: &mut entries, slice, failure: &mut failure });
        if let Some(e) = failure {
            return Err(e);
        }
        model.for_each_stats(|_, s| {
            s.epsilon = m.conventions.epsilon;
            s.momentum = m.conventions.momentum;
        });
        Ok(model)
    }

    pub fn manifest_text(&self) -> Result<String> {
        Ok(toml::to_string(&self.manifest)?)
    }

    /// Writes `path` (manifest) and `path.with_extension("bin")` (blob) atomically.
    pub fn to_files(&self, path: &Path) -> Result<()> {
        let blob_path = blob_path(path);
        write_atomic(&blob_path, &self.blob)?;
        write_atomic(path, self.manifest_text()?.as_bytes())
    }

    pub fn from_files(path: &Path) -> Result<Checkpoint> {
        let text = fs::read_to_string(path)?;
        let manifest: CheckpointManifest =
            toml::from_str(&text).map_err(|e| Error::Corruption(format!("{}: {e}", path.display())))?;
        let blob = fs::read(blob_path(path))?;
        Ok(Checkpoint { manifest, blob })
    }
}

pub fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn save_checkpoint<T: Scalar>(model: &mut Model<T>, path: &Path) -> Result<Checkpoint> {
    let ckpt = Checkpoint::capture(model);
    ckpt.to_files(path)?;
    Ok(ckpt)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Model<T>> {
    Checkpoint::from_files(path)?.restore()
}

/// Loads and additionally requires the stored architecture to equal `expected`.
pub fn load_checkpoint_expecting<T: Scalar>(path: &Path, expected: &BackboneConfig) -> Result<Model<T>> {
    let ckpt = Checkpoint::from_files(path)?;
    if &ckpt.manifest.config != expected {
        return Err(Error::Config(format!(
            "{} was trained with a different backbone configuration",
            path.display()
        )));
    }
    ckpt.restore()
}
