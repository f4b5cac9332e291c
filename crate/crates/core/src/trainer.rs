//! Multi-source aggregation training: one classifier over the union of all
//! source identities, label-smoothed cross-entropy, SGD with momentum and a
//! single step decay.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Checkpoint, Model};
use crate::error::{Error, Result};
use crate::synthdata::{multi_source_batch_sampler, Corpus};
use crate::tensor::{Mode, Param, Scalar, Tensor};

/// Stream offset separating augmentation draws from the sampler's per-epoch streams.
const AUGMENT_STREAM: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_epoch: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub label_smoothing_eps: f64,
    /// Random flip and pad-and-crop on every training image.
    pub augment: bool,
    pub seed: u64,
}

impl TrainConfig {
    /// 30 epochs, lr 0.05 divided by 10 after epoch 20, batch 64.
    ///
    /// The desk corpus gives only ~19 steps per epoch; at lr 0.01 the model is still
    /// near chance after 20 epochs.
    pub fn desk(seed: u64) -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            lr_initial: 0.05,
            lr_decay_factor: 0.1,
            lr_decay_epoch: 20,
            momentum: 0.9,
            weight_decay: 5e-4,
            label_smoothing_eps: 0.1,
            augment: true,
            seed,
        }
    }

    /// 150 epochs at lr 0.01, divided by 10 after epoch 100.
    pub fn full_scale(seed: u64) -> Self {
        TrainConfig { epochs: 150, lr_initial: 0.01, lr_decay_epoch: 100, ..Self::desk(seed) }
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk(seed)),
            "full-scale" => Ok(Self::full_scale(seed)),
            other => Err(Error::Config(format!("unknown training preset {other:?} (expected desk or full-scale)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 for batch statistics".into()));
        }
        if !(self.lr_initial > 0.0) {
            return Err(Error::Config("lr_initial must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing_eps) {
            return Err(Error::Config("label_smoothing_eps must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) || !(self.lr_decay_factor > 0.0) {
            return Err(Error::Config("momentum must lie in [0, 1), weight_decay >= 0, decay factor > 0".into()));
        }
        Ok(())
    }

    /// Header lines naming the values that were chosen rather than given.
    pub fn assumptions(&self) -> Vec<String> {
        vec![
            format!("assumed momentum = {}", self.momentum),
            format!("assumed weight_decay = {} (not applied to norm parameters)", self.weight_decay),
            format!("assumed label_smoothing_eps = {}", self.label_smoothing_eps),
        ]
    }
}

/// Learning rate in effect during `epoch` (0-based).
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    if epoch >= config.lr_decay_epoch {
        config.lr_initial * config.lr_decay_factor
    } else {
        config.lr_initial
    }
}

/// Mean label-smoothed cross-entropy over the batch and its gradient with respect to the logits.
///
/// `loss = -(1/B) Σ_i [(1-eps)·log p(y_i|x_i) + (eps/N)·Σ_j log p(j|x_i)]`;
/// `eps = 0` is plain cross-entropy.
pub fn label_smooth_ce_loss<T: Scalar>(logits: &Tensor<T>, labels: &[usize], eps: f64) -> Result<(f64, Tensor<T>)> {
    let s = logits.shape();
    let (b, n) = (s.n, s.item());
    if labels.len() != b {
        return Err(Error::Config(format!("{} labels for {b} logit rows", labels.len())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= n) {
        return Err(Error::Config(format!("label {y} outside [0, {n})")));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(b * n);
    let scale = 1.0 / b as f64;
    for (i, &y) in labels.iter().enumerate() {
        let row: Vec<f64> = logits.item(i).iter().map(|v| v.as_f64()).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
        let mean_logp = row.iter().map(|&z| z - lse).sum::<f64>() / n as f64;
        loss -= (1.0 - eps) * (row[y] - lse) + eps * mean_logp;
        for (j, &z) in row.iter().enumerate() {
            let target = eps / n as f64 + if j == y { 1.0 - eps } else { 0.0 };
            grad.push(T::from_f64(((z - lse).exp() - target) * scale));
        }
    }
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("loss: non-finite value {loss}")));
    }
    Ok((loss * scale, Tensor::from_vec(s, grad)?))
}

/// One SGD update: `v ← momentum·v + g + wd·p`, `p ← p − lr·v`. Frozen parameters are skipped.
pub fn sgd_step<T: Scalar>(param: &mut Param<T>, velocity: &mut [T], lr: f64, momentum: f64, weight_decay: f64) {
    if param.frozen {
        return;
    }
    let (m, lr) = (T::from_f64(momentum), T::from_f64(lr));
    let wd = T::from_f64(if param.decay { weight_decay } else { 0.0 });
    let grad = param.grad.data();
    for ((p, v), &g) in param.value.data_mut().iter_mut().zip(velocity.iter_mut()).zip(grad) {
        *v = m * *v + g + wd * *p;
        *p = *p - lr * *v;
    }
}

/// Momentum buffers for every parameter of a model, in visiting order.
#[derive(Clone, Debug, Default)]
pub struct Sgd<T> {
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(model: &mut Model<T>) -> Self {
        let mut velocity = Vec::new();
        model.for_each_param(|_, p| velocity.push(vec![T::zero(); p.value.len()]));
        Sgd { velocity }
    }

    pub fn step(&mut self, model: &mut Model<T>, lr: f64, momentum: f64, weight_decay: f64) {
        let mut bufs = self.velocity.iter_mut();
        model.for_each_param(|_, p| {
            let v = bufs.next().expect("optimizer built for this model");
            sgd_step(p, v, lr, momentum, weight_decay);
        });
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Training-batch top-1 accuracy over the union label space.
    pub accuracy: f64,
    pub lr: f64,
    pub seconds: f64,
}

/// Append-only per-epoch record with a `#`-prefixed header of resolved settings.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub header: Vec<String>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub const COLUMNS: &'static str = "epoch\tloss\taccuracy\tlr\tseconds";

    pub fn push(&mut self, r: EpochRecord) {
        self.epochs.push(r);
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    /// Tab-separated text; header lines start with `# `.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for h in &self.header {
            for line in h.lines() {
                let _ = writeln!(s, "# {line}");
            }
        }
        let _ = writeln!(s, "{}", Self::COLUMNS);
        for r in &self.epochs {
            let _ = writeln!(s, "{}\t{:.6}\t{:.4}\t{}\t{:.2}", r.epoch, r.loss, r.accuracy, r.lr, r.seconds);
        }
        s
    }

    pub fn parse(text: &str) -> Result<TrainLog> {
        let mut log = TrainLog::default();
        let mut seen_columns = false;
        for (no, line) in text.lines().enumerate() {
            if let Some(h) = line.strip_prefix("# ") {
                log.header.push(h.to_string());
                continue;
            }
            if line == Self::COLUMNS {
                seen_columns = true;
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let bad = || Error::Parse(format!("train log line {}: {line:?}", no + 1));
            let f: Vec<&str> = line.split('\t').collect();
            if !seen_columns || f.len() != 5 {
                return Err(bad());
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            log.push(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad())?,
                loss: num(1)?,
                accuracy: num(2)?,
                lr: num(3)?,
                seconds: num(4)?,
            });
        }
        Ok(log)
    }
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

/// Names the first parameter whose gradient is not finite.
fn check_grads<T: Scalar>(model: &mut Model<T>) -> Result<()> {
    let mut bad = None;
    model.for_each_param(|name, p| {
        if bad.is_none() && !p.grad.is_finite() {
            bad = Some(name.to_string());
        }
    });
    match bad {
        Some(name) => Err(Error::Numeric(format!("{name}: non-finite gradient"))),
        None => Ok(()),
    }
}

/// Trains on every source-domain sample of `corpus`; see [`fit_with`].
pub fn fit(model: &mut Model<f32>, corpus: &Corpus, config: &TrainConfig) -> Result<(Checkpoint, TrainLog)> {
    fit_with(model, corpus, config, |_| {})
}

/// Runs `config.epochs` epochs and returns the final checkpoint and log.
/// `on_epoch` sees each record as soon as the epoch finishes.
///
/// The result is a function of the initial model, the corpus and `config` only.
pub fn fit_with(
    model: &mut Model<f32>,
    corpus: &Corpus,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Checkpoint, TrainLog)> {
    config.validate()?;
    let manifest = &corpus.manifest;
    if model.num_identities() != manifest.num_train_identities {
        return Err(Error::Config(format!(
            "model classifies {} identities but the corpus has {} training identities",
            model.num_identities(),
            manifest.num_train_identities
        )));
    }
    let train = manifest.train_indices();
    if train.len() < 2 {
        return Err(Error::Config("corpus has fewer than two training samples".into()));
    }
    let sampler = multi_source_batch_sampler(train, config.batch_size.min(manifest.train_indices().len()), config.seed);
    let mut opt = Sgd::new(model);
    let mut log = TrainLog { header: Vec::new(), epochs: Vec::new() };
    log.header.push(format!("train config: {}", toml::to_string(config)?.trim().replace('\n', "; ")));
    log.header.extend(config.assumptions());
    log.header.push(format!("corpus seed {} with {} training identities", manifest.seed, manifest.num_train_identities));

    for epoch in 0..config.epochs {
        let start = Instant::now();
        let lr = lr_at(epoch, config);
        let mut aug_rng = ChaCha8Rng::seed_from_u64(config.seed);
        aug_rng.set_stream(AUGMENT_STREAM + epoch as u64);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for batch in sampler.epoch(epoch as u64) {
            let x = if config.augment { corpus.augmented_batch(&batch, &mut aug_rng) } else { corpus.batch(&batch) };
            let labels = corpus.labels(&batch);
            model.zero_grad();
            let logits = model.forward_logits(&x, Mode::Train)?;
            let (loss, grad) = label_smooth_ce_loss(&logits, &labels, config.label_smoothing_eps)
                .map_err(|e| Error::Numeric(format!("epoch {epoch}: {e}")))?;
            model.backward(&grad)?;
            check_grads(model)?;
            opt.step(model, lr, config.momentum, config.weight_decay);
            loss_sum += loss * batch.len() as f64;
            correct += (0..batch.len()).filter(|&i| argmax(logits.item(i)) == labels[i]).count();
            seen += batch.len();
        }
        let record = EpochRecord {
            epoch,
            loss: loss_sum / seen as f64,
            accuracy: correct as f64 / seen as f64,
            lr,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        log.push(record);
    }
    Ok((Checkpoint::capture(model), log))
}
