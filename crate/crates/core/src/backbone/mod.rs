//! MobileNetV2-style backbone with per-group instance norm and the
//! pool → feature norm → bias-free classifier head.

mod checkpoint;
mod config;
mod layers;

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, Checkpoint, CheckpointEntry, CheckpointManifest, EntryKind};
pub use config::{BackboneConfig, BottleneckConfig, FeatureTap, InRange};
pub use layers::{Bottleneck, Conv, ConvBn, StateVisitor, Stem};

use crate::error::{Error, Result};
use crate::norm::{FeatureNorm, InstanceNorm2d, NormStats};
use crate::tensor::{
    global_avg_pool_backward, global_avg_pool_forward, linear_nobias_backward, linear_nobias_forward,
    ConvKind, Mode, Param, Scalar, Shape, Tensor,
};

/// Classifier weights start as N(0, 0.01²).
pub const CLASSIFIER_INIT_STD: f64 = 0.01;

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: BackboneConfig,
    seed: u64,
    stem: Stem<T>,
    blocks: Vec<Bottleneck<T>>,
    head: ConvBn<T>,
    pooled_from: Option<Shape>,
    feature_norm: Option<FeatureNorm<T>>,
    classifier: Param<T>,
    classifier_input: Option<Tensor<T>>,
}

fn in_layer(name: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Numeric(m) => Error::Numeric(format!("{name}: {m}")),
        Error::Protocol(m) => Error::Protocol(format!("{name}: {m}")),
        other => other,
    }
}

/// Deterministic construction: the same `(config, seed)` gives bit-identical parameters.
///
/// Instance and feature norms carry no random state, so variants that differ
/// only in where normalization sits share every convolution weight.
pub fn build_model<T: Scalar>(config: &BackboneConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stem = Stem {
        body: ConvBn::new(
            Conv::new(ConvKind::Standard3x3, 3, config.stem_channels, config.stem_stride, &mut rng),
            true,
        ),
        instance_norm: config.in_mask[0].then(|| InstanceNorm2d::new(config.stem_channels, config.in_affine)),
    };
    let mut blocks = Vec::new();
    let mut cin = config.stem_channels;
    for (gi, g) in config.groups.iter().enumerate() {
        let group = gi + 2;
        for r in 0..g.repeat {
            let stride = if r == 0 { g.stride } else { 1 };
            blocks.push(Bottleneck::new(
                group,
                cin,
                g.out_channels,
                g.expansion,
                stride,
                config.in_mask[group - 1],
                config.in_affine,
                &mut rng,
            ));
            cin = g.out_channels;
        }
    }
    let head = ConvBn::new(Conv::new(ConvKind::Pointwise1x1, cin, config.feature_dim, 1, &mut rng), true);
    let classifier = Param::new(Tensor::randn(
        Shape::new(config.num_identities, config.feature_dim, 1, 1),
        CLASSIFIER_INIT_STD,
        &mut rng,
    ));
    Ok(Model {
        config: config.clone(),
        seed,
        stem,
        blocks,
        head,
        pooled_from: None,
        feature_norm: config.feature_norm.then(|| FeatureNorm::new(config.feature_dim)),
        classifier,
        classifier_input: None,
    })
}

impl<T: Scalar> Model<T> {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn num_identities(&self) -> usize {
        self.config.num_identities
    }

    pub fn stem_mut(&mut self) -> &mut Stem<T> {
        &mut self.stem
    }

    pub fn blocks(&self) -> &[Bottleneck<T>] {
        &self.blocks
    }

    pub fn feature_norm(&self) -> Option<&FeatureNorm<T>> {
        self.feature_norm.as_ref()
    }

    pub fn feature_norm_mut(&mut self) -> Option<&mut FeatureNorm<T>> {
        self.feature_norm.as_mut()
    }

    pub fn classifier(&self) -> &Param<T> {
        &self.classifier
    }

    pub fn classifier_mut(&mut self) -> &mut Param<T> {
        &mut self.classifier
    }

    fn check_input(&self, batch: &Tensor<T>) -> Result<()> {
        let s = batch.shape();
        if s.c != 3 || s.h != self.config.input_height || s.w != self.config.input_width {
            return Err(Error::Config(format!(
                "batch {s} does not match the configured input 3x{}x{}",
                self.config.input_height, self.config.input_width
            )));
        }
        if s.n == 0 {
            return Err(Error::Config("empty batch".into()));
        }
        Ok(())
    }

    /// Global-average-pooled activations `B×feature_dim×1×1`.
    pub fn forward_pooled(&mut self, batch: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check_input(batch)?;
        let mut x = self.stem.forward(batch.clone(), mode).map_err(in_layer("g1"))?;
        x.ensure_finite("g1")?;
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let name = format!("g{}.b{i}", block.group);
            x = block.forward(x, mode).map_err(in_layer(&name))?;
            x.ensure_finite(&name)?;
        }
        let x = self.head.forward(x, mode).map_err(in_layer("head"))?;
        x.ensure_finite("head")?;
        self.pooled_from = Some(x.shape());
        global_avg_pool_forward(&x)
    }

    /// Retrieval features at `tap`.
    pub fn forward_features(&mut self, batch: &Tensor<T>, mode: Mode, tap: FeatureTap) -> Result<Tensor<T>> {
        let pooled = self.forward_pooled(batch, mode)?;
        match (tap, self.feature_norm.as_mut()) {
            (FeatureTap::PostFn, Some(fnorm)) => {
                let y = fnorm.forward(&pooled, mode).map_err(in_layer("fn"))?;
                y.ensure_finite("fn")?;
                Ok(y)
            }
            _ => Ok(pooled),
        }
    }

    /// Classifier scores `B×N×1×1`; softmax is left to the loss.
    pub fn forward_logits(&mut self, batch: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let features = self.forward_features(batch, mode, FeatureTap::PostFn)?;
        let logits = linear_nobias_forward(&features, &self.classifier.value)?;
        logits.ensure_finite("classifier")?;
        self.classifier_input = Some(features);
        Ok(logits)
    }

    /// Backpropagates from the logits of the last `forward_logits`; returns the input gradient.
    pub fn backward(&mut self, grad_logits: &Tensor<T>) -> Result<Tensor<T>> {
        let features = self
            .classifier_input
            .as_ref()
            .ok_or_else(|| Error::State("model backward before forward_logits".into()))?;
        let mut g = linear_nobias_backward(grad_logits, features, &mut self.classifier)?;
        if let Some(fnorm) = self.feature_norm.as_mut() {
            g = fnorm.backward(&g)?;
        }
        let pooled_from = self
            .pooled_from
            .ok_or_else(|| Error::State("model backward before forward".into()))?;
        g = global_avg_pool_backward(&g, pooled_from)?;
        g = self.head.backward(&g)?;
        for block in self.blocks.iter_mut().rev() {
            g = block.backward(&g)?;
        }
        self.stem.backward(&g)
    }

    /// Identifies the smooth piece of the network the last forward ran on:
    /// equal signatures mean every ReLU6 unit stayed on the same side of its kinks.
    pub fn relu6_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.stem.body.hash_relu6_pieces(&mut h);
        for block in &self.blocks {
            block.conv_bns().for_each(|c| c.hash_relu6_pieces(&mut h));
        }
        self.head.hash_relu6_pieces(&mut h);
        h.finish()
    }

    pub fn zero_grad(&mut self) {
        self.for_each_param(|_, p| p.zero_grad());
    }

    /// Every parameter and running statistic, in checkpoint order.
    pub fn visit(&mut self, v: &mut dyn StateVisitor<T>) {
        self.stem.visit("g1", v);
        let mut counts = std::collections::BTreeMap::new();
        for block in self.blocks.iter_mut() {
            let idx = counts.entry(block.group).or_insert(0usize);
            block.visit(&format!("g{}.b{}", block.group, idx), v);
            *idx += 1;
        }
        self.head.visit("head", v);
        if let Some(fnorm) = self.feature_norm.as_mut() {
            let (params, stats) = fnorm.parts_mut();
            layers::visit_norm("fn", params, Some(stats), v);
        }
        v.param("classifier.weight", &mut self.classifier);
    }

    pub fn for_each_param(&mut self, f: impl FnMut(&str, &mut Param<T>)) {
        struct P<F>(F);
        impl<T, F: FnMut(&str, &mut Param<T>)> StateVisitor<T> for P<F> {
            fn param(&mut self, name: &str, p: &mut Param<T>) {
                (self.0)(name, p)
            }
            fn stats(&mut self, _: &str, _: &mut NormStats<T>) {}
        }
        self.visit(&mut P(f));
    }

    pub fn for_each_stats(&mut self, f: impl FnMut(&str, &mut NormStats<T>)) {
        struct S<F>(F);
        impl<T, F: FnMut(&str, &mut NormStats<T>)> StateVisitor<T> for S<F> {
            fn param(&mut self, _: &str, _: &mut Param<T>) {}
            fn stats(&mut self, name: &str, s: &mut NormStats<T>) {
                (self.0)(name, s)
            }
        }
        self.visit(&mut S(f));
    }

    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.for_each_param(|_, p| n += p.value.len());
        n
    }

    /// Fewest training updates seen by any batch/feature norm.
    pub fn min_norm_updates(&mut self) -> u64 {
        let mut m = u64::MAX;
        self.for_each_stats(|_, s| m = m.min(s.updates));
        m
    }

    /// Human-readable layer list, one entry per primitive.
    pub fn layers(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.stem.describe("g1", &mut out);
        let mut counts = std::collections::BTreeMap::new();
        for block in &self.blocks {
            let idx = counts.entry(block.group).or_insert(0usize);
            block.describe(&format!("g{}.b{}", block.group, idx), &mut out);
            *idx += 1;
        }
        self.head.describe("head", &mut out);
        out.push("gap".into());
        if self.feature_norm.is_some() {
            out.push(format!("fn({}, beta=0)", self.config.feature_dim));
        }
        out.push(format!("fc({}->{}, no bias)", self.config.feature_dim, self.config.num_identities));
        out
    }

    /// Same architecture and state in another precision.
    pub fn cast<U: Scalar>(&mut self) -> Result<Model<U>> {
        let mut out = build_model::<U>(&self.config, self.seed)?;
        let mut params = Vec::new();
        let mut stats = Vec::new();
        self.for_each_param(|_, p| params.push((p.value.cast::<U>(), p.frozen)));
        self.for_each_stats(|_, s| stats.push(s.clone()));
        let mut pi = params.into_iter();
        out.for_each_param(|_, p| {
            let (v, frozen) = pi.next().expect("same architecture");
            p.value = v;
            p.frozen = frozen;
        });
        let mut si = stats.into_iter();
        out.for_each_stats(|_, s| {
            let src = si.next().expect("same architecture");
            s.running_mean = src.running_mean.iter().map(|v| U::from_f64(v.as_f64())).collect();
            s.running_var = src.running_var.iter().map(|v| U::from_f64(v.as_f64())).collect();
            s.momentum = src.momentum;
            s.epsilon = src.epsilon;
            s.updates = src.updates;
        });
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_model_shapes() {
        let cfg = BackboneConfig::desk(5);
        let mut m = build_model::<f32>(&cfg, 1).unwrap();
        let x = Tensor::uniform(Shape::new(2, 3, 64, 32), 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        let f = m.forward_features(&x, Mode::Eval, FeatureTap::PostFn).unwrap();
        assert_eq!(f.shape(), Shape::new(2, 128, 1, 1));
        let l = m.forward_logits(&x, Mode::Train).unwrap();
        assert_eq!(l.shape(), Shape::new(2, 5, 1, 1));
        let g = m.backward(&Tensor::full(l.shape(), 0.1)).unwrap();
        assert_eq!(g.shape(), x.shape());
    }

    #[test]
    fn wrong_input_size_rejected() {
        let mut m = build_model::<f32>(&BackboneConfig::desk(5), 1).unwrap();
        let x = Tensor::zeros(Shape::new(2, 3, 32, 32));
        assert!(matches!(m.forward_logits(&x, Mode::Eval), Err(Error::Config(_))));
    }

    #[test]
    fn single_sample_train_is_protocol_error() {
        let mut m = build_model::<f32>(&BackboneConfig::desk(5), 1).unwrap();
        let x = Tensor::zeros(Shape::new(1, 3, 64, 32));
        assert!(matches!(m.forward_logits(&x, Mode::Train), Err(Error::Protocol(_))));
    }
}
