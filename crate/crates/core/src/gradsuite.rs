//! Finite-difference checks for every differentiable layer, in `f64`.
//!
//! Each per-layer check reduces the op output to a scalar with a fixed random
//! projection `L = Σ r ⊙ y`, so the analytic side is the op's backward pass
//! fed with `grad_out = r`. Inputs are drawn uniformly from `[-1, 1]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{build_model, BackboneConfig, InRange};
use crate::error::Result;
use crate::synthdata::{render_content, IdentitySpec, ImageSize, SampleDraw};
use crate::norm::{BatchNorm2d, FeatureNorm, InstanceNorm2d};
use crate::tensor::gradcheck::{grad_check, grad_check_piecewise, GradCheckOptions, GradCheckReport};
use crate::tensor::{
    conv2d_backward, conv2d_forward, global_avg_pool_backward, global_avg_pool_forward,
    linear_nobias_backward, linear_nobias_forward, relu6_backward, relu6_forward, ConvKind, Mode,
    Param, Shape, Tensor,
};
use crate::trainer::label_smooth_ce_loss;

pub const LAYER_TOLERANCE: f64 = 1e-4;
pub const LINEAR_TOLERANCE: f64 = 1e-6;
pub const LOSS_TOLERANCE: f64 = 1e-6;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
/// With 2-sample batch statistics the initialised model is strongly curved
/// (truncation error of a plain 1e-5 central difference reaches 20%), so the
/// end-to-end check extrapolates differences at this step and half of it.
pub const END_TO_END_STEP: f64 = 2e-6;
/// Gradients that are exactly zero (a bias feeding straight into a
/// normalization) come out of the difference as roundoff near 1e-8; this
/// floor makes the bound `|a - n| < 1e-3·max(|a|, |n|) + 1e-5`.
pub const END_TO_END_FLOOR: f64 = 1e-2;
/// Inputs of relu6 closer than this to a kink are redrawn.
pub const KINK_MARGIN: f64 = 1e-3;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn tensor(shape: Shape, data: &[f64]) -> Result<Tensor<f64>> {
    Tensor::from_vec(shape, data.to_vec())
}

fn project(y: &Tensor<f64>, r: &[f64]) -> f64 {
    y.data().iter().zip(r).map(|(a, b)| a * b).sum()
}

fn opts(tolerance: f64, seed: u64) -> GradCheckOptions {
    GradCheckOptions { seed, ..GradCheckOptions::with_tolerance(tolerance) }
}

pub fn check_conv(kind: ConvKind, stride: usize, seed: u64) -> Result<GradCheckReport> {
    let (cin, cout) = if kind == ConvKind::Depthwise3x3 { (3, 3) } else { (3, 4) };
    let xs = Shape::new(2, cin, 5, 4);
    let ws = kind.weight_shape(cin, cout);
    let mut g = rng(seed);
    let vars = vec![uniform(&mut g, xs.len()), uniform(&mut g, ws.len())];
    let probe = conv2d_forward(&tensor(xs, &vars[0])?, &tensor(ws, &vars[1])?, stride, kind)?;
    let r = uniform(&mut g, probe.len());
    let rs = probe.shape();
    grad_check(
        &format!("conv2d {kind:?} stride {stride}"),
        &vars,
        |v| Ok(project(&conv2d_forward(&tensor(xs, &v[0])?, &tensor(ws, &v[1])?, stride, kind)?, &r)),
        |v| {
            let x = tensor(xs, &v[0])?;
            let mut w = Param::new(tensor(ws, &v[1])?);
            let gx = conv2d_backward(&tensor(rs, &r)?, Some(&x), &mut w, stride, kind)?;
            Ok(vec![gx.into_vec(), w.grad.into_vec()])
        },
        &opts(LAYER_TOLERANCE, seed),
    )
}

pub fn check_relu6(seed: u64) -> Result<GradCheckReport> {
    let xs = Shape::new(2, 3, 4, 4);
    let mut g = rng(seed);
    // Spread over [-1, 7] so that both kinks are exercised from either side.
    let x: Vec<f64> = (0..xs.len())
        .map(|_| loop {
            let v: f64 = g.gen_range(-1.0..7.0);
            if v.abs() > KINK_MARGIN && (v - 6.0).abs() > KINK_MARGIN {
                break v;
            }
        })
        .collect();
    let r = uniform(&mut g, xs.len());
    grad_check(
        "relu6",
        &[x],
        |v| Ok(project(&relu6_forward(&tensor(xs, &v[0])?), &r)),
        |v| Ok(vec![relu6_backward(&tensor(xs, &r)?, &tensor(xs, &v[0])?)?.into_vec()]),
        &opts(LAYER_TOLERANCE, seed),
    )
}

pub fn check_global_avg_pool(seed: u64) -> Result<GradCheckReport> {
    let xs = Shape::new(2, 3, 3, 2);
    let mut g = rng(seed);
    let x = uniform(&mut g, xs.len());
    let r = uniform(&mut g, 6);
    grad_check(
        "global average pool",
        &[x],
        |v| Ok(project(&global_avg_pool_forward(&tensor(xs, &v[0])?)?, &r)),
        |_| Ok(vec![global_avg_pool_backward(&tensor(Shape::new(2, 3, 1, 1), &r)?, xs)?.into_vec()]),
        &opts(LAYER_TOLERANCE, seed),
    )
}

/// 3×4 input against a 5×4 weight.
pub fn check_linear(seed: u64) -> Result<GradCheckReport> {
    let (xs, ws) = (Shape::new(3, 4, 1, 1), Shape::new(5, 4, 1, 1));
    let mut g = rng(seed);
    let vars = vec![uniform(&mut g, xs.len()), uniform(&mut g, ws.len())];
    let r = uniform(&mut g, 15);
    grad_check(
        "linear",
        &vars,
        |v| Ok(project(&linear_nobias_forward(&tensor(xs, &v[0])?, &tensor(ws, &v[1])?)?, &r)),
        |v| {
            let mut w = Param::new(tensor(ws, &v[1])?);
            let gx = linear_nobias_backward(&tensor(Shape::new(3, 5, 1, 1), &r)?, &tensor(xs, &v[0])?, &mut w)?;
            Ok(vec![gx.into_vec(), w.grad.into_vec()])
        },
        &opts(LINEAR_TOLERANCE, seed),
    )
}

/// Train-mode batch norm over (input, γ, β).
pub fn check_batch_norm(seed: u64) -> Result<GradCheckReport> {
    let xs = Shape::new(4, 3, 2, 2);
    let mut g = rng(seed);
    let vars = vec![uniform(&mut g, xs.len()), uniform(&mut g, 3), uniform(&mut g, 3)];
    let r = uniform(&mut g, xs.len());
    let layer = |v: &[Vec<f64>]| -> Result<BatchNorm2d<f64>> {
        let mut bn = BatchNorm2d::new(3);
        bn.params.gamma.value = tensor(Shape::new(1, 3, 1, 1), &v[1])?;
        bn.params.beta.value = tensor(Shape::new(1, 3, 1, 1), &v[2])?;
        Ok(bn)
    };
    grad_check(
        "batch norm",
        &vars,
        |v| Ok(project(&layer(v)?.forward(&tensor(xs, &v[0])?, Mode::Train)?, &r)),
        |v| {
            let mut bn = layer(v)?;
            bn.forward(&tensor(xs, &v[0])?, Mode::Train)?;
            let gx = bn.backward(&tensor(xs, &r)?)?;
            Ok(vec![gx.into_vec(), bn.params.gamma.grad.into_vec(), bn.params.beta.grad.into_vec()])
        },
        &opts(LAYER_TOLERANCE, seed),
    )
}

/// Affine instance norm over (input, γ, β).
pub fn check_instance_norm(seed: u64) -> Result<GradCheckReport> {
    let xs = Shape::new(2, 3, 3, 3);
    let mut g = rng(seed);
    let vars = vec![uniform(&mut g, xs.len()), uniform(&mut g, 3), uniform(&mut g, 3)];
    let r = uniform(&mut g, xs.len());
    let layer = |v: &[Vec<f64>]| -> Result<InstanceNorm2d<f64>> {
        let mut inorm = InstanceNorm2d::new(3, true);
        if let Some(p) = inorm.params.as_mut() {
            p.gamma.value = tensor(Shape::new(1, 3, 1, 1), &v[1])?;
            p.beta.value = tensor(Shape::new(1, 3, 1, 1), &v[2])?;
        }
        Ok(inorm)
    };
    grad_check(
        "instance norm",
        &vars,
        |v| Ok(project(&layer(v)?.forward(&tensor(xs, &v[0])?)?, &r)),
        |v| {
            let mut inorm = layer(v)?;
            inorm.forward(&tensor(xs, &v[0])?)?;
            let gx = inorm.backward(&tensor(xs, &r)?)?;
            let p = inorm.params.expect("affine instance norm");
            Ok(vec![gx.into_vec(), p.gamma.grad.into_vec(), p.beta.grad.into_vec()])
        },
        &opts(LAYER_TOLERANCE, seed),
    )
}

/// Train-mode feature norm over (input, γ); the pinned β is not a variable.
pub fn check_feature_norm(seed: u64) -> Result<GradCheckReport> {
    let xs = Shape::new(4, 5, 1, 1);
    let mut g = rng(seed);
    let vars = vec![uniform(&mut g, xs.len()), uniform(&mut g, 5)];
    let r = uniform(&mut g, xs.len());
    let layer = |v: &[Vec<f64>]| -> Result<FeatureNorm<f64>> {
        let mut fnorm = FeatureNorm::new(5);
        fnorm.params_mut().gamma.value = tensor(Shape::new(1, 5, 1, 1), &v[1])?;
        Ok(fnorm)
    };
    grad_check(
        "feature norm",
        &vars,
        |v| Ok(project(&layer(v)?.forward(&tensor(xs, &v[0])?, Mode::Train)?, &r)),
        |v| {
            let mut fnorm = layer(v)?;
            fnorm.forward(&tensor(xs, &v[0])?, Mode::Train)?;
            let gx = fnorm.backward(&tensor(xs, &r)?)?;
            Ok(vec![gx.into_vec(), fnorm.params().gamma.grad.data().to_vec()])
        },
        &opts(LAYER_TOLERANCE, seed),
    )
}

/// Label-smoothed cross-entropy (eps 0.1) on 3×6 logits.
pub fn check_ce_loss(seed: u64) -> Result<GradCheckReport> {
    let zs = Shape::new(3, 6, 1, 1);
    let mut g = rng(seed);
    let z: Vec<f64> = (0..zs.len()).map(|_| g.gen_range(-3.0..3.0)).collect();
    let labels: Vec<usize> = (0..3).map(|_| g.gen_range(0..6)).collect();
    grad_check(
        "label-smoothed cross-entropy",
        &[z],
        |v| Ok(label_smooth_ce_loss(&tensor(zs, &v[0])?, &labels, 0.1)?.0),
        |v| Ok(vec![label_smooth_ce_loss(&tensor(zs, &v[0])?, &labels, 0.1)?.1.into_vec()]),
        &opts(LOSS_TOLERANCE, seed),
    )
}

/// Smoothed cross-entropy through the whole desk model (IN 1-6, feature norm
/// on) on a 2-sample batch. The input and up to `coords_per_param`
/// coordinates of every trainable tensor are checked; a coordinate whose step
/// moves any ReLU6 unit across a kink is excluded and counted.
pub fn check_end_to_end(seed: u64, coords_per_param: usize) -> Result<GradCheckReport> {
    let config = BackboneConfig::desk(5).with_in_range(InRange::new(1, 6)).with_feature_norm(true);
    let options = GradCheckOptions {
        step: END_TO_END_STEP,
        floor: END_TO_END_FLOOR,
        max_coords: Some(coords_per_param),
        richardson: true,
        ..opts(END_TO_END_TOLERANCE, seed)
    };
    check_model(&config, seed, &options)
}

/// [`check_end_to_end`] for any configuration and options.
pub fn check_model(config: &BackboneConfig, seed: u64, options: &GradCheckOptions) -> Result<GradCheckReport> {
    let ids = config.num_identities;
    let mut model = build_model::<f64>(config, seed)?;
    let xs = Shape::new(2, 3, config.input_height, config.input_width);
    let mut g = rng(seed);
    let labels = [g.gen_range(0..ids), g.gen_range(0..ids)];

    // Two rendered figures: on pure noise the pooled features of both samples
    // nearly coincide and the 2-sample feature norm sits at its most curved point.
    let size = ImageSize { height: config.input_height, width: config.input_width };
    let mut images = Vec::with_capacity(xs.len());
    for id in 0..2 {
        let spec = IdentitySpec::random(id, &mut g);
        images.extend(render_content(&spec, &SampleDraw::neutral(), size));
    }
    let mut vars = vec![images];
    model.for_each_param(|_, p| {
        if !p.frozen {
            vars.push(p.value.data().to_vec());
        }
    });
    let load = |model: &mut crate::backbone::Model<f64>, v: &[Vec<f64>]| {
        let mut i = 1;
        model.for_each_param(|_, p| {
            if !p.frozen {
                p.value.data_mut().copy_from_slice(&v[i]);
                i += 1;
            }
        });
    };
    let mut loss_model = model.clone();
    grad_check_piecewise(
        "desk model end to end",
        &vars,
        |v| {
            load(&mut loss_model, v);
            let logits = loss_model.forward_logits(&tensor(xs, &v[0])?, Mode::Train)?;
            Ok((label_smooth_ce_loss(&logits, &labels, 0.1)?.0, loss_model.relu6_signature()))
        },
        |v| {
            load(&mut model, v);
            model.zero_grad();
            let logits = model.forward_logits(&tensor(xs, &v[0])?, Mode::Train)?;
            let (_, grad) = label_smooth_ce_loss(&logits, &labels, 0.1)?;
            let gx = model.backward(&grad)?;
            let mut out = vec![gx.into_vec()];
            model.for_each_param(|_, p| {
                if !p.frozen {
                    out.push(p.grad.data().to_vec());
                }
            });
            Ok(out)
        },
        options,
    )
}

/// Every per-layer check for one seed, in a fixed order.
pub fn layer_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut out = Vec::new();
    for kind in [ConvKind::Standard3x3, ConvKind::Pointwise1x1, ConvKind::Depthwise3x3] {
        for stride in [1, 2] {
            out.push(check_conv(kind, stride, seed)?);
        }
    }
    out.push(check_relu6(seed)?);
    out.push(check_global_avg_pool(seed)?);
    out.push(check_linear(seed)?);
    out.push(check_batch_norm(seed)?);
    out.push(check_instance_norm(seed)?);
    out.push(check_feature_norm(seed)?);
    out.push(check_ce_loss(seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_suite_passes_one_seed() {
        for r in layer_suite(3).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }
}
