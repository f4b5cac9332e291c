//! Batch, instance and feature normalization.
//!
//! All three standardize with the population (1/n) variance and an `epsilon`
//! added under the square root:
//!
//! ```text
//! y = gamma * (x - mean) / sqrt(var + epsilon) + beta
//! ```
//!
//! * Batch norm takes mean/var per channel over `B·H·W` in training and uses
//!   exponential moving averages of them in eval mode.
//! * Instance norm takes mean/var per (item, channel) over `H·W`, in both
//!   modes. It removes any per-plane affine change `a·x + b` (`a > 0`), which
//!   is exactly what a colour cast or contrast change looks like to a feature map.
//! * Feature norm is batch norm over pooled `B×C` features with `beta` pinned
//!   to zero and never updated.

use crate::error::{Error, Result};
use crate::tensor::{Mode, Param, Scalar, Shape, Tensor};
use crate::tensor::reduce::{dot, sq_dev_f64, sum, sum_f64};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Per-channel affine `gamma`, `beta`.
#[derive(Clone, Debug)]
pub struct NormParams<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub beta_frozen: bool,
}

impl<T: Scalar> NormParams<T> {
    pub fn new(channels: usize) -> Self {
        let shape = Shape::new(1, channels, 1, 1);
        NormParams {
            gamma: Param::new(Tensor::full(shape, T::one())).no_decay(),
            beta: Param::new(Tensor::zeros(shape)).no_decay(),
            beta_frozen: false,
        }
    }

    /// `beta` fixed at zero.
    pub fn bias_free(channels: usize) -> Self {
        let shape = Shape::new(1, channels, 1, 1);
        NormParams {
            gamma: Param::new(Tensor::full(shape, T::one())).no_decay(),
            beta: Param::frozen(Tensor::zeros(shape)).no_decay(),
            beta_frozen: true,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape().c
    }
}

#[derive(Clone, Debug)]
pub struct NormStats<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub epsilon: f64,
    /// Number of training-mode updates folded into the running averages.
    pub updates: u64,
}

impl<T: Scalar> NormStats<T> {
    pub fn new(channels: usize) -> Self {
        NormStats {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: DEFAULT_MOMENTUM,
            epsilon: DEFAULT_EPSILON,
            updates: 0,
        }
    }

    fn update(&mut self, mean: &[f64], var: &[f64]) {
        let m = self.momentum;
        for (r, &v) in self.running_mean.iter_mut().zip(mean) {
            *r = T::from_f64((1.0 - m) * r.as_f64() + m * v);
        }
        for (r, &v) in self.running_var.iter_mut().zip(var) {
            *r = T::from_f64((1.0 - m) * r.as_f64() + m * v);
        }
        self.updates += 1;
    }
}

#[derive(Clone, Debug)]
struct Saved<T> {
    xhat: Tensor<T>,
    /// One entry per normalization group (channel for BN, plane for IN).
    inv_std: Vec<T>,
    mode: Mode,
}

/// Mean and population variance of a strided group, accumulated in f64.
fn moments<T: Scalar>(x: &Tensor<T>, c: usize) -> (f64, f64) {
    let s = x.shape();
    let n = (s.n * s.plane()) as f64;
    let mean = (0..s.n).map(|b| sum_f64(x.plane(b, c))).sum::<f64>() / n;
    let sq: f64 = (0..s.n).map(|b| sq_dev_f64(x.plane(b, c), mean)).sum();
    (mean, sq / n)
}

fn plane_moments<T: Scalar>(p: &[T]) -> (f64, f64) {
    let n = p.len() as f64;
    let mean = sum_f64(p) / n;
    (mean, sq_dev_f64(p, mean) / n)
}

fn check_channels<T: Scalar>(what: &str, x: &Tensor<T>, params: &NormParams<T>) -> Result<()> {
    if x.shape().c != params.channels() {
        return Err(Error::Config(format!(
            "{what} has {} channels, input {} has {}",
            params.channels(),
            x.shape(),
            x.shape().c
        )));
    }
    Ok(())
}

/// `Σ g` and `Σ g·x̂` over the planes of one normalization group.
fn group_sums<'a, T: Scalar>(planes: impl Iterator<Item = (&'a [T], &'a [T])>) -> (T, T) {
    planes.fold((T::zero(), T::zero()), |(sg, sgx), (g, xh)| (sg + sum(g), sgx + dot(g, xh)))
}

/// Input gradient of `y = γ·x̂ + β` through the standardization of a group of `n` values:
/// `dx = γ·inv_std·(g - Σg/n - x̂·Σg·x̂/n)`.
fn standardize_backward<T: Scalar>(out: &mut [T], g: &[T], xhat: &[T], k: T, mean_g: T, mean_gx: T) {
    for ((o, &gv), &x) in out.iter_mut().zip(g).zip(xhat) {
        *o = k * (gv - mean_g - x * mean_gx);
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub params: NormParams<T>,
    pub stats: NormStats<T>,
    saved: Option<Saved<T>>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self::from_parts(NormParams::new(channels), NormStats::new(channels))
    }

    pub fn from_parts(params: NormParams<T>, stats: NormStats<T>) -> Self {
        BatchNorm2d { params, stats, saved: None }
    }

    pub fn channels(&self) -> usize {
        self.params.channels()
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        check_channels("batch norm", x, &self.params)?;
        let s = x.shape();
        let eps = self.stats.epsilon;
        let (means, inv_std): (Vec<T>, Vec<T>) = match mode {
            Mode::Train => {
                if s.n < 2 {
                    return Err(Error::Protocol(format!(
                        "batch norm in train mode needs at least 2 samples, got {}",
                        s.n
                    )));
                }
                let (means, vars): (Vec<f64>, Vec<f64>) = (0..s.c).map(|c| moments(x, c)).unzip();
                self.stats.update(&means, &vars);
                means
                    .iter()
                    .zip(&vars)
                    .map(|(&m, &v)| (T::from_f64(m), T::from_f64(1.0 / (v + eps).sqrt())))
                    .unzip()
            }
            Mode::Eval => (0..s.c)
                .map(|c| {
                    let v = self.stats.running_var[c].as_f64();
                    (self.stats.running_mean[c], T::from_f64(1.0 / (v + eps).sqrt()))
                })
                .unzip(),
        };
        let (xhat, out) = standardize(x, |_, c| (means[c], inv_std[c]), Some(&self.params))?;
        self.saved = Some(Saved { xhat, inv_std, mode });
        Ok(out)
    }

    /// Full batch-coupled backward in train mode; the frozen-statistics map in eval mode.
    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let saved = self
            .saved
            .as_ref()
            .ok_or_else(|| Error::State("batch norm backward before forward".into()))?;
        let s = saved.xhat.shape();
        if grad_out.shape() != s {
            return Err(Error::Config(format!("batch norm grad {} vs {s}", grad_out.shape())));
        }
        let mut grad_in = Tensor::zeros(s);
        let n = T::from_usize(s.n * s.plane());
        for c in 0..s.c {
            let (sum_g, sum_gx) =
                group_sums((0..s.n).map(|b| (grad_out.plane(b, c), saved.xhat.plane(b, c))));
            accumulate_affine_grads(&mut self.params, c, sum_g, sum_gx);
            let k = self.params.gamma.value.data()[c] * saved.inv_std[c];
            for b in 0..s.n {
                let g = grad_out.plane(b, c);
                match saved.mode {
                    Mode::Train => standardize_backward(
                        grad_in.plane_mut(b, c),
                        g,
                        saved.xhat.plane(b, c),
                        k,
                        sum_g / n,
                        sum_gx / n,
                    ),
                    Mode::Eval => {
                        for (o, &gv) in grad_in.plane_mut(b, c).iter_mut().zip(g) {
                            *o = gv * k;
                        }
                    }
                }
            }
        }
        Ok(grad_in)
    }
}

/// `x̂ = (x - mean)·inv_std` with `(mean, inv_std)` per (item, channel), and
/// `γ·x̂ + β` when `params` is given. Returns `(x̂, output)`.
fn standardize<T: Scalar>(
    x: &Tensor<T>,
    coef: impl Fn(usize, usize) -> (T, T),
    params: Option<&NormParams<T>>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = x.shape();
    let mut xhat = Vec::with_capacity(s.len());
    let mut out = Vec::with_capacity(if params.is_some() { s.len() } else { 0 });
    for b in 0..s.n {
        for c in 0..s.c {
            let (m, is) = coef(b, c);
            let start = xhat.len();
            xhat.extend(x.plane(b, c).iter().map(|&v| (v - m) * is));
            if let Some(p) = params {
                let (g, bt) = (p.gamma.value.data()[c], p.beta.value.data()[c]);
                out.extend(xhat[start..].iter().map(|&v| g * v + bt));
            }
        }
    }
    let xhat = Tensor::from_vec(s, xhat)?;
    let out = if params.is_some() { Tensor::from_vec(s, out)? } else { xhat.clone() };
    Ok((xhat, out))
}

fn accumulate_affine_grads<T: Scalar>(params: &mut NormParams<T>, c: usize, sum_g: T, sum_gx: T) {
    let gg = params.gamma.grad.data_mut();
    gg[c] = gg[c] + sum_gx;
    let bg = params.beta.grad.data_mut();
    bg[c] = bg[c] + sum_g;
}

/// Per-sample, per-channel standardization over the spatial plane.
#[derive(Clone, Debug)]
pub struct InstanceNorm2d<T> {
    channels: usize,
    /// Learnable affine; `None` leaves the standardized output as is.
    pub params: Option<NormParams<T>>,
    pub epsilon: f64,
    saved: Option<Saved<T>>,
}

impl<T: Scalar> InstanceNorm2d<T> {
    pub fn new(channels: usize, affine: bool) -> Self {
        InstanceNorm2d {
            channels,
            params: affine.then(|| NormParams::new(channels)),
            epsilon: DEFAULT_EPSILON,
            saved: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Identical in train and eval mode.
    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.c != self.channels {
            return Err(Error::Config(format!(
                "instance norm has {} channels, input {s}",
                self.channels
            )));
        }
        if s.plane() < 2 {
            return Err(Error::Config(format!(
                "instance norm needs H·W >= 2, got a {}x{} plane",
                s.h, s.w
            )));
        }
        let (means, inv_std): (Vec<T>, Vec<T>) = (0..s.n)
            .flat_map(|b| (0..s.c).map(move |c| (b, c)))
            .map(|(b, c)| {
                let (mean, var) = plane_moments(x.plane(b, c));
                (T::from_f64(mean), T::from_f64(1.0 / (var + self.epsilon).sqrt()))
            })
            .unzip();
        let (xhat, out) = standardize(x, |b, c| (means[b * s.c + c], inv_std[b * s.c + c]), self.params.as_ref())?;
        self.saved = Some(Saved { xhat, inv_std, mode: Mode::Train });
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let saved = self
            .saved
            .as_ref()
            .ok_or_else(|| Error::State("instance norm backward before forward".into()))?;
        let s = saved.xhat.shape();
        if grad_out.shape() != s {
            return Err(Error::Config(format!("instance norm grad {} vs {s}", grad_out.shape())));
        }
        let mut grad_in = Tensor::zeros(s);
        let n = T::from_usize(s.plane());
        for b in 0..s.n {
            for c in 0..s.c {
                let (g, xh) = (grad_out.plane(b, c), saved.xhat.plane(b, c));
                let (sum_g, sum_gx) = group_sums(std::iter::once((g, xh)));
                let gamma = match self.params.as_mut() {
                    Some(p) => {
                        accumulate_affine_grads(p, c, sum_g, sum_gx);
                        p.gamma.value.data()[c]
                    }
                    None => T::one(),
                };
                let k = gamma * saved.inv_std[b * s.c + c];
                standardize_backward(grad_in.plane_mut(b, c), g, xh, k, sum_g / n, sum_gx / n);
            }
        }
        Ok(grad_in)
    }

}

/// Batch norm over pooled `B×C` features with `beta` pinned to zero.
#[derive(Clone, Debug)]
pub struct FeatureNorm<T> {
    bn: BatchNorm2d<T>,
}

impl<T: Scalar> FeatureNorm<T> {
    pub fn new(channels: usize) -> Self {
        FeatureNorm { bn: BatchNorm2d::from_parts(NormParams::bias_free(channels), NormStats::new(channels)) }
    }

    pub fn from_parts(params: NormParams<T>, stats: NormStats<T>) -> Result<Self> {
        if !params.beta_frozen || !params.beta.frozen {
            return Err(Error::Config("feature norm requires a frozen zero beta".into()));
        }
        Ok(FeatureNorm { bn: BatchNorm2d::from_parts(params, stats) })
    }

    pub fn params(&self) -> &NormParams<T> {
        &self.bn.params
    }

    pub fn params_mut(&mut self) -> &mut NormParams<T> {
        &mut self.bn.params
    }

    pub fn stats(&self) -> &NormStats<T> {
        &self.bn.stats
    }

    pub fn stats_mut(&mut self) -> &mut NormStats<T> {
        &mut self.bn.stats
    }

    pub fn parts_mut(&mut self) -> (&mut NormParams<T>, &mut NormStats<T>) {
        (&mut self.bn.params, &mut self.bn.stats)
    }

    pub fn forward(&mut self, features: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let s = features.shape();
        if s.h != 1 || s.w != 1 {
            return Err(Error::Config(format!("feature norm expects B×C×1×1 features, got {s}")));
        }
        if !self.bn.params.beta_frozen {
            return Err(Error::Config("feature norm requires a frozen zero beta".into()));
        }
        self.bn.forward(features, mode)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        self.bn.backward(grad_out)
    }
}
