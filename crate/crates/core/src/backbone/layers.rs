use std::hash::Hasher;

use rand::Rng;

use crate::error::{Error, Result};
use crate::norm::{BatchNorm2d, InstanceNorm2d, NormParams, NormStats};
use crate::tensor::{conv2d_backward, conv2d_forward, relu6_backward, relu6_forward, ConvKind, Mode, Param, Scalar, Tensor};

/// Receives every piece of persistent state, in a fixed order.
pub trait StateVisitor<T> {
    fn param(&mut self, name: &str, param: &mut Param<T>);
    fn stats(&mut self, name: &str, stats: &mut NormStats<T>);
}

pub(crate) fn visit_norm<T: Scalar>(
    prefix: &str,
    params: &mut NormParams<T>,
    stats: Option<&mut NormStats<T>>,
    v: &mut dyn StateVisitor<T>,
) {
    v.param(&format!("{prefix}.gamma"), &mut params.gamma);
    v.param(&format!("{prefix}.beta"), &mut params.beta);
    if let Some(s) = stats {
        v.stats(&format!("{prefix}.stats"), s);
    }
}

#[derive(Clone, Debug)]
pub struct Conv<T> {
    pub weight: Param<T>,
    pub kind: ConvKind,
    pub stride: usize,
    saved: Option<Tensor<T>>,
}

impl<T: Scalar> Conv<T> {
    pub fn new<R: Rng>(kind: ConvKind, cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        Conv {
            weight: Param::kaiming(kind.weight_shape(cin, cout), kind.fan_in(cin), rng),
            kind,
            stride,
            saved: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    pub fn forward(&mut self, x: Tensor<T>) -> Result<Tensor<T>> {
        let y = conv2d_forward(&x, &self.weight.value, self.stride, self.kind)?;
        self.saved = Some(x);
        Ok(y)
    }

    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d_backward(g, self.saved.as_ref(), &mut self.weight, self.stride, self.kind)
    }

    fn describe(&self) -> String {
        let s = self.weight.shape();
        match self.kind {
            ConvKind::Standard3x3 => format!("conv3x3({}->{},s{})", s.c, s.n, self.stride),
            ConvKind::Pointwise1x1 => format!("conv1x1({}->{},s{})", s.c, s.n, self.stride),
            ConvKind::Depthwise3x3 => format!("dwconv3x3({},s{})", s.n, self.stride),
        }
    }
}

/// Convolution, batch norm, and an optional ReLU6.
#[derive(Clone, Debug)]
pub struct ConvBn<T> {
    pub conv: Conv<T>,
    pub bn: BatchNorm2d<T>,
    pub activation: bool,
    pre_act: Option<Tensor<T>>,
}

impl<T: Scalar> ConvBn<T> {
    pub fn new(conv: Conv<T>, activation: bool) -> Self {
        let bn = BatchNorm2d::new(conv.out_channels());
        ConvBn { conv, bn, activation, pre_act: None }
    }

    pub fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.conv.forward(x)?;
        let y = self.bn.forward(&y, mode)?;
        if self.activation {
            let out = relu6_forward(&y);
            self.pre_act = Some(y);
            Ok(out)
        } else {
            Ok(y)
        }
    }

    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let g = if self.activation {
            let pre = self
                .pre_act
                .as_ref()
                .ok_or_else(|| Error::State("relu6 backward before forward".into()))?;
            relu6_backward(g, pre)?
        } else {
            g.clone()
        };
        let g = self.bn.backward(&g)?;
        self.conv.backward(&g)
    }

    /// Feeds which piece of ReLU6 (below 0, linear, above 6) each unit of the
    /// last forward landed on into `h`.
    pub fn hash_relu6_pieces(&self, h: &mut impl Hasher) {
        if let Some(pre) = &self.pre_act {
            let six = T::from_f64(6.0);
            for &v in pre.data() {
                h.write_u8(if v <= T::zero() { 0 } else if v >= six { 2 } else { 1 });
            }
        }
    }

    pub fn visit(&mut self, prefix: &str, v: &mut dyn StateVisitor<T>) {
        v.param(&format!("{prefix}.conv.weight"), &mut self.conv.weight);
        visit_norm(&format!("{prefix}.bn"), &mut self.bn.params, Some(&mut self.bn.stats), v);
    }

    pub fn describe(&self, prefix: &str, out: &mut Vec<String>) {
        out.push(format!("{prefix}.{}", self.conv.describe()));
        out.push(format!("{prefix}.bn({})", self.bn.channels()));
        if self.activation {
            out.push(format!("{prefix}.relu6"));
        }
    }
}

/// `Conv1`: standard 3×3 convolution + BN + ReLU6, then IN when enabled.
#[derive(Clone, Debug)]
pub struct Stem<T> {
    pub body: ConvBn<T>,
    pub instance_norm: Option<InstanceNorm2d<T>>,
}

impl<T: Scalar> Stem<T> {
    pub fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.body.forward(x, mode)?;
        match self.instance_norm.as_mut() {
            Some(inn) => inn.forward(&y),
            None => Ok(y),
        }
    }

    /// Output of `Conv1` before its instance norm.
    pub fn forward_pre_norm(&mut self, x: Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.body.forward(x, mode)
    }

    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let g = match self.instance_norm.as_mut() {
            Some(inn) => inn.backward(g)?,
            None => g.clone(),
        };
        self.body.backward(&g)
    }

    pub fn visit(&mut self, prefix: &str, v: &mut dyn StateVisitor<T>) {
        self.body.visit(prefix, v);
        if let Some(p) = self.instance_norm.as_mut().and_then(|i| i.params.as_mut()) {
            visit_norm(&format!("{prefix}.in"), p, None, v);
        }
    }

    pub fn describe(&self, prefix: &str, out: &mut Vec<String>) {
        self.body.describe(prefix, out);
        if let Some(inn) = &self.instance_norm {
            out.push(format!("{prefix}.in({})", inn.channels()));
        }
    }
}

/// Inverted residual: 1×1 expand, 3×3 depthwise, 1×1 linear projection,
/// shortcut at stride 1 with equal widths, then IN on the block output when enabled.
#[derive(Clone, Debug)]
pub struct Bottleneck<T> {
    /// 1-based group index (`Conv2` = 2).
    pub group: usize,
    pub expand: Option<ConvBn<T>>,
    pub depthwise: ConvBn<T>,
    pub project: ConvBn<T>,
    pub residual: bool,
    pub instance_norm: Option<InstanceNorm2d<T>>,
}

impl<T: Scalar> Bottleneck<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        group: usize,
        cin: usize,
        cout: usize,
        expansion: usize,
        stride: usize,
        instance_norm: bool,
        in_affine: bool,
        rng: &mut R,
    ) -> Self {
        let hidden = cin * expansion;
        let expand = (expansion != 1)
            .then(|| ConvBn::new(Conv::new(ConvKind::Pointwise1x1, cin, hidden, 1, rng), true));
        let depthwise = ConvBn::new(Conv::new(ConvKind::Depthwise3x3, hidden, hidden, stride, rng), true);
        let project = ConvBn::new(Conv::new(ConvKind::Pointwise1x1, hidden, cout, 1, rng), false);
        Bottleneck {
            group,
            expand,
            depthwise,
            project,
            residual: stride == 1 && cin == cout,
            instance_norm: instance_norm.then(|| InstanceNorm2d::new(cout, in_affine)),
        }
    }

    pub fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let skip = self.residual.then(|| x.clone());
        let h = match self.expand.as_mut() {
            Some(e) => e.forward(x, mode)?,
            None => x,
        };
        let h = self.depthwise.forward(h, mode)?;
        let mut h = self.project.forward(h, mode)?;
        if let Some(s) = skip {
            h.add_assign(&s)?;
        }
        match self.instance_norm.as_mut() {
            Some(inn) => inn.forward(&h),
            None => Ok(h),
        }
    }

    pub fn conv_bns(&self) -> impl Iterator<Item = &ConvBn<T>> {
        self.expand.iter().chain([&self.depthwise, &self.project])
    }

    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let g = match self.instance_norm.as_mut() {
            Some(inn) => inn.backward(g)?,
            None => g.clone(),
        };
        let h = self.project.backward(&g)?;
        let h = self.depthwise.backward(&h)?;
        let mut h = match self.expand.as_mut() {
            Some(e) => e.backward(&h)?,
            None => h,
        };
        if self.residual {
            h.add_assign(&g)?;
        }
        Ok(h)
    }

    pub fn visit(&mut self, prefix: &str, v: &mut dyn StateVisitor<T>) {
        if let Some(e) = self.expand.as_mut() {
            e.visit(&format!("{prefix}.expand"), v);
        }
        self.depthwise.visit(&format!("{prefix}.dw"), v);
        self.project.visit(&format!("{prefix}.project"), v);
        if let Some(p) = self.instance_norm.as_mut().and_then(|i| i.params.as_mut()) {
            visit_norm(&format!("{prefix}.in"), p, None, v);
        }
    }

    pub fn describe(&self, prefix: &str, out: &mut Vec<String>) {
        if let Some(e) = &self.expand {
            e.describe(&format!("{prefix}.expand"), out);
        }
        self.depthwise.describe(&format!("{prefix}.dw"), out);
        self.project.describe(&format!("{prefix}.project"), out);
        if self.residual {
            out.push(format!("{prefix}.residual"));
        }
        if let Some(inn) = &self.instance_norm {
            out.push(format!("{prefix}.in({})", inn.channels()));
        }
    }
}
