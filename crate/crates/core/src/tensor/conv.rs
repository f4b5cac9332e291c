use serde::{Deserialize, Serialize};

use super::reduce::dot;
use super::{Param, Scalar, Shape, Tensor};
use crate::error::{Error, Result};

/// The three convolution flavours an inverted-residual network needs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvKind {
    /// Dense 3×3, padding 1. Weight `Cout×Cin×3×3`.
    Standard3x3,
    /// Dense 1×1, no padding. Weight `Cout×Cin×1×1`.
    Pointwise1x1,
    /// Per-channel 3×3, padding 1. Weight `C×1×3×3`.
    Depthwise3x3,
}

impl ConvKind {
    pub fn kernel(self) -> usize {
        match self {
            ConvKind::Pointwise1x1 => 1,
            _ => 3,
        }
    }

    pub fn padding(self) -> usize {
        match self {
            ConvKind::Pointwise1x1 => 0,
            _ => 1,
        }
    }

    pub fn weight_shape(self, in_channels: usize, out_channels: usize) -> Shape {
        match self {
            ConvKind::Standard3x3 => Shape::new(out_channels, in_channels, 3, 3),
            ConvKind::Pointwise1x1 => Shape::new(out_channels, in_channels, 1, 1),
            ConvKind::Depthwise3x3 => Shape::new(in_channels, 1, 3, 3),
        }
    }

    pub fn fan_in(self, in_channels: usize) -> usize {
        match self {
            ConvKind::Standard3x3 => in_channels * 9,
            ConvKind::Pointwise1x1 => in_channels,
            ConvKind::Depthwise3x3 => 9,
        }
    }
}

pub fn conv_output_dim(input: usize, kind: ConvKind, stride: usize) -> usize {
    (input + 2 * kind.padding() - kind.kernel()) / stride + 1
}

fn output_shape(input: Shape, weight: Shape, stride: usize, kind: ConvKind) -> Result<Shape> {
    if stride != 1 && stride != 2 {
        return Err(Error::Config(format!("conv stride must be 1 or 2, got {stride}")));
    }
    let expected = match kind {
        ConvKind::Depthwise3x3 => kind.weight_shape(input.c, input.c),
        _ => kind.weight_shape(input.c, weight.n),
    };
    if weight != expected {
        return Err(Error::Config(format!(
            "{kind:?} weight shape {weight} does not fit input {input} (expected {expected})"
        )));
    }
    if input.h + 2 * kind.padding() < kind.kernel() || input.w + 2 * kind.padding() < kind.kernel() {
        return Err(Error::Config(format!("input {input} too small for {kind:?}")));
    }
    let c = match kind {
        ConvKind::Depthwise3x3 => input.c,
        _ => weight.n,
    };
    Ok(Shape::new(
        input.n,
        c,
        conv_output_dim(input.h, kind, stride),
        conv_output_dim(input.w, kind, stride),
    ))
}

/// Zero-padded, phase-split layout for 3×3 convolutions with stride 1 or 2,
/// holding the same channel of every batch item stacked vertically.
///
/// The padded input is split into `stride²` phases so that every kernel tap
/// reads one contiguous run shifted by a fixed offset, across all items at
/// once. Outputs live in a "wide" buffer with the same pitch and per-item row
/// count; positions outside an item's `oh × ow` window are scratch. Padding
/// contributes exact zeros, so sums equal the clipped sliding window.
#[derive(Clone, Copy, Debug)]
struct Layout {
    stride: usize,
    n: usize,
    ih: usize,
    iw: usize,
    oh: usize,
    ow: usize,
    /// Rows per item in each phase (and in the wide buffer).
    rows: usize,
    pitch: usize,
}

impl Layout {
    fn new(n: usize, ih: usize, iw: usize, stride: usize) -> Self {
        let rows = (ih + 2).div_ceil(stride);
        let pitch = (iw + 2).div_ceil(stride);
        let oh = (ih - 1) / stride + 1;
        let ow = (iw - 1) / stride + 1;
        Layout { stride, n, ih, iw, oh, ow, rows, pitch }
    }

    fn phase_len(self) -> usize {
        self.n * self.rows * self.pitch
    }

    fn padded_len(self) -> usize {
        self.stride * self.stride * self.phase_len()
    }

    fn wide_len(self) -> usize {
        self.phase_len()
    }

    /// Span every tap covers, ending at the last item's last output.
    fn run(self) -> usize {
        ((self.n - 1) * self.rows + self.oh - 1) * self.pitch + self.ow
    }

    fn offset(self, tap: usize) -> usize {
        let (ky, kx, s) = (tap / 3, tap % 3, self.stride);
        ((ky % s) * s + kx % s) * self.phase_len() + (ky / s) * self.pitch + kx / s
    }

    /// Position of input pixel `(y, x)` of item `b` in the padded buffer.
    fn slot(self, b: usize, y: usize, x: usize) -> usize {
        let (py, px, s) = (y + 1, x + 1, self.stride);
        ((py % s) * s + px % s) * self.phase_len() + (b * self.rows + py / s) * self.pitch + px / s
    }

    fn wide_row(self, b: usize, oy: usize) -> usize {
        (b * self.rows + oy) * self.pitch
    }

    /// Copies one item's plane into a padded buffer whose pad slots are zero.
    fn pad<T: Scalar>(self, dst: &mut [T], b: usize, src: &[T]) {
        let s = self.stride;
        for y in 0..self.ih {
            let row = &src[y * self.iw..(y + 1) * self.iw];
            for first in 0..s.min(self.iw) {
                let d = self.slot(b, y, first);
                for (o, &v) in dst[d..].iter_mut().zip(row[first..].iter().step_by(s)) {
                    *o = v;
                }
            }
        }
    }

    fn unpad<T: Scalar>(self, dst: &mut [T], b: usize, src: &[T]) {
        let s = self.stride;
        for y in 0..self.ih {
            let row = &mut dst[y * self.iw..(y + 1) * self.iw];
            for first in 0..s.min(self.iw) {
                let from = self.slot(b, y, first);
                for (o, &v) in row[first..].iter_mut().step_by(s).zip(&src[from..]) {
                    *o = v;
                }
            }
        }
    }

    /// Writes one item's output plane into the wide buffer (scratch stays zero).
    fn widen<T: Scalar>(self, dst: &mut [T], b: usize, src: &[T]) {
        for y in 0..self.oh {
            let d = self.wide_row(b, y);
            dst[d..d + self.ow].copy_from_slice(&src[y * self.ow..(y + 1) * self.ow]);
        }
    }

    fn narrow<T: Scalar>(self, dst: &mut [T], b: usize, src: &[T]) {
        for y in 0..self.oh {
            let s = self.wide_row(b, y);
            dst[y * self.ow..(y + 1) * self.ow].copy_from_slice(&src[s..s + self.ow]);
        }
    }

    /// `wide += padded ⋆ kernel`, taps in row-major order.
    fn accumulate<T: Scalar>(self, wide: &mut [T], padded: &[T], kernel: &[T]) {
        let run = self.run();
        for (tap, &k) in kernel.iter().enumerate() {
            let src = &padded[self.offset(tap)..][..run];
            for (o, &x) in wide[..run].iter_mut().zip(src) {
                *o = *o + k * x;
            }
        }
    }

    /// `grad_padded += grad_wide ⋆ᵀ kernel`.
    fn scatter<T: Scalar>(self, grad_padded: &mut [T], grad_wide: &[T], kernel: &[T]) {
        let run = self.run();
        for (tap, &k) in kernel.iter().enumerate() {
            let dst = &mut grad_padded[self.offset(tap)..][..run];
            for (d, &g) in dst.iter_mut().zip(&grad_wide[..run]) {
                *d = *d + k * g;
            }
        }
    }

    /// `acc[tap] += Σ grad_wide · padded` (scratch positions of `grad_wide` are zero).
    fn correlate<T: Scalar>(self, acc: &mut [T], grad_wide: &[T], padded: &[T]) {
        let run = self.run();
        for (tap, a) in acc.iter_mut().enumerate() {
            *a = *a + dot(&grad_wide[..run], &padded[self.offset(tap)..][..run]);
        }
    }
}

/// Batch items grouped so one channel's padded stack stays cache-sized.
fn item_chunks(s: Shape) -> impl Iterator<Item = std::ops::Range<usize>> {
    const STACK: usize = 4096;
    let per = (STACK / s.plane().max(1)).clamp(1, s.n.max(1));
    (0..s.n).step_by(per).map(move |start| start..(start + per).min(s.n))
}

/// The given items of every input channel, one padded stack per channel.
fn padded_channels<T: Scalar>(input: &Tensor<T>, items: std::ops::Range<usize>, lay: Layout) -> Vec<T> {
    let s = input.shape();
    let mut padded = vec![T::zero(); s.c * lay.padded_len()];
    for (c, dst) in padded.chunks_exact_mut(lay.padded_len()).enumerate() {
        for (local, b) in items.clone().enumerate() {
            lay.pad(dst, local, input.plane(b, c));
        }
    }
    padded
}

/// Picks every `stride`-th row and column of a plane (1×1 conv with stride 2).
fn subsample<T: Scalar>(plane: &[T], h: usize, w: usize, stride: usize, oh: usize, ow: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let row = &plane[oy * stride * w..oy * stride * w + w];
        out.extend((0..ow).map(|ox| row[ox * stride]));
    }
    debug_assert!(out.len() == oh * ow && h >= (oh - 1) * stride + 1);
    out
}

pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    kind: ConvKind,
) -> Result<Tensor<T>> {
    let is = input.shape();
    let os = output_shape(is, weight.shape(), stride, kind)?;
    input.ensure_finite("conv2d input")?;
    let mut out = Tensor::zeros(os);
    let w = weight.data();
    match kind {
        ConvKind::Standard3x3 | ConvKind::Depthwise3x3 => {
            let depthwise = kind == ConvKind::Depthwise3x3;
            for items in item_chunks(is) {
                let lay = Layout::new(items.len(), is.h, is.w, stride);
                let padded = padded_channels(input, items.clone(), lay);
                let mut acc = vec![T::zero(); lay.wide_len()];
                for co in 0..os.c {
                    acc.fill(T::zero());
                    let sources = if depthwise { co..co + 1 } else { 0..is.c };
                    for ci in sources {
                        let k = if depthwise { co * 9 } else { (co * is.c + ci) * 9 };
                        let src = &padded[ci * lay.padded_len()..][..lay.padded_len()];
                        lay.accumulate(&mut acc, src, &w[k..k + 9]);
                    }
                    for (local, b) in items.clone().enumerate() {
                        lay.narrow(out.plane_mut(b, co), local, &acc);
                    }
                }
            }
        }
        ConvKind::Pointwise1x1 if stride == 1 && os.plane() >= WIDE_PLANE => {
            let p = os.plane();
            for b in 0..is.n {
                let out_item = &mut out.data_mut()[b * os.item()..(b + 1) * os.item()];
                pointwise_rows(out_item, input.item(b), w, is.c, p);
            }
        }
        ConvKind::Pointwise1x1 => {
            let x = channel_major(input, stride, os);
            let mut y = vec![T::zero(); os.c * os.n * os.plane()];
            pointwise_rows(&mut y, &x, w, is.c, os.n * os.plane());
            item_major_into(out.data_mut(), &y, os);
        }
    }
    Ok(out)
}

/// Planes at least this large run 1×1 convs item by item; smaller ones are
/// gathered channel-major so rows span the whole batch.
const WIDE_PLANE: usize = 128;

fn transpose_weight<T: Scalar>(w: &[T], cout: usize, cin: usize) -> Vec<T> {
    let mut wt = vec![T::zero(); w.len()];
    for co in 0..cout {
        for ci in 0..cin {
            wt[ci * cout + co] = w[co * cin + ci];
        }
    }
    wt
}

/// Channel-major copy `C × (N·H'·W')` of `x`, subsampled when `stride` is 2.
fn channel_major<T: Scalar>(x: &Tensor<T>, stride: usize, out: Shape) -> Vec<T> {
    let s = x.shape();
    let p = out.plane();
    let mut v = Vec::with_capacity(s.c * s.n * p);
    for c in 0..s.c {
        for b in 0..s.n {
            if stride == 1 {
                v.extend_from_slice(x.plane(b, c));
            } else {
                v.extend(subsample(x.plane(b, c), s.h, s.w, stride, out.h, out.w));
            }
        }
    }
    v
}

/// Inverse of `channel_major` for an unstrided tensor of shape `s`.
fn item_major_into<T: Scalar>(dst: &mut [T], src: &[T], s: Shape) {
    let p = s.plane();
    for c in 0..s.c {
        for b in 0..s.n {
            let from = (c * s.n + b) * p;
            let to = (b * s.c + c) * p;
            dst[to..to + p].copy_from_slice(&src[from..from + p]);
        }
    }
}

/// `out[co] = Σ_ci w[co, ci] · x[ci]` over rows of length `p`, four output
/// rows per pass over the input. Each output sums in ascending `ci`.
fn pointwise_rows<T: Scalar>(out: &mut [T], x: &[T], w: &[T], cin: usize, p: usize) {
    let cout = out.len() / p;
    let mut co = 0;
    for block in out.chunks_mut(4 * p) {
        let rows = block.len() / p;
        if rows == 4 {
            let (r0, rest) = block.split_at_mut(p);
            let (r1, rest) = rest.split_at_mut(p);
            let (r2, r3) = rest.split_at_mut(p);
            for ci in 0..cin {
                let src = &x[ci * p..(ci + 1) * p];
                let (w0, w1, w2, w3) = (
                    w[co * cin + ci],
                    w[(co + 1) * cin + ci],
                    w[(co + 2) * cin + ci],
                    w[(co + 3) * cin + ci],
                );
                for i in 0..p {
                    let v = src[i];
                    r0[i] = r0[i] + w0 * v;
                    r1[i] = r1[i] + w1 * v;
                    r2[i] = r2[i] + w2 * v;
                    r3[i] = r3[i] + w3 * v;
                }
            }
        } else {
            for (r, row) in block.chunks_exact_mut(p).enumerate() {
                for ci in 0..cin {
                    let wv = w[(co + r) * cin + ci];
                    for (o, &v) in row.iter_mut().zip(&x[ci * p..(ci + 1) * p]) {
                        *o = *o + wv * v;
                    }
                }
            }
        }
        co += rows;
    }
    debug_assert_eq!(co, cout);
}

/// Returns the input gradient and accumulates the weight gradient into `weight.grad`.
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    saved_input: Option<&Tensor<T>>,
    weight: &mut Param<T>,
    stride: usize,
    kind: ConvKind,
) -> Result<Tensor<T>> {
    let input = saved_input
        .ok_or_else(|| Error::State("conv2d backward without a saved input".into()))?;
    let is = input.shape();
    let os = output_shape(is, weight.shape(), stride, kind)?;
    if grad_out.shape() != os {
        return Err(Error::Config(format!(
            "conv2d grad_out shape {} differs from forward output {os}",
            grad_out.shape()
        )));
    }
    let mut grad_in = Tensor::zeros(is);
    let Param { value, grad, .. } = weight;
    let w = value.data();
    let gw = grad.data_mut();
    match kind {
        ConvKind::Standard3x3 | ConvKind::Depthwise3x3 => {
            let depthwise = kind == ConvKind::Depthwise3x3;
            let kernel_of = |co: usize, ci: usize| if depthwise { co * 9 } else { (co * is.c + ci) * 9 };
            for items in item_chunks(is) {
                let lay = Layout::new(items.len(), is.h, is.w, stride);
                let padded = padded_channels(input, items.clone(), lay);
                let mut grads = vec![T::zero(); os.c * lay.wide_len()];
                for (co, dst) in grads.chunks_exact_mut(lay.wide_len()).enumerate() {
                    for (local, b) in items.clone().enumerate() {
                        lay.widen(dst, local, grad_out.plane(b, co));
                    }
                }
                let mut grad_padded = vec![T::zero(); lay.padded_len()];
                for ci in 0..is.c {
                    grad_padded.fill(T::zero());
                    let src = &padded[ci * lay.padded_len()..][..lay.padded_len()];
                    let targets = if depthwise { ci..ci + 1 } else { 0..os.c };
                    for co in targets {
                        let g = &grads[co * lay.wide_len()..][..lay.wide_len()];
                        let base = kernel_of(co, ci);
                        lay.scatter(&mut grad_padded, g, &w[base..base + 9]);
                        lay.correlate(&mut gw[base..base + 9], g, src);
                    }
                    for (local, b) in items.clone().enumerate() {
                        lay.unpad(grad_in.plane_mut(b, ci), local, &grad_padded);
                    }
                }
            }
        }
        ConvKind::Pointwise1x1 if stride == 1 && os.plane() >= WIDE_PLANE => {
            let p = os.plane();
            let wt = transpose_weight(w, os.c, is.c);
            for b in 0..is.n {
                let (x, g) = (input.item(b), grad_out.item(b));
                for co in 0..os.c {
                    let go = &g[co * p..(co + 1) * p];
                    for ci in 0..is.c {
                        let a = &mut gw[co * is.c + ci];
                        *a = *a + dot(go, &x[ci * p..(ci + 1) * p]);
                    }
                }
                let gi = &mut grad_in.data_mut()[b * is.item()..(b + 1) * is.item()];
                pointwise_rows(gi, g, &wt, os.c, p);
            }
        }
        ConvKind::Pointwise1x1 => {
            let x = channel_major(input, stride, os);
            let g = channel_major(grad_out, 1, os);
            let row = os.n * os.plane();
            for co in 0..os.c {
                let go = &g[co * row..(co + 1) * row];
                for ci in 0..is.c {
                    let a = &mut gw[co * is.c + ci];
                    *a = *a + dot(go, &x[ci * row..(ci + 1) * row]);
                }
            }
            let wt = transpose_weight(w, os.c, is.c);
            let mut gx = vec![T::zero(); is.c * row];
            pointwise_rows(&mut gx, &g, &wt, os.c, row);
            let sub_shape = Shape { c: is.c, ..os };
            if stride == 1 {
                item_major_into(grad_in.data_mut(), &gx, sub_shape);
            } else {
                let mut sub = vec![T::zero(); sub_shape.len()];
                item_major_into(&mut sub, &gx, sub_shape);
                for b in 0..is.n {
                    for ci in 0..is.c {
                        let src = &sub[(b * is.c + ci) * os.plane()..][..os.plane()];
                        let gi = grad_in.plane_mut(b, ci);
                        for oy in 0..os.h {
                            for ox in 0..os.w {
                                gi[oy * stride * is.w + ox * stride] = src[oy * os.w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(grad_in)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_dims_follow_size_formula() {
        assert_eq!(conv_output_dim(8, ConvKind::Standard3x3, 2), 4);
        assert_eq!(conv_output_dim(4, ConvKind::Standard3x3, 2), 2);
        assert_eq!(conv_output_dim(7, ConvKind::Depthwise3x3, 2), 4);
        assert_eq!(conv_output_dim(5, ConvKind::Pointwise1x1, 1), 5);
        assert_eq!(conv_output_dim(1, ConvKind::Depthwise3x3, 1), 1);
    }

    #[test]
    fn layout_offsets_stay_inside_each_item() {
        for (n, h, w, stride) in [(1, 5, 4, 2), (3, 5, 4, 2), (2, 3, 3, 1), (4, 2, 1, 1), (2, 1, 1, 2)] {
            let lay = Layout::new(n, h, w, stride);
            assert_eq!((lay.oh, lay.ow), (conv_output_dim(h, ConvKind::Depthwise3x3, stride), conv_output_dim(w, ConvKind::Depthwise3x3, stride)));
            assert!(lay.run() - 1 + lay.offset(8) < lay.padded_len());
            // output (b, 0, 0) centre tap reads input (b, 0, 0)
            for b in 0..n {
                assert_eq!(lay.wide_row(b, 0) + lay.offset(4), lay.slot(b, 0, 0));
            }
            // the bottom-right tap of an item's last output stays in that item's rows
            let last = lay.wide_row(0, lay.oh - 1) + lay.ow - 1 + lay.offset(8);
            assert!(last % lay.phase_len() < lay.rows * lay.pitch);
        }
    }

    #[test]
    fn weight_shape_mismatch_is_config_error() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 3, 4, 4));
        let w = Tensor::<f64>::zeros(Shape::new(2, 4, 3, 3));
        assert!(matches!(
            conv2d_forward(&x, &w, 1, ConvKind::Standard3x3),
            Err(Error::Config(_))
        ));
        let w = Tensor::<f64>::zeros(Shape::new(2, 3, 3, 3));
        assert!(matches!(
            conv2d_forward(&x, &w, 3, ConvKind::Standard3x3),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn non_finite_input_is_numeric_error() {
        let mut x = Tensor::<f32>::zeros(Shape::new(1, 1, 2, 2));
        x.data_mut()[3] = f32::NAN;
        let w = Tensor::full(Shape::new(1, 1, 1, 1), 1.0f32);
        assert!(matches!(
            conv2d_forward(&x, &w, 1, ConvKind::Pointwise1x1),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn missing_saved_input_is_state_error() {
        let g = Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2));
        let mut w = Param::new(Tensor::full(Shape::new(1, 1, 1, 1), 1.0));
        assert!(matches!(
            conv2d_backward(&g, None, &mut w, 1, ConvKind::Pointwise1x1),
            Err(Error::State(_))
        ));
    }
}
