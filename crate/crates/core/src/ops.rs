//! Reference layer kernels in float and quantized integer arithmetic.
//!
//! Convolutions are direct (no im2col, no Winograd) cross-correlations.
//! Work is split over `(batch, output channel)` planes with rayon; each plane
//! is owned by exactly one task and summed in a fixed order, so results are
//! bitwise identical regardless of the thread count.

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{DType, Payload, QuantParams, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Zero-filled, output size `ceil(input / stride)`. For even kernels the
    /// extra row/column of padding goes after the input.
    Same,
    /// No padding.
    Valid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: Padding,
    pub bias: Vec<f32>,
}

impl ConvSpec {
    pub fn same(in_channels: usize, out_channels: usize, k: usize, bias: Vec<f32>) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (k, k),
            stride: 1,
            padding: Padding::Same,
            bias,
        }
    }

    /// The 2x2 stride-2 transposed convolution used by up-steps.
    pub fn up2(in_channels: usize, out_channels: usize, bias: Vec<f32>) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (2, 2),
            stride: 2,
            padding: Padding::Valid,
            bias,
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels,
            self.kernel.0,
            self.kernel.1,
        ]
    }

    fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("conv channels must be positive".into()));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride == 0 {
            return Err(Error::Config(format!(
                "invalid kernel {:?} / stride {}",
                self.kernel, self.stride
            )));
        }
        if self.bias.len() != self.out_channels {
            return Err(Error::Shape(format!(
                "bias has {} entries for {} output channels",
                self.bias.len(),
                self.out_channels
            )));
        }
        Ok(())
    }

    /// Output spatial size and leading padding along one axis.
    fn axis(&self, size: usize, k: usize) -> Result<(usize, usize)> {
        match self.padding {
            Padding::Same => {
                let out = size.div_ceil(self.stride);
                let total = ((out - 1) * self.stride + k).saturating_sub(size);
                Ok((out, total / 2))
            }
            Padding::Valid => {
                if size < k {
                    return Err(Error::Shape(format!(
                        "input size {size} smaller than kernel {k}"
                    )));
                }
                Ok(((size - k) / self.stride + 1, 0))
            }
        }
    }

    /// `(out_h, out_w)` for an `in_h x in_w` input.
    pub fn output_hw(&self, in_h: usize, in_w: usize) -> Result<(usize, usize)> {
        Ok((
            self.axis(in_h, self.kernel.0)?.0,
            self.axis(in_w, self.kernel.1)?.0,
        ))
    }
}

/// Counts multiply-accumulates in the iteration space of each operator: one
/// per kernel tap per output element per input channel.
///
/// Padded taps of a convolution are included. A transposed convolution is
/// counted output-centric, as the equivalent convolution over the
/// zero-dilated input, so taps that meet an implicit zero are included too;
/// with a 2x2 stride-2 kernel that is four times the products the scatter
/// kernel actually performs.
#[derive(Debug, Default)]
pub struct MacCounter(AtomicU64);

impl MacCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

fn check_conv_inputs(x: &Tensor, w: &Tensor, spec: &ConvSpec) -> Result<(usize, usize, usize, usize)> {
    spec.validate()?;
    let (n, c, h, wd) = x.nchw()?;
    if c != spec.in_channels {
        return Err(Error::Shape(format!(
            "input has {c} channels, conv expects {}",
            spec.in_channels
        )));
    }
    if w.shape() != spec.weight_shape() {
        return Err(Error::Shape(format!(
            "weight shape {:?} does not match {:?}",
            w.shape(),
            spec.weight_shape()
        )));
    }
    Ok((n, c, h, wd))
}

/// Valid output range `[lo, hi)` for a kernel tap at offset `k - pad` along
/// an axis, given `out` outputs, stride and input size.
#[inline]
fn tap_range(out: usize, stride: usize, offset: isize, size: usize) -> (usize, usize) {
    // need 0 <= o * stride + offset < size
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) as usize).div_ceil(stride)
    };
    let hi_excl = size as isize - offset;
    let hi = if hi_excl <= 0 {
        0
    } else {
        (hi_excl as usize).div_ceil(stride).min(out)
    };
    (lo, hi.max(lo))
}

/// Generic direct convolution over one accumulator type.
#[allow(clippy::too_many_arguments)]
fn conv_planes<X, W, A>(
    x: &[X],
    w: &[W],
    spec: &ConvSpec,
    dims: (usize, usize, usize, usize),
    init: impl Fn(usize) -> A + Sync,
    mac: impl Fn(A, X, W) -> A + Sync,
    counter: Option<&MacCounter>,
) -> Result<(Vec<A>, usize, usize)>
where
    X: Copy + Sync,
    W: Copy + Sync,
    A: Copy + Send + Sync,
{
    let (n, c, h, wd) = dims;
    let (kh, kw) = spec.kernel;
    let (oh, pad_t) = spec.axis(h, kh)?;
    let (ow, pad_l) = spec.axis(wd, kw)?;
    let o = spec.out_channels;
    let s = spec.stride;
    let plane = oh * ow;
    let mut out: Vec<A> = (0..n * o)
        .flat_map(|i| std::iter::repeat_n(init(i % o), plane))
        .collect();
    out.par_chunks_mut(plane.max(1))
        .enumerate()
        .for_each(|(idx, dst)| {
            let (b, oc) = (idx / o, idx % o);
            for ic in 0..c {
                let src = &x[(b * c + ic) * h * wd..(b * c + ic + 1) * h * wd];
                let wk = &w[(oc * c + ic) * kh * kw..(oc * c + ic + 1) * kh * kw];
                for ky in 0..kh {
                    let dy = ky as isize - pad_t as isize;
                    let (y0, y1) = tap_range(oh, s, dy, h);
                    for kx in 0..kw {
                        let wv = wk[ky * kw + kx];
                        let dx = kx as isize - pad_l as isize;
                        let (x0, x1) = tap_range(ow, s, dx, wd);
                        for oy in y0..y1 {
                            let iy = (oy * s) as isize + dy;
                            let row = &src[iy as usize * wd..(iy as usize + 1) * wd];
                            let drow = &mut dst[oy * ow..(oy + 1) * ow];
                            if s == 1 {
                                let lo = (x0 as isize + dx) as usize;
                                let src_row = &row[lo..lo + (x1 - x0)];
                                for (d, &v) in drow[x0..x1].iter_mut().zip(src_row) {
                                    *d = mac(*d, v, wv);
                                }
                            } else {
                                for (ox, d) in (x0..x1).zip(&mut drow[x0..x1]) {
                                    let ix = ((ox * s) as isize + dx) as usize;
                                    *d = mac(*d, row[ix], wv);
                                }
                            }
                        }
                    }
                }
            }
        });
    if let Some(cnt) = counter {
        cnt.add((n * o * c * kh * kw * plane) as u64);
    }
    Ok((out, oh, ow))
}

/// Float cross-correlation with zero padding.
pub fn conv2d(x: &Tensor, w: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    conv2d_counted(x, w, spec, None)
}

pub fn conv2d_counted(
    x: &Tensor,
    w: &Tensor,
    spec: &ConvSpec,
    counter: Option<&MacCounter>,
) -> Result<Tensor> {
    let dims = check_conv_inputs(x, w, spec)?;
    let (xs, ws) = (x.as_f32()?, w.as_f32()?);
    let (out, oh, ow) = conv_planes(
        xs,
        ws,
        spec,
        dims,
        |oc| spec.bias[oc],
        |acc, xv, wv| acc + wv * xv,
        counter,
    )?;
    Tensor::from_f32(vec![dims.0, spec.out_channels, oh, ow], out)
}

/// Integer input/weight parameters and the accumulator scale they imply.
fn int_operands(x: &Tensor, w: &Tensor) -> Result<(Vec<i32>, QuantParams, Vec<i32>, QuantParams)> {
    let (px, pw) = match (x.quant(), w.quant()) {
        (Some(px), Some(pw)) => (*px, *pw),
        _ => {
            return Err(Error::Shape(
                "quantized kernels need integer input and weights".into(),
            ))
        }
    };
    if pw.zero_point != 0 {
        return Err(Error::Config("weights must be symmetric".into()));
    }
    let xq: Vec<i32> = x.int_values()?.into_iter().map(|q| q - px.zero_point).collect();
    Ok((xq, px, w.int_values()?, pw))
}

/// Bias in the accumulator domain, `round(bias / (s_x * s_w))`.
fn bias_to_acc(bias: &[f32], px: &QuantParams, pw: &QuantParams) -> Vec<i32> {
    let s = px.scale as f64 * pw.scale as f64;
    bias.iter()
        .map(|&b| (b as f64 / s).round_ties_even().clamp(i32::MIN as f64, i32::MAX as f64) as i32)
        .collect()
}

/// Maps i32 accumulators to the output grid with round-half-even then clamp.
/// `relu` raises the lower clamp to the output zero point.
fn requantize_acc(acc: &[i32], acc_scale: f64, out: &QuantParams, relu: bool) -> Payload {
    let m = acc_scale / out.scale as f64;
    let lo = if relu { out.zero_point.max(out.qmin()) } else { out.qmin() };
    let hi = out.qmax();
    let q = acc.iter().map(move |&a| {
        let v = (a as f64 * m).round_ties_even() + out.zero_point as f64;
        v.clamp(lo as f64, hi as f64) as i32
    });
    match out.storage_dtype() {
        DType::I8 => Payload::I8(q.map(|v| v as i8).collect()),
        _ => Payload::I32(q.collect()),
    }
}

/// Quantized convolution: integer input and symmetric integer weights,
/// 32-bit accumulation, requantized to `out`. ReLU may be fused.
pub fn conv2d_quantized(
    x: &Tensor,
    w: &Tensor,
    spec: &ConvSpec,
    out: &QuantParams,
    relu: bool,
) -> Result<Tensor> {
    conv2d_quantized_counted(x, w, spec, out, relu, None)
}

pub fn conv2d_quantized_counted(
    x: &Tensor,
    w: &Tensor,
    spec: &ConvSpec,
    out: &QuantParams,
    relu: bool,
    counter: Option<&MacCounter>,
) -> Result<Tensor> {
    let dims = check_conv_inputs(x, w, spec)?;
    let (xq, px, wq, pw) = int_operands(x, w)?;
    let bias = bias_to_acc(&spec.bias, &px, &pw);
    let (acc, oh, ow) = conv_planes(
        &xq,
        &wq,
        spec,
        dims,
        |oc| bias[oc],
        |acc, xv, wv| acc.wrapping_add(xv * wv),
        counter,
    )?;
    let data = requantize_acc(&acc, px.scale as f64 * pw.scale as f64, out, relu);
    Tensor::new(vec![dims.0, spec.out_channels, oh, ow], data, Some(*out))
}

fn check_up2(x: &Tensor, w: &Tensor, spec: &ConvSpec) -> Result<(usize, usize, usize, usize)> {
    if spec.kernel != (2, 2) || spec.stride != 2 {
        return Err(Error::Config(format!(
            "transposed conv supports only kernel 2x2 stride 2, got {:?} stride {}",
            spec.kernel, spec.stride
        )));
    }
    check_conv_inputs(x, w, spec)
}

fn tconv_planes<X, W, A>(
    x: &[X],
    w: &[W],
    spec: &ConvSpec,
    dims: (usize, usize, usize, usize),
    init: impl Fn(usize) -> A + Sync,
    mac: impl Fn(A, X, W) -> A + Sync,
    counter: Option<&MacCounter>,
) -> Vec<A>
where
    X: Copy + Sync,
    W: Copy + Sync,
    A: Copy + Send + Sync,
{
    let (n, c, h, wd) = dims;
    let o = spec.out_channels;
    let (oh, ow) = (2 * h, 2 * wd);
    let plane = oh * ow;
    let mut out: Vec<A> = (0..n * o)
        .flat_map(|i| std::iter::repeat_n(init(i % o), plane))
        .collect();
    out.par_chunks_mut(plane.max(1))
        .enumerate()
        .for_each(|(idx, dst)| {
            let (b, oc) = (idx / o, idx % o);
            for ic in 0..c {
                let src = &x[(b * c + ic) * h * wd..(b * c + ic + 1) * h * wd];
                let wk = &w[(oc * c + ic) * 4..(oc * c + ic + 1) * 4];
                for a in 0..2 {
                    for bb in 0..2 {
                        let wv = wk[a * 2 + bb];
                        for i in 0..h {
                            let drow = &mut dst[(2 * i + a) * ow..(2 * i + a + 1) * ow];
                            let srow = &src[i * wd..(i + 1) * wd];
                            for j in 0..wd {
                                drow[2 * j + bb] = mac(drow[2 * j + bb], srow[j], wv);
                            }
                        }
                    }
                }
            }
        });
    if let Some(cnt) = counter {
        cnt.add((n * o * c * 4 * (2 * h) * (2 * wd)) as u64);
    }
    out
}

/// Float 2x2 stride-2 transposed convolution. Weights are `O, I, 2, 2` and
/// `out(2i+a, 2j+b, o) = bias(o) + sum_c x(i, j, c) * w(o, c, a, b)`.
pub fn tconv2d(x: &Tensor, w: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    tconv2d_counted(x, w, spec, None)
}

pub fn tconv2d_counted(
    x: &Tensor,
    w: &Tensor,
    spec: &ConvSpec,
    counter: Option<&MacCounter>,
) -> Result<Tensor> {
    let dims = check_up2(x, w, spec)?;
    let out = tconv_planes(
        x.as_f32()?,
        w.as_f32()?,
        spec,
        dims,
        |oc| spec.bias[oc],
        |acc, xv, wv| acc + wv * xv,
        counter,
    );
    Tensor::from_f32(vec![dims.0, spec.out_channels, 2 * dims.2, 2 * dims.3], out)
}

pub fn tconv2d_quantized(
    x: &Tensor,
    w: &Tensor,
    spec: &ConvSpec,
    out: &QuantParams,
    relu: bool,
) -> Result<Tensor> {
    tconv2d_quantized_counted(x, w, spec, out, relu, None)
}

pub fn tconv2d_quantized_counted(
    x: &Tensor,
    w: &Tensor,
    spec: &ConvSpec,
    out: &QuantParams,
    relu: bool,
    counter: Option<&MacCounter>,
) -> Result<Tensor> {
    let dims = check_up2(x, w, spec)?;
    let (xq, px, wq, pw) = int_operands(x, w)?;
    let bias = bias_to_acc(&spec.bias, &px, &pw);
    let acc = tconv_planes(
        &xq,
        &wq,
        spec,
        dims,
        |oc| bias[oc],
        |acc, xv, wv| acc.wrapping_add(xv * wv),
        counter,
    );
    let data = requantize_acc(&acc, px.scale as f64 * pw.scale as f64, out, relu);
    Tensor::new(
        vec![dims.0, spec.out_channels, 2 * dims.2, 2 * dims.3],
        data,
        Some(*out),
    )
}

fn map_payload(p: &Payload, f32f: impl Fn(&[f32]) -> Vec<f32>, intf: impl Fn(&[i32]) -> Vec<i32>) -> Payload {
    match p {
        Payload::F32(v) => Payload::F32(f32f(v)),
        Payload::I8(v) => {
            let wide: Vec<i32> = v.iter().map(|&q| q as i32).collect();
            Payload::I8(intf(&wide).into_iter().map(|q| q as i8).collect())
        }
        Payload::I32(v) => Payload::I32(intf(v)),
    }
}

fn pool_plane<T: Copy + PartialOrd>(src: &[T], h: usize, w: usize, planes: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let s = &src[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            for j in 0..ow {
                let mut m = s[2 * i * w + 2 * j];
                for v in [
                    s[2 * i * w + 2 * j + 1],
                    s[(2 * i + 1) * w + 2 * j],
                    s[(2 * i + 1) * w + 2 * j + 1],
                ] {
                    if v > m {
                        m = v;
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

/// 2x2 max pooling with stride 2. Works on any dtype; quantization
/// parameters pass through unchanged.
pub fn maxpool2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.nchw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "maxpool2 needs even spatial dims, got {h}x{w}"
        )));
    }
    let data = map_payload(
        x.payload(),
        |v| pool_plane(v, h, w, n * c),
        |v| pool_plane(v, h, w, n * c),
    );
    Tensor::new(vec![n, c, h / 2, w / 2], data, x.quant().copied())
}

fn upsample_plane<T: Copy>(src: &[T], h: usize, w: usize, planes: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(planes * h * w * 4);
    for p in 0..planes {
        let s = &src[p * h * w..(p + 1) * h * w];
        for i in 0..2 * h {
            let row = &s[(i / 2) * w..(i / 2 + 1) * w];
            for &v in row {
                out.push(v);
                out.push(v);
            }
        }
    }
    out
}

/// Nearest-neighbour 2x upsampling.
pub fn nn_upsample2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.nchw()?;
    let data = map_payload(
        x.payload(),
        |v| upsample_plane(v, h, w, n * c),
        |v| upsample_plane(v, h, w, n * c),
    );
    Tensor::new(vec![n, c, 2 * h, 2 * w], data, x.quant().copied())
}

/// Concatenates along channels, `a` first. Quantized operands must share
/// their parameters (see [`requantize`]).
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (na, ca, ha, wa) = a.nchw()?;
    let (nb, cb, hb, wb) = b.nchw()?;
    if (na, ha, wa) != (nb, hb, wb) {
        return Err(Error::Shape(format!(
            "concat needs matching N,H,W: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.quant() != b.quant() {
        return Err(Error::Shape(
            "concat operands have different dtypes or quantization".into(),
        ));
    }
    fn join<T: Copy>(x: &[T], y: &[T], n: usize, xs: usize, ys: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(x.len() + y.len());
        for i in 0..n {
            out.extend_from_slice(&x[i * xs..(i + 1) * xs]);
            out.extend_from_slice(&y[i * ys..(i + 1) * ys]);
        }
        out
    }
    let (xs, ys) = (ca * ha * wa, cb * ha * wa);
    let data = match (a.payload(), b.payload()) {
        (Payload::F32(x), Payload::F32(y)) => Payload::F32(join(x, y, na, xs, ys)),
        (Payload::I8(x), Payload::I8(y)) => Payload::I8(join(x, y, na, xs, ys)),
        (Payload::I32(x), Payload::I32(y)) => Payload::I32(join(x, y, na, xs, ys)),
        _ => return Err(Error::Shape("concat operands have different dtypes".into())),
    };
    Tensor::new(vec![na, ca + cb, ha, wa], data, a.quant().copied())
}

/// Moves an integer tensor onto a new quantization grid.
pub fn requantize(x: &Tensor, to: &QuantParams) -> Result<Tensor> {
    let from = x
        .quant()
        .ok_or_else(|| Error::Shape("requantize needs an integer tensor".into()))?;
    if from == to {
        return Ok(x.clone());
    }
    let q: Vec<i32> = x
        .int_values()?
        .into_iter()
        .map(|v| to.quantize_value(from.dequantize_value(v)))
        .collect();
    let data = match to.storage_dtype() {
        DType::I8 => Payload::I8(q.into_iter().map(|v| v as i8).collect()),
        _ => Payload::I32(q),
    };
    Tensor::new(x.shape().to_vec(), data, Some(*to))
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    x.map(|v| v.max(0.0))
}

const SIGMOID_FLOOR: f32 = 5.960_464_5e-8; // 2^-24
const SIGMOID_CEIL: f32 = 1.0 - SIGMOID_FLOOR;

#[inline]
pub fn sigmoid_scalar(v: f32) -> f32 {
    (1.0 / (1.0 + (-v).exp())).clamp(SIGMOID_FLOOR, SIGMOID_CEIL)
}

/// Logistic function, saturated to the open interval `(0, 1)`.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    x.map(sigmoid_scalar)
}
