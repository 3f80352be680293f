//! N-dimensional tensors with float and narrow-integer payloads.
//!
//! Activations use the `N, C, H, W` layout and convolution weights use
//! `O, I, Kh, Kw`. Payloads are row-major and contiguous. Integer tensors
//! always carry the [`QuantParams`] needed to map them back to reals; sub-byte
//! widths (1 to 7 bits) still occupy one byte per element.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    I8,
    I32,
}

impl DType {
    pub fn size_bytes(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::I8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    I8(Vec<i8>),
    I32(Vec<i32>),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::I8(v) => v.len(),
            Payload::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            Payload::F32(_) => DType::F32,
            Payload::I8(_) => DType::I8,
            Payload::I32(_) => DType::I32,
        }
    }
}

/// Per-tensor quantization parameters.
///
/// Three integer ranges are supported:
///
/// * binary (`bits == 1`): levels `{-1, +1}`, real value `q * scale`;
/// * symmetric (weights): `[-(2^(b-1) - 1), 2^(b-1) - 1]`, zero point 0;
/// * affine (activations): `[-2^(b-1), 2^(b-1) - 1]` when signed, otherwise
///   `[0, 2^b - 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub bits: u8,
    pub scale: f32,
    pub zero_point: i32,
    pub signed: bool,
    pub symmetric: bool,
}

impl QuantParams {
    /// Signed symmetric parameters. `bits == 1` yields binary levels.
    pub fn symmetric(bits: u8, scale: f32) -> Result<Self> {
        let p = QuantParams {
            bits,
            scale,
            zero_point: 0,
            signed: true,
            symmetric: true,
        };
        p.validate()?;
        Ok(p)
    }

    /// Symmetric parameters whose largest level maps to `max_abs`.
    pub fn symmetric_for_range(bits: u8, max_abs: f32) -> Result<Self> {
        let probe = QuantParams::symmetric(bits, 1.0)?;
        let scale = if max_abs > 0.0 && max_abs.is_finite() {
            max_abs / probe.qmax() as f32
        } else {
            1.0
        };
        QuantParams::symmetric(bits, scale)
    }

    /// Affine parameters covering `[min, max]` (widened to include zero so
    /// that zero is exactly representable).
    pub fn affine_for_range(bits: u8, min: f32, max: f32, signed: bool) -> Result<Self> {
        if !(min.is_finite() && max.is_finite()) || min > max {
            return Err(Error::NumericDomain(format!(
                "invalid calibration range [{min}, {max}]"
            )));
        }
        let mut p = QuantParams {
            bits,
            scale: 1.0,
            zero_point: 0,
            signed,
            symmetric: false,
        };
        p.validate_bits()?;
        let lo = min.min(0.0) as f64;
        let hi = max.max(0.0) as f64;
        let (qmin, qmax) = (p.qmin() as f64, p.qmax() as f64);
        if hi > lo {
            let scale = (hi - lo) / (qmax - qmin);
            p.scale = scale as f32;
            let zp = (qmin - lo / scale).round_ties_even();
            p.zero_point = zp.clamp(qmin, qmax) as i32;
        } else {
            p.zero_point = if signed { 0 } else { p.qmin() };
        }
        p.validate()?;
        Ok(p)
    }

    fn validate_bits(&self) -> Result<()> {
        if !(1..=8).contains(&self.bits) {
            return Err(Error::Config(format!(
                "quantization bit-width {} outside [1, 8]",
                self.bits
            )));
        }
        if self.bits == 1 && !self.symmetric {
            return Err(Error::Config("1-bit quantization must be symmetric".into()));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_bits()?;
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::NumericDomain(format!(
                "quantization scale must be positive and finite, got {}",
                self.scale
            )));
        }
        if self.symmetric && (!self.signed || self.zero_point != 0) {
            return Err(Error::Config(
                "symmetric quantization must be signed with zero point 0".into(),
            ));
        }
        if self.zero_point < self.qmin() || self.zero_point > self.qmax() {
            return Err(Error::Config(format!(
                "zero point {} outside [{}, {}]",
                self.zero_point,
                self.qmin(),
                self.qmax()
            )));
        }
        Ok(())
    }

    pub fn qmin(&self) -> i32 {
        match (self.bits, self.symmetric, self.signed) {
            (1, _, _) => -1,
            (b, true, _) => -((1 << (b - 1)) - 1),
            (b, false, true) => -(1 << (b - 1)),
            (_, false, false) => 0,
        }
    }

    pub fn qmax(&self) -> i32 {
        match (self.bits, self.signed) {
            (1, _) => 1,
            (b, true) => (1 << (b - 1)) - 1,
            (b, false) => (1 << b) - 1,
        }
    }

    /// Storage type able to hold every level.
    pub fn storage_dtype(&self) -> DType {
        if self.qmin() >= i8::MIN as i32 && self.qmax() <= i8::MAX as i32 {
            DType::I8
        } else {
            DType::I32
        }
    }

    /// Quantizes one value (non-binary ranges).
    #[inline]
    pub fn quantize_value(&self, x: f32) -> i32 {
        let q = (x as f64 / self.scale as f64).round_ties_even() + self.zero_point as f64;
        q.clamp(self.qmin() as f64, self.qmax() as f64) as i32
    }

    #[inline]
    pub fn dequantize_value(&self, q: i32) -> f32 {
        ((q - self.zero_point) as f64 * self.scale as f64) as f32
    }

    /// Smallest and largest representable reals.
    pub fn real_range(&self) -> (f32, f32) {
        (
            self.dequantize_value(self.qmin()),
            self.dequantize_value(self.qmax()),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Payload,
    quant: Option<QuantParams>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Payload, quant: Option<QuantParams>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} elements, payload has {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        match (&data, &quant) {
            (Payload::F32(_), Some(_)) => {
                return Err(Error::Config("f32 tensor cannot carry quant params".into()))
            }
            (Payload::I8(_) | Payload::I32(_), None) => {
                return Err(Error::Config("integer tensor requires quant params".into()))
            }
            (_, Some(q)) => q.validate()?,
            _ => {}
        }
        Ok(Tensor { shape, data, quant })
    }

    pub fn from_f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Tensor::new(shape, Payload::F32(data), None)
    }

    pub fn from_i8(shape: Vec<usize>, data: Vec<i8>, quant: QuantParams) -> Result<Self> {
        Tensor::new(shape, Payload::I8(data), Some(quant))
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            data: Payload::F32(vec![0.0; n]),
            quant: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            data: Payload::F32(vec![value; n]),
            quant: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn quant(&self) -> Option<&QuantParams> {
        self.quant.as_ref()
    }

    pub fn payload(&self) -> &Payload {
        &self.data
    }

    pub fn size_bytes(&self) -> usize {
        self.len() * self.dtype().size_bytes()
    }

    /// Interprets a rank-4 shape as `(N, C, H, W)`.
    pub fn nchw(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::Shape(format!(
                "expected a rank-4 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.data {
            Payload::F32(v) => Ok(v),
            other => Err(Error::Shape(format!(
                "expected f32 payload, found {:?}",
                other.dtype()
            ))),
        }
    }

    pub fn as_i8(&self) -> Result<&[i8]> {
        match &self.data {
            Payload::I8(v) => Ok(v),
            other => Err(Error::Shape(format!(
                "expected i8 payload, found {:?}",
                other.dtype()
            ))),
        }
    }

    pub fn into_f32(self) -> Result<Vec<f32>> {
        match self.data {
            Payload::F32(v) => Ok(v),
            other => Err(Error::Shape(format!(
                "expected f32 payload, found {:?}",
                other.dtype()
            ))),
        }
    }

    /// Same payload, different shape with equal element count.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data, self.quant)
    }

    /// Integer payload widened to `i32`.
    pub fn int_values(&self) -> Result<Vec<i32>> {
        match &self.data {
            Payload::I8(v) => Ok(v.iter().map(|&q| q as i32).collect()),
            Payload::I32(v) => Ok(v.clone()),
            Payload::F32(_) => Err(Error::Shape("expected integer payload, found F32".into())),
        }
    }

    /// Real values of the tensor; f32 tensors are returned unchanged.
    pub fn dequantize(&self) -> Tensor {
        match (&self.data, &self.quant) {
            (Payload::F32(_), _) => self.clone(),
            (_, Some(p)) => {
                let values = self
                    .int_values()
                    .expect("integer payload")
                    .into_iter()
                    .map(|q| p.dequantize_value(q))
                    .collect();
                Tensor {
                    shape: self.shape.clone(),
                    data: Payload::F32(values),
                    quant: None,
                }
            }
            (_, None) => unreachable!("integer tensor without quant params"),
        }
    }

    /// Applies `f` elementwise to an f32 tensor.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Tensor> {
        let values = self.as_f32()?.iter().map(|&v| f(v)).collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data: Payload::F32(values),
            quant: None,
        })
    }

    /// Splits the leading (batch) dimension into single-item tensors.
    pub fn split_batch(&self) -> Result<Vec<Tensor>> {
        let (n, c, h, w) = self.nchw()?;
        let item = c * h * w;
        let out = (0..n)
            .map(|i| {
                let data = match &self.data {
                    Payload::F32(v) => Payload::F32(v[i * item..(i + 1) * item].to_vec()),
                    Payload::I8(v) => Payload::I8(v[i * item..(i + 1) * item].to_vec()),
                    Payload::I32(v) => Payload::I32(v[i * item..(i + 1) * item].to_vec()),
                };
                Tensor {
                    shape: vec![1, c, h, w],
                    data,
                    quant: self.quant,
                }
            })
            .collect();
        Ok(out)
    }

    /// Stacks f32 tensors of shape `(n_i, C, H, W)` along the batch axis.
    pub fn stack_batch(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Usage("cannot stack an empty batch".into()))?;
        let (_, c, h, w) = first.nchw()?;
        let mut n = 0;
        let mut data = Vec::with_capacity(items.len() * first.len());
        for t in items {
            let (ni, ci, hi, wi) = t.nchw()?;
            if (ci, hi, wi) != (c, h, w) {
                return Err(Error::Shape(format!(
                    "cannot stack {:?} with {:?}",
                    t.shape, first.shape
                )));
            }
            data.extend_from_slice(t.as_f32()?);
            n += ni;
        }
        Tensor::from_f32(vec![n, c, h, w], data)
    }
}

fn check_finite(x: &[f32]) -> Result<()> {
    match x.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NumericDomain(format!(
            "non-finite value {} at index {i}",
            x[i]
        ))),
        None => Ok(()),
    }
}

fn mean_abs(x: &[f32]) -> f32 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v.abs() as f64).sum::<f64>() / x.len() as f64) as f32
}

/// Quantizes an f32 tensor. With `bits == 1` the scale is replaced by the mean
/// absolute value of `x` and each element maps to its sign.
pub fn quantize(x: &Tensor, p: &QuantParams) -> Result<Tensor> {
    p.validate()?;
    let values = x.as_f32()?;
    check_finite(values)?;
    let mut params = *p;
    let q: Vec<i32> = if p.bits == 1 {
        let s = mean_abs(values);
        if s > 0.0 {
            params.scale = s;
            values.iter().map(|&v| if v >= 0.0 { 1 } else { -1 }).collect()
        } else {
            vec![0; values.len()]
        }
    } else {
        values.iter().map(|&v| p.quantize_value(v)).collect()
    };
    let data = match params.storage_dtype() {
        DType::I8 => Payload::I8(q.into_iter().map(|v| v as i8).collect()),
        _ => Payload::I32(q),
    };
    Tensor::new(x.shape.clone(), data, Some(params))
}

/// Quantize-then-dequantize in one step.
pub fn fake_quantize(x: &Tensor, p: &QuantParams) -> Result<Tensor> {
    Ok(quantize(x, p)?.dequantize())
}

/// Fake-quantizes a raw slice in place (non-binary ranges only).
pub(crate) fn fake_quantize_slice(values: &mut [f32], p: &QuantParams) {
    for v in values {
        *v = p.dequantize_value(p.quantize_value(*v));
    }
}
