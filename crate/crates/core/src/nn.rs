//! Layer primitives with paired forward/backward functions, and a small
//! sequential network that chains them.
//!
//! Convolutions are valid (unpadded) cross-correlations. The ReLU
//! subgradient at zero is zero, and max-pool ties route to the first cell in
//! row-major order.

use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Tensor};

/// A learnable tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub frozen: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            value,
            grad,
            frozen: false,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

// ---------------------------------------------------------------------------
// conv2d

fn conv_out_dim(input: usize, kernel: usize, stride: usize) -> usize {
    (input - kernel) / stride + 1
}

fn check_conv<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    stride: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize)> {
    let (c, h, w) = input.dims3()?;
    let (co, ci, kh, kw) = match kernels.shape()[..] {
        [co, ci, kh, kw] => (co, ci, kh, kw),
        _ => {
            return Err(Error::dim(format!(
                "kernels must be C_out x C_in x k_h x k_w, got {:?}",
                kernels.shape()
            )))
        }
    };
    if stride == 0 {
        return Err(Error::dim("conv stride must be at least 1"));
    }
    if ci != c {
        return Err(Error::dim(format!(
            "kernels {:?} expect {ci} input channels, input is {:?}",
            kernels.shape(),
            input.shape()
        )));
    }
    if kh > h || kw > w {
        return Err(Error::dim(format!(
            "kernel {kh}x{kw} larger than input {h}x{w}"
        )));
    }
    Ok((
        c,
        h,
        w,
        co,
        kh,
        kw,
        conv_out_dim(h, kh, stride),
        conv_out_dim(w, kw, stride),
    ))
}

/// Unfolds receptive fields into a `(C*kh*kw) x (Ho*Wo)` matrix.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    input: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let p = ho * wo;
    let mut cols = vec![T::zero(); c * kh * kw * p];
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oi in 0..ho {
                    let src = &input[(ch * h + oi * stride + ki) * w..];
                    for oj in 0..wo {
                        dst[oi * wo + oj] = src[oj * stride + kj];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let p = ho * wo;
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ch * kh + ki) * kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oi in 0..ho {
                    let base = (ch * h + oi * stride + ki) * w;
                    for oj in 0..wo {
                        out[base + oj * stride + kj] += src[oi * wo + oj];
                    }
                }
            }
        }
    }
    out
}

/// Valid cross-correlation of a `C_in x H x W` input with
/// `C_out x C_in x k_h x k_w` kernels.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, kernels: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    let (c, h, w, co, kh, kw, ho, wo) = check_conv(input, kernels, stride)?;
    let cols = im2col(input.data(), c, h, w, kh, kw, stride, ho, wo);
    let mut out = Tensor::zeros(&[co, ho, wo]);
    let k = c * kh * kw;
    gemm(
        MatRef::new(kernels.data(), co, k),
        MatRef::new(&cols, k, ho * wo),
        out.data_mut(),
        false,
    );
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to the input and the kernels.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    stride: usize,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c, h, w, co, kh, kw, ho, wo) = check_conv(input, kernels, stride)?;
    if d_out.shape() != [co, ho, wo] {
        return Err(Error::dim(format!(
            "conv upstream gradient {:?} does not match output [{co}, {ho}, {wo}]",
            d_out.shape()
        )));
    }
    let cols = im2col(input.data(), c, h, w, kh, kw, stride, ho, wo);
    let mut d_kernels = Tensor::zeros(kernels.shape());
    let d_input = conv_backward_cols(
        &cols,
        kernels.data(),
        d_out.data(),
        ConvGeom {
            c,
            h,
            w,
            co,
            kh,
            kw,
            stride,
            ho,
            wo,
        },
        Some(d_kernels.data_mut()),
        true,
    )
    .expect("input gradient requested");
    Ok((Tensor::new(&[c, h, w], d_input)?, d_kernels))
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

/// Shared conv backward over precomputed columns. Kernel gradients are
/// accumulated into `d_kernels` when given.
fn conv_backward_cols<T: Scalar>(
    cols: &[T],
    kernels: &[T],
    d_out: &[T],
    g: ConvGeom,
    d_kernels: Option<&mut [T]>,
    want_input: bool,
) -> Option<Vec<T>> {
    let k = g.c * g.kh * g.kw;
    let p = g.ho * g.wo;
    if let Some(dk) = d_kernels {
        gemm(MatRef::new(d_out, g.co, p), MatRef::t(cols, p, k), dk, true);
    }
    if !want_input {
        return None;
    }
    let mut d_cols = vec![T::zero(); k * p];
    gemm(MatRef::t(kernels, k, g.co), MatRef::new(d_out, g.co, p), &mut d_cols, false);
    Some(col2im(&d_cols, g.c, g.h, g.w, g.kh, g.kw, g.stride, g.ho, g.wo))
}

// ---------------------------------------------------------------------------
// relu

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, d_out: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != d_out.shape() {
        return Err(Error::dim(format!(
            "relu gradient {:?} does not match input {:?}",
            d_out.shape(),
            x.shape()
        )));
    }
    let data = x
        .data()
        .iter()
        .zip(d_out.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(x.shape(), data)
}

// ---------------------------------------------------------------------------
// maxpool2

/// 2x2 non-overlapping max pooling. Returns the pooled map and, per output
/// cell, the flat input index that won.
pub fn maxpool2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (c, h, w) = x.dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim(format!(
            "maxpool2 needs even height and width, got {h}x{w}"
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[c, ho, wo]);
    let mut argmax = vec![0usize; c * ho * wo];
    let src = x.data();
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                let base = (ch * h + 2 * i) * w + 2 * j;
                let mut best = base;
                for idx in [base + 1, base + w, base + w + 1] {
                    // strict: ties keep the earlier cell
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                let o = (ch * ho + i) * wo + j;
                out.data_mut()[o] = src[best];
                argmax[o] = best;
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool2_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    d_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if argmax.len() != d_out.len() {
        return Err(Error::dim(format!(
            "maxpool gradient has {} cells, forward had {}",
            d_out.len(),
            argmax.len()
        )));
    }
    let mut dx = Tensor::zeros(input_shape);
    for (&idx, &g) in argmax.iter().zip(d_out.data()) {
        dx.data_mut()[idx] += g;
    }
    Ok(dx)
}

// ---------------------------------------------------------------------------
// fully connected

/// `W x + b`. `x` may have any shape; it is read flat.
pub fn fully_connected<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (d_out, d_in) = fc_dims(x, weight, bias)?;
    let mut out = bias.clone().reshape(&[d_out])?;
    gemm(
        MatRef::new(weight.data(), d_out, d_in),
        MatRef::new(x.data(), d_in, 1),
        out.data_mut(),
        true,
    );
    Ok(out)
}

fn fc_dims<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<(usize, usize)> {
    let (d_out, d_in) = match weight.shape()[..] {
        [o, i] => (o, i),
        _ => {
            return Err(Error::dim(format!(
                "fc weight must be a matrix, got {:?}",
                weight.shape()
            )))
        }
    };
    if x.len() != d_in || bias.len() != d_out {
        return Err(Error::dim(format!(
            "fc shapes disagree: weight {:?}, input {:?}, bias {:?}",
            weight.shape(),
            x.shape(),
            bias.shape()
        )));
    }
    Ok((d_out, d_in))
}

/// Returns `(dx, dW, db)`; `dx` has the shape of `x`.
pub fn fully_connected_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let bias_like = Tensor::zeros(&[d_out.len()]);
    let (o, i) = fc_dims(x, weight, &bias_like)?;
    let mut dw = Tensor::zeros(&[o, i]);
    fc_weight_grad(x.data(), d_out.data(), dw.data_mut());
    let mut dx = Tensor::zeros(x.shape());
    gemm(
        MatRef::t(weight.data(), i, o),
        MatRef::new(d_out.data(), o, 1),
        dx.data_mut(),
        false,
    );
    Ok((dx, dw, d_out.clone().reshape(&[o])?))
}

fn fc_weight_grad<T: Scalar>(x: &[T], d_out: &[T], dw: &mut [T]) {
    let i = x.len();
    for (row, &g) in dw.chunks_exact_mut(i).zip(d_out) {
        if g != T::zero() {
            row.iter_mut().zip(x).for_each(|(d, &xv)| *d += g * xv);
        }
    }
}

// ---------------------------------------------------------------------------
// layer specs and sequential networks

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
    },
    FullyConnected {
        out_features: usize,
    },
    Relu,
    MaxPool2,
}

impl LayerSpec {
    pub fn conv(out_channels: usize, kernel: usize, stride: usize) -> Self {
        LayerSpec::Conv {
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
        }
    }

    pub fn fc(out_features: usize) -> Self {
        LayerSpec::FullyConnected { out_features }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            LayerSpec::Conv {
                out_channels,
                kernel_h,
                kernel_w,
                stride,
            } => out_channels > 0 && kernel_h > 0 && kernel_w > 0 && stride > 0,
            LayerSpec::FullyConnected { out_features } => out_features > 0,
            LayerSpec::Relu | LayerSpec::MaxPool2 => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("layer {self} has a zero size")))
        }
    }
}

/// Text form used in config files and checkpoint manifests:
/// `conv:<out>:<kh>x<kw>:<stride>`, `fc:<out>`, `relu`, `maxpool`.
impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv {
                out_channels,
                kernel_h,
                kernel_w,
                stride,
            } => write!(f, "conv:{out_channels}:{kernel_h}x{kernel_w}:{stride}"),
            LayerSpec::FullyConnected { out_features } => write!(f, "fc:{out_features}"),
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::MaxPool2 => f.write_str("maxpool"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unrecognized layer spec {s:?}"));
        let num = |v: &str| v.parse::<usize>().map_err(|_| bad());
        let parts: Vec<&str> = s.trim().split(':').collect();
        let spec = match parts[..] {
            ["relu"] => LayerSpec::Relu,
            ["maxpool"] => LayerSpec::MaxPool2,
            ["fc", out] => LayerSpec::fc(num(out)?),
            ["conv", out, kernel, stride] => {
                let (kh, kw) = kernel.split_once('x').ok_or_else(bad)?;
                LayerSpec::Conv {
                    out_channels: num(out)?,
                    kernel_h: num(kh)?,
                    kernel_w: num(kw)?,
                    stride: num(stride)?,
                }
            }
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

pub fn format_specs(specs: &[LayerSpec]) -> String {
    specs.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
}

pub fn parse_specs(text: &str) -> Result<Vec<LayerSpec>> {
    text.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

#[derive(Clone, Debug, PartialEq)]
enum Layer {
    Conv {
        kernels: usize,
        bias: usize,
        stride: usize,
        geom: (usize, usize, usize, usize, usize, usize, usize, usize),
    },
    FullyConnected {
        weight: usize,
        bias: usize,
    },
    Relu,
    MaxPool2,
}

/// Per-layer values retained by a forward pass for the backward pass.
#[derive(Clone, Debug)]
enum Saved<T> {
    Conv { cols: Vec<T> },
    FullyConnected { input: Tensor<T> },
    Relu { input: Tensor<T> },
    MaxPool2 { input_shape: Vec<usize>, argmax: Vec<usize> },
}

#[derive(Clone, Debug)]
pub struct Trace<T> {
    saved: Vec<Saved<T>>,
    input_shape: Vec<usize>,
}

impl<T: Scalar> Trace<T> {
    /// Fingerprint of the piecewise-linear regime: the sign of every ReLU
    /// input and the winning cell of every pooling window.
    pub fn regime(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for s in &self.saved {
            match s {
                Saved::Relu { input } => input.data().iter().for_each(|v| (*v > T::zero()).hash(&mut h)),
                Saved::MaxPool2 { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }
}

/// One gradient tensor per network parameter, in parameter order.
pub type Gradients<T> = Vec<Tensor<T>>;

/// Feed-forward stack of layers with shapes resolved at construction.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    specs: Vec<LayerSpec>,
    layers: Vec<Layer>,
    pub params: Vec<Parameter<T>>,
}

impl<T: Scalar> Network<T> {
    /// Builds a network with zero-valued parameters.
    pub fn zeros(input_shape: &[usize], specs: &[LayerSpec]) -> Result<Self> {
        if input_shape.len() != 3 || input_shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!(
                "network input must be a non-empty C x H x W shape, got {input_shape:?}"
            )));
        }
        if specs.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        let mut params = Vec::new();
        for spec in specs {
            spec.validate()?;
            match *spec {
                LayerSpec::Conv {
                    out_channels,
                    kernel_h,
                    kernel_w,
                    stride,
                } => {
                    let [c, h, w] = shape[..] else {
                        return Err(Error::dim(format!(
                            "conv layer after a flat layer (shape {shape:?})"
                        )));
                    };
                    if kernel_h > h || kernel_w > w {
                        return Err(Error::dim(format!(
                            "{spec} does not fit input {h}x{w}"
                        )));
                    }
                    let (ho, wo) = (
                        conv_out_dim(h, kernel_h, stride),
                        conv_out_dim(w, kernel_w, stride),
                    );
                    params.push(Parameter::new(Tensor::zeros(&[out_channels, c, kernel_h, kernel_w])));
                    params.push(Parameter::new(Tensor::zeros(&[out_channels])));
                    layers.push(Layer::Conv {
                        kernels: params.len() - 2,
                        bias: params.len() - 1,
                        stride,
                        geom: (c, h, w, out_channels, kernel_h, kernel_w, ho, wo),
                    });
                    shape = vec![out_channels, ho, wo];
                }
                LayerSpec::FullyConnected { out_features } => {
                    let d_in: usize = shape.iter().product();
                    params.push(Parameter::new(Tensor::zeros(&[out_features, d_in])));
                    params.push(Parameter::new(Tensor::zeros(&[out_features])));
                    layers.push(Layer::FullyConnected {
                        weight: params.len() - 2,
                        bias: params.len() - 1,
                    });
                    shape = vec![out_features];
                }
                LayerSpec::Relu => layers.push(Layer::Relu),
                LayerSpec::MaxPool2 => {
                    let [c, h, w] = shape[..] else {
                        return Err(Error::dim(format!(
                            "maxpool after a flat layer (shape {shape:?})"
                        )));
                    };
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(Error::dim(format!(
                            "maxpool2 needs even height and width, got {h}x{w}"
                        )));
                    }
                    layers.push(Layer::MaxPool2);
                    shape = vec![c, h / 2, w / 2];
                }
            }
        }
        Ok(Network {
            input_shape: input_shape.to_vec(),
            output_shape: shape,
            specs: specs.to_vec(),
            layers,
            params,
        })
    }

    /// Builds a network with He-uniform weights and zero biases.
    pub fn new<R: Rng + ?Sized>(input_shape: &[usize], specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(input_shape, specs)?;
        for layer in &net.layers {
            let weight = match *layer {
                Layer::Conv { kernels, .. } => kernels,
                Layer::FullyConnected { weight, .. } => weight,
                _ => continue,
            };
            let value = &mut net.params[weight].value;
            let fan_in: usize = value.shape()[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            for v in value.data_mut() {
                *v = T::from_f64_lossy(rng.gen_range(-bound..bound));
            }
        }
        Ok(net)
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn output_len(&self) -> usize {
        self.output_shape.iter().product()
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.params.iter_mut().for_each(|p| p.frozen = frozen);
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    pub fn new_gradients(&self) -> Gradients<T> {
        self.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect()
    }

    /// Adds `grads` into the parameters' accumulated gradients.
    pub fn accumulate(&mut self, grads: &Gradients<T>) {
        for (p, g) in self.params.iter_mut().zip(grads) {
            p.grad.add_assign(g);
        }
    }

    /// Index of the last fully connected layer's `(weight, bias)` parameters.
    pub fn last_fc(&self) -> Option<(usize, usize)> {
        self.layers.iter().rev().find_map(|l| match *l {
            Layer::FullyConnected { weight, bias } => Some((weight, bias)),
            _ => None,
        })
    }

    pub fn forward(&self, input: &Tensor<T>) -> Result<(Tensor<T>, Trace<T>)> {
        if input.shape() != self.input_shape.as_slice() {
            return Err(Error::dim(format!(
                "network expects input {:?}, got {:?}",
                self.input_shape,
                input.shape()
            )));
        }
        let mut x = input.clone();
        let mut saved = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            x = match *layer {
                Layer::Conv {
                    kernels,
                    bias,
                    stride,
                    geom: (c, h, w, co, kh, kw, ho, wo),
                } => {
                    let cols = im2col(x.data(), c, h, w, kh, kw, stride, ho, wo);
                    let p = ho * wo;
                    let mut out = Tensor::zeros(&[co, ho, wo]);
                    let b = self.params[bias].value.data();
                    for (ch, chunk) in out.data_mut().chunks_exact_mut(p).enumerate() {
                        chunk.iter_mut().for_each(|v| *v = b[ch]);
                    }
                    gemm(
                        MatRef::new(self.params[kernels].value.data(), co, c * kh * kw),
                        MatRef::new(&cols, c * kh * kw, p),
                        out.data_mut(),
                        true,
                    );
                    saved.push(Saved::Conv { cols });
                    out
                }
                Layer::FullyConnected { weight, bias } => {
                    let out = fully_connected(&x, &self.params[weight].value, &self.params[bias].value)?;
                    saved.push(Saved::FullyConnected { input: x });
                    out
                }
                Layer::Relu => {
                    let out = relu(&x);
                    saved.push(Saved::Relu { input: x });
                    out
                }
                Layer::MaxPool2 => {
                    let (out, argmax) = maxpool2(&x)?;
                    saved.push(Saved::MaxPool2 {
                        input_shape: x.shape().to_vec(),
                        argmax,
                    });
                    out
                }
            };
        }
        Ok((
            x,
            Trace {
                saved,
                input_shape: self.input_shape.clone(),
            },
        ))
    }

    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward(input).map(|(out, _)| out)
    }

    /// Backpropagates `d_out` through a recorded forward pass, accumulating
    /// parameter gradients into `grads`. Frozen parameters get no gradient.
    /// Returns the input gradient when `want_input` is set.
    pub fn backward(
        &self,
        trace: &Trace<T>,
        d_out: &Tensor<T>,
        grads: &mut Gradients<T>,
        want_input: bool,
    ) -> Result<Option<Tensor<T>>> {
        if d_out.len() != self.output_len() {
            return Err(Error::dim(format!(
                "upstream gradient {:?} does not match network output {:?}",
                d_out.shape(),
                self.output_shape
            )));
        }
        if grads.len() != self.params.len() {
            return Err(Error::dim("gradient buffer does not match parameters"));
        }
        let mut g = d_out.clone();
        for (idx, (layer, saved)) in self.layers.iter().zip(&trace.saved).enumerate().rev() {
            let need_dx = want_input || idx > 0;
            g = match (layer, saved) {
                (
                    &Layer::Conv {
                        kernels,
                        bias,
                        stride,
                        geom: (c, h, w, co, kh, kw, ho, wo),
                    },
                    Saved::Conv { cols },
                ) => {
                    let p = ho * wo;
                    if !self.params[bias].frozen {
                        let db = grads[bias].data_mut();
                        for (ch, chunk) in g.data().chunks_exact(p).enumerate() {
                            db[ch] += chunk.iter().copied().sum();
                        }
                    }
                    let dk = if self.params[kernels].frozen {
                        None
                    } else {
                        Some(grads[kernels].data_mut())
                    };
                    let geom = ConvGeom {
                        c,
                        h,
                        w,
                        co,
                        kh,
                        kw,
                        stride,
                        ho,
                        wo,
                    };
                    match conv_backward_cols(cols, self.params[kernels].value.data(), g.data(), geom, dk, need_dx) {
                        Some(dx) => Tensor::new(&[c, h, w], dx)?,
                        None => break,
                    }
                }
                (&Layer::FullyConnected { weight, bias }, Saved::FullyConnected { input }) => {
                    if !self.params[bias].frozen {
                        grads[bias].add_assign(&g);
                    }
                    if !self.params[weight].frozen {
                        fc_weight_grad(input.data(), g.data(), grads[weight].data_mut());
                    }
                    if !need_dx {
                        break;
                    }
                    let (o, i) = (g.len(), input.len());
                    let mut dx = Tensor::zeros(input.shape());
                    gemm(
                        MatRef::t(self.params[weight].value.data(), i, o),
                        MatRef::new(g.data(), o, 1),
                        dx.data_mut(),
                        false,
                    );
                    dx
                }
                (Layer::Relu, Saved::Relu { input }) => relu_backward(input, &g)?,
                (Layer::MaxPool2, Saved::MaxPool2 { input_shape, argmax }) => {
                    maxpool2_backward(input_shape, argmax, &g)?
                }
                _ => unreachable!("trace recorded by a different network"),
            };
        }
        if want_input {
            Ok(Some(g.reshape(&trace.input_shape)?))
        } else {
            Ok(None)
        }
    }
}

/// Rescales the gradients of the non-frozen parameters so their joint L2
/// norm is at most `max_norm`. Returns the norm before rescaling.
pub fn clip_grad_norm<'a, T: Scalar>(params: impl IntoIterator<Item = &'a mut Parameter<T>>, max_norm: f64) -> f64 {
    let mut live: Vec<&mut Parameter<T>> = params.into_iter().filter(|p| !p.frozen).collect();
    let norm = live
        .iter()
        .flat_map(|p| p.grad.data().iter())
        .map(|g| g.to_f64_lossy().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = T::from_f64_lossy(max_norm / norm);
        for p in live.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= k);
        }
    }
    norm
}

/// Plain SGD: `value -= lr * grad` for every non-frozen parameter, then all
/// gradients are zeroed. A non-finite gradient aborts the step untouched.
pub fn sgd_step<'a, T: Scalar>(
    params: impl IntoIterator<Item = &'a mut Parameter<T>>,
    lr: T,
) -> Result<()> {
    let mut params: Vec<&mut Parameter<T>> = params.into_iter().collect();
    if let Some(pos) = params.iter().position(|p| !p.frozen && !p.grad.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient in parameter {pos}")));
    }
    for p in params.iter_mut() {
        if !p.frozen {
            let grad = p.grad.data().to_vec();
            p.value
                .data_mut()
                .iter_mut()
                .zip(grad)
                .for_each(|(v, g)| *v -= lr * g);
        }
        p.zero_grad();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_rescales_only_above_the_limit() {
        let mut ps = vec![
            Parameter::new(Tensor::<f64>::zeros(&[2])),
            Parameter::new(Tensor::<f64>::zeros(&[1])),
        ];
        ps[0].grad = Tensor::from_f64(&[2], &[3.0, 0.0]).unwrap();
        ps[1].grad = Tensor::from_f64(&[1], &[4.0]).unwrap();
        assert_eq!(clip_grad_norm(ps.iter_mut(), 10.0), 5.0);
        assert_eq!(ps[1].grad.data(), &[4.0]);
        assert_eq!(clip_grad_norm(ps.iter_mut(), 1.0), 5.0);
        assert!((ps[0].grad.data()[0] - 0.6).abs() < 1e-15 && ps[0].grad.data()[1] == 0.0);
        assert!((ps[1].grad.data()[0] - 0.8).abs() < 1e-15);
        // frozen gradients neither count nor change
        ps[1].frozen = true;
        ps[1].grad = Tensor::from_f64(&[1], &[100.0]).unwrap();
        assert!((clip_grad_norm(ps.iter_mut(), 1.0) - 0.6).abs() < 1e-15);
        assert_eq!(ps[1].grad.data(), &[100.0]);
    }
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn unit_kernel_is_identity() {
        let x = Tensor::<f64>::from_fn(&[1, 3, 4], |i| i as f64 * 0.3 - 1.0);
        let k = t(&[1, 1, 1, 1], &[1.0]);
        assert_eq!(conv2d(&x, &k, 1).unwrap(), x);
    }

    #[test]
    fn ones_kernel_sums_windows() {
        let x = Tensor::<f64>::full(&[1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 2, 2], 1.0);
        assert_eq!(conv2d(&x, &k, 1).unwrap().data(), &[4.0; 4]);
    }

    #[test]
    fn conv_matches_direct_loops_with_stride() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::from_fn(&[2, 7, 8], |_| rng.gen_range(-1.0..1.0));
        let k = Tensor::<f64>::from_fn(&[3, 2, 3, 2], |_| rng.gen_range(-1.0..1.0));
        let out = conv2d(&x, &k, 2).unwrap();
        assert_eq!(out.shape(), &[3, 3, 4]);
        for o in 0..3 {
            for i in 0..3 {
                for j in 0..4 {
                    let mut acc = 0.0;
                    for c in 0..2 {
                        for a in 0..3 {
                            for b in 0..2 {
                                acc += x.data()[(c * 7 + 2 * i + a) * 8 + 2 * j + b]
                                    * k.data()[((o * 2 + c) * 3 + a) * 2 + b];
                            }
                        }
                    }
                    assert!((out.data()[(o * 3 + i) * 4 + j] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn oversized_kernel_is_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 3, 3]);
        let k = Tensor::zeros(&[1, 1, 4, 2]);
        assert!(matches!(conv2d(&x, &k, 1), Err(Error::Dimension(_))));
    }

    #[test]
    fn relu_forward_and_zero_subgradient() {
        let x = t(&[3], &[-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &t(&[3], &[5.0, 5.0, 5.0])).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 5.0]);
        let pos = t(&[2], &[0.5, 3.0]);
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn maxpool_single_window_and_constant() {
        let (out, argmax) = maxpool2(&t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(out.data(), &[4.0]);
        assert_eq!(argmax, vec![3]);
        let c = Tensor::<f64>::full(&[2, 4, 6], 0.7);
        let (out, argmax) = maxpool2(&c).unwrap();
        assert_eq!(out, Tensor::full(&[2, 2, 3], 0.7));
        // ties resolve to the top-left cell
        assert_eq!(argmax[0], 0);
        assert_eq!(argmax[1], 2);
    }

    #[test]
    fn maxpool_rejects_odd_sizes() {
        assert!(maxpool2(&Tensor::<f64>::zeros(&[1, 3, 4])).is_err());
        assert!(maxpool2(&Tensor::<f64>::zeros(&[1, 4, 5])).is_err());
    }

    #[test]
    fn maxpool_backward_hits_one_cell_per_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::from_fn(&[1, 4, 4], |_| rng.gen_range(-1.0..1.0));
        let (_, argmax) = maxpool2(&x).unwrap();
        let d = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let dx = maxpool2_backward(x.shape(), &argmax, &d).unwrap();
        for (wi, (oi, oj)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
            let cells: Vec<(usize, f64)> = [(0, 0), (0, 1), (1, 0), (1, 1)]
                .iter()
                .map(|&(a, b)| {
                    let idx = (2 * oi + a) * 4 + 2 * oj + b;
                    (idx, dx.data()[idx])
                })
                .collect();
            let nonzero: Vec<_> = cells.iter().filter(|c| c.1 != 0.0).collect();
            assert_eq!(nonzero.len(), 1);
            assert_eq!(nonzero[0].1, d.data()[wi]);
            // the receiving cell is the window max
            let best = cells
                .iter()
                .map(|c| x.data()[c.0])
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(x.data()[nonzero[0].0], best);
        }
    }

    #[test]
    fn fc_identity_and_substitution() {
        let x = t(&[2], &[2.0, 3.0]);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(fully_connected(&x, &eye, &Tensor::zeros(&[2])).unwrap(), x);
        let out = fully_connected(&x, &t(&[1, 2], &[1.0, 1.0]), &t(&[1], &[1.0])).unwrap();
        assert_eq!(out.data(), &[6.0]);
        assert!(fully_connected(&x, &Tensor::zeros(&[1, 3]), &t(&[1], &[0.0])).is_err());
    }

    #[test]
    fn layer_spec_text_round_trip() {
        let specs = vec![
            LayerSpec::conv(8, 6, 2),
            LayerSpec::Relu,
            LayerSpec::MaxPool2,
            LayerSpec::fc(3),
        ];
        let text = format_specs(&specs);
        assert_eq!(text, "conv:8:6x6:2,relu,maxpool,fc:3");
        assert_eq!(parse_specs(&text).unwrap(), specs);
        assert!("conv:0:3x3:1".parse::<LayerSpec>().is_err());
        assert!("pool".parse::<LayerSpec>().is_err());
    }

    #[test]
    fn network_rejects_odd_pool_input() {
        let specs = [LayerSpec::conv(8, 7, 2), LayerSpec::Relu, LayerSpec::MaxPool2];
        assert!(Network::<f64>::zeros(&[1, 60, 60], &specs).is_err());
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let specs = [LayerSpec::conv(2, 3, 1), LayerSpec::Relu, LayerSpec::fc(4)];
        let mut net = Network::<f64>::new(&[1, 5, 5], &specs, &mut rng).unwrap();
        net.set_frozen(true);
        let x = Tensor::from_fn(&[1, 5, 5], |i| (i as f64).cos());
        let (out, trace) = net.forward(&x).unwrap();
        let mut grads = net.new_gradients();
        let dx = net
            .backward(&trace, &Tensor::full(out.shape(), 1.0), &mut grads, true)
            .unwrap()
            .unwrap();
        assert!(grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
        assert!(dx.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn sgd_updates_unfrozen_and_zeroes_all_grads() {
        let mut a = Parameter::new(t(&[1], &[1.0]));
        a.grad = t(&[1], &[0.5]);
        let mut b = Parameter::new(t(&[1], &[1.0]));
        b.grad = t(&[1], &[0.5]);
        b.frozen = true;
        sgd_step([&mut a, &mut b], 0.1).unwrap();
        assert!((a.value.data()[0] - 0.95).abs() < 1e-15);
        assert_eq!(b.value.data()[0], 1.0);
        assert_eq!(a.grad.data()[0], 0.0);
        assert_eq!(b.grad.data()[0], 0.0);
        // zero gradient is a fixed point
        sgd_step([&mut a], 0.1).unwrap();
        sgd_step([&mut a], 0.1).unwrap();
        assert!((a.value.data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn sgd_rejects_non_finite_gradient() {
        let mut a = Parameter::new(t(&[2], &[1.0, 2.0]));
        a.grad = t(&[2], &[0.1, f64::NAN]);
        assert!(matches!(sgd_step([&mut a], 0.1), Err(Error::Numeric(_))));
        assert_eq!(a.value.data(), &[1.0, 2.0]);
    }
}
