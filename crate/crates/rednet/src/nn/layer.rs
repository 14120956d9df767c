//! Layer kinds and their forward/backward rules.
//!
//! Layers operate on single samples: a linear layer consumes a rank-1
//! tensor `[n_in]`, the 2-d layers consume `[channels, height, width]`.
//! Parameters are ordered weights-then-bias everywhere; serialization and
//! gradient bundles rely on that order.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T: Scalar = f64> {
    /// `y = W x + b` with `W: [n_out, n_in]`, `b: [n_out]`.
    Linear { weight: Tensor<T>, bias: Tensor<T> },
    /// Zero-padded 2-d convolution, `kernels: [c_out, c_in, kh, kw]`,
    /// `bias: [c_out]`, output dims floor((in + 2*padding - k)/stride) + 1.
    Conv2d {
        kernels: Tensor<T>,
        bias: Tensor<T>,
        stride: usize,
        padding: usize,
    },
    Relu,
    /// `y = (1/beta) * ln(1 + exp(beta * x))`, elementwise, beta > 0.
    Softplus { beta: T },
    /// Square-window max pooling over each channel.
    MaxPool2d { window: usize, stride: usize },
    /// Reshape to rank-1, row-major order.
    Flatten,
}

impl<T: Scalar> Layer<T> {
    pub fn linear(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let layer = Layer::Linear { weight, bias };
        layer.validate()?;
        Ok(layer)
    }

    /// Fresh linear layer, weights uniform in +-sqrt(1/n_in).
    pub fn linear_init(n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if n_in == 0 || n_out == 0 {
            return Err(Error::Parameter(format!(
                "linear layer needs n_in >= 1 and n_out >= 1, got {n_in} and {n_out}"
            )));
        }
        let bound = (1.0 / n_in as f64).sqrt();
        let weight = Tensor::matrix(
            n_out,
            n_in,
            (0..n_out * n_in)
                .map(|_| rng::uniform(rng, -bound, bound))
                .collect(),
        )?;
        let bias = Tensor::from_vec((0..n_out).map(|_| rng::uniform(rng, -bound, bound)).collect());
        Self::linear(weight, bias)
    }

    pub fn conv2d(kernels: Tensor<T>, bias: Tensor<T>, stride: usize, padding: usize) -> Result<Self> {
        let layer = Layer::Conv2d {
            kernels,
            bias,
            stride,
            padding,
        };
        layer.validate()?;
        Ok(layer)
    }

    /// Fresh conv layer, weights uniform in +-sqrt(1/(c_in*kh*kw)).
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d_init(
        c_in: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if c_in == 0 || c_out == 0 || kh == 0 || kw == 0 {
            return Err(Error::Parameter(
                "conv2d needs positive channel counts and kernel dims".into(),
            ));
        }
        let fan_in = c_in * kh * kw;
        let bound = (1.0 / fan_in as f64).sqrt();
        let kernels = Tensor::new(
            vec![c_out, c_in, kh, kw],
            (0..c_out * fan_in)
                .map(|_| rng::uniform(rng, -bound, bound))
                .collect(),
        )?;
        let bias = Tensor::from_vec((0..c_out).map(|_| rng::uniform(rng, -bound, bound)).collect());
        Self::conv2d(kernels, bias, stride, padding)
    }

    pub fn softplus(beta: T) -> Result<Self> {
        let layer = Layer::Softplus { beta };
        layer.validate()?;
        Ok(layer)
    }

    pub fn maxpool2d(window: usize, stride: usize) -> Result<Self> {
        let layer = Layer::MaxPool2d { window, stride };
        layer.validate()?;
        Ok(layer)
    }

    /// Internal consistency of the layer's own parameters.
    pub fn validate(&self) -> Result<()> {
        match self {
            Layer::Linear { weight, bias } => {
                if !weight.is_matrix() {
                    return Err(Error::Shape(format!(
                        "linear weight must be rank-2, got {:?}",
                        weight.shape()
                    )));
                }
                if bias.shape() != [weight.rows()] {
                    return Err(Error::Shape(format!(
                        "linear bias shape {:?} does not match {} output rows",
                        bias.shape(),
                        weight.rows()
                    )));
                }
            }
            Layer::Conv2d {
                kernels,
                bias,
                stride,
                ..
            } => {
                if kernels.shape().len() != 4 {
                    return Err(Error::Shape(format!(
                        "conv2d kernels must be rank-4, got {:?}",
                        kernels.shape()
                    )));
                }
                if kernels.shape().iter().any(|&d| d == 0) {
                    return Err(Error::Shape("conv2d kernels have a zero dim".into()));
                }
                if bias.shape() != [kernels.shape()[0]] {
                    return Err(Error::Shape(format!(
                        "conv2d bias shape {:?} does not match {} output channels",
                        bias.shape(),
                        kernels.shape()[0]
                    )));
                }
                if *stride == 0 {
                    return Err(Error::Parameter("conv2d stride must be >= 1".into()));
                }
            }
            Layer::Softplus { beta } => {
                if !(*beta > T::zero()) || !beta.is_finite() {
                    return Err(Error::Parameter(format!(
                        "softplus beta must be positive and finite, got {beta}"
                    )));
                }
            }
            Layer::MaxPool2d { window, stride } => {
                if *window == 0 || *stride == 0 {
                    return Err(Error::Parameter(format!(
                        "maxpool2d window and stride must be >= 1, got {window} and {stride}"
                    )));
                }
            }
            Layer::Relu | Layer::Flatten => {}
        }
        Ok(())
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Linear { .. } => "linear",
            Layer::Conv2d { .. } => "conv2d",
            Layer::Relu => "relu",
            Layer::Softplus { .. } => "softplus",
            Layer::MaxPool2d { .. } => "maxpool2d",
            Layer::Flatten => "flatten",
        }
    }

    /// Output shape for a given input shape, or a shape error.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Linear { weight, .. } => {
                if input != [weight.cols()] {
                    return Err(Error::Shape(format!(
                        "linear expects input [{}], got {:?}",
                        weight.cols(),
                        input
                    )));
                }
                Ok(vec![weight.rows()])
            }
            Layer::Conv2d {
                kernels,
                stride,
                padding,
                ..
            } => {
                let (c_out, c_in, kh, kw) = conv_dims(kernels);
                let [c, h, w] = expect_chw("conv2d", input)?;
                if c != c_in {
                    return Err(Error::Shape(format!(
                        "conv2d expects {c_in} input channels, got {c}"
                    )));
                }
                let h_eff = h + 2 * padding;
                let w_eff = w + 2 * padding;
                if h_eff < kh || w_eff < kw {
                    return Err(Error::Shape(format!(
                        "conv2d kernel {kh}x{kw} exceeds padded input {h_eff}x{w_eff}"
                    )));
                }
                Ok(vec![
                    c_out,
                    (h_eff - kh) / stride + 1,
                    (w_eff - kw) / stride + 1,
                ])
            }
            Layer::Relu | Layer::Softplus { .. } => Ok(input.to_vec()),
            Layer::MaxPool2d { window, stride } => {
                let [c, h, w] = expect_chw("maxpool2d", input)?;
                if h < *window || w < *window {
                    return Err(Error::Shape(format!(
                        "maxpool2d window {window} exceeds input {h}x{w}"
                    )));
                }
                Ok(vec![c, (h - window) / stride + 1, (w - window) / stride + 1])
            }
            Layer::Flatten => Ok(vec![input.iter().product::<usize>()]),
        }
    }

    /// Parameter tensors in serialization order (weights, then bias).
    pub fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            Layer::Linear { weight, bias } => vec![weight, bias],
            Layer::Conv2d { kernels, bias, .. } => vec![kernels, bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Linear { weight, bias } => vec![weight, bias],
            Layer::Conv2d { kernels, bias, .. } => vec![kernels, bias],
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Single-sample forward evaluation.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out_shape = self.output_shape(x.shape())?;
        match self {
            Layer::Linear { weight, bias } => {
                let mut out = bias.data().to_vec();
                for (o, i) in out.iter_mut().zip(0..weight.rows()) {
                    *o = *o
                        + weight
                            .row(i)
                            .iter()
                            .zip(x.data())
                            .map(|(&w, &v)| w * v)
                            .sum::<T>();
                }
                Tensor::new(out_shape, out)
            }
            Layer::Conv2d {
                kernels,
                bias,
                stride,
                padding,
            } => conv2d_forward(kernels, bias, *stride, *padding, x, out_shape),
            Layer::Relu => Ok(x.map(|v| if v > T::zero() { v } else { T::zero() })),
            Layer::Softplus { beta } => Ok(x.map(|v| softplus_stable(v, *beta))),
            Layer::MaxPool2d { window, stride } => {
                maxpool_forward(*window, *stride, x, out_shape)
            }
            Layer::Flatten => x.clone().reshape(out_shape),
        }
    }

    /// Reverse-mode step: gradients w.r.t. parameters (same order as
    /// [`Layer::params`]) and w.r.t. the layer input.
    pub fn backward(
        &self,
        input: &Tensor<T>,
        grad_out: &Tensor<T>,
    ) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
        match self {
            Layer::Linear { weight, bias: _ } => {
                let (n_out, n_in) = (weight.rows(), weight.cols());
                let mut grad_w = Tensor::zeros(&[n_out, n_in]);
                for i in 0..n_out {
                    let g = grad_out[i];
                    for (j, gw) in grad_w.row_mut(i).iter_mut().enumerate() {
                        *gw = g * input[j];
                    }
                }
                let grad_b = grad_out.clone();
                let mut grad_x = vec![T::zero(); n_in];
                for i in 0..n_out {
                    let g = grad_out[i];
                    for (gx, &w) in grad_x.iter_mut().zip(weight.row(i)) {
                        *gx = *gx + g * w;
                    }
                }
                Ok((vec![grad_w, grad_b], Tensor::from_vec(grad_x)))
            }
            Layer::Conv2d {
                kernels,
                bias: _,
                stride,
                padding,
            } => conv2d_backward(kernels, *stride, *padding, input, grad_out),
            Layer::Relu => {
                let grad = zip_map(input, grad_out, |x, g| if x > T::zero() { g } else { T::zero() });
                Ok((Vec::new(), grad))
            }
            Layer::Softplus { beta } => {
                // d/dx softplus_beta(x) = 1 / (1 + exp(-beta x))
                let b = *beta;
                let grad = zip_map(input, grad_out, |x, g| {
                    g / (T::one() + (-b * x).exp())
                });
                Ok((Vec::new(), grad))
            }
            Layer::MaxPool2d { window, stride } => {
                maxpool_backward(*window, *stride, input, grad_out)
            }
            Layer::Flatten => Ok((Vec::new(), grad_out.clone().reshape(input.shape().to_vec())?)),
        }
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_map shape")
}

/// Overflow-safe softplus: max(x, 0) + (1/beta) * log1p(exp(-beta |x|)).
fn softplus_stable<T: Scalar>(x: T, beta: T) -> T {
    x.max(T::zero()) + (-(beta * x).abs()).exp().ln_1p() / beta
}

fn conv_dims<T: Scalar>(kernels: &Tensor<T>) -> (usize, usize, usize, usize) {
    let s = kernels.shape();
    (s[0], s[1], s[2], s[3])
}

fn expect_chw(kind: &str, shape: &[usize]) -> Result<[usize; 3]> {
    match shape {
        [c, h, w] => Ok([*c, *h, *w]),
        other => Err(Error::Shape(format!(
            "{kind} expects a [channels, height, width] input, got {other:?}"
        ))),
    }
}

fn conv2d_forward<T: Scalar>(
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
    x: &Tensor<T>,
    out_shape: Vec<usize>,
) -> Result<Tensor<T>> {
    let (c_out, c_in, kh, kw) = conv_dims(kernels);
    let [_, h, w] = expect_chw("conv2d", x.shape())?;
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let xd = x.data();
    let kd = kernels.data();
    let mut out = vec![T::zero(); c_out * oh * ow];
    for co in 0..c_out {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = bias[co];
                for ci in 0..c_in {
                    let x_base = ci * h * w;
                    let k_base = (co * c_in + ci) * kh * kw;
                    for ki in 0..kh {
                        let xi = (i * stride + ki) as isize - padding as isize;
                        if xi < 0 || xi >= h as isize {
                            continue;
                        }
                        let x_row = x_base + xi as usize * w;
                        let k_row = k_base + ki * kw;
                        for kj in 0..kw {
                            let xj = (j * stride + kj) as isize - padding as isize;
                            if xj < 0 || xj >= w as isize {
                                continue;
                            }
                            acc = acc + kd[k_row + kj] * xd[x_row + xj as usize];
                        }
                    }
                }
                out[(co * oh + i) * ow + j] = acc;
            }
        }
    }
    Tensor::new(out_shape, out)
}

fn conv2d_backward<T: Scalar>(
    kernels: &Tensor<T>,
    stride: usize,
    padding: usize,
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
    let (c_out, c_in, kh, kw) = conv_dims(kernels);
    let [_, h, w] = expect_chw("conv2d", input.shape())?;
    let [_, oh, ow] = expect_chw("conv2d grad", grad_out.shape())?;
    let xd = input.data();
    let kd = kernels.data();
    let gd = grad_out.data();

    let mut grad_k = vec![T::zero(); kernels.len()];
    let mut grad_b = vec![T::zero(); c_out];
    let mut grad_x = vec![T::zero(); input.len()];
    for co in 0..c_out {
        for i in 0..oh {
            for j in 0..ow {
                let g = gd[(co * oh + i) * ow + j];
                if g == T::zero() {
                    continue;
                }
                grad_b[co] = grad_b[co] + g;
                for ci in 0..c_in {
                    let x_base = ci * h * w;
                    let k_base = (co * c_in + ci) * kh * kw;
                    for ki in 0..kh {
                        let xi = (i * stride + ki) as isize - padding as isize;
                        if xi < 0 || xi >= h as isize {
                            continue;
                        }
                        let x_row = x_base + xi as usize * w;
                        let k_row = k_base + ki * kw;
                        for kj in 0..kw {
                            let xj = (j * stride + kj) as isize - padding as isize;
                            if xj < 0 || xj >= w as isize {
                                continue;
                            }
                            grad_k[k_row + kj] = grad_k[k_row + kj] + g * xd[x_row + xj as usize];
                            grad_x[x_row + xj as usize] =
                                grad_x[x_row + xj as usize] + g * kd[k_row + kj];
                        }
                    }
                }
            }
        }
    }
    Ok((
        vec![
            Tensor::new(kernels.shape().to_vec(), grad_k)?,
            Tensor::from_vec(grad_b),
        ],
        Tensor::new(input.shape().to_vec(), grad_x)?,
    ))
}

fn maxpool_forward<T: Scalar>(
    window: usize,
    stride: usize,
    x: &Tensor<T>,
    out_shape: Vec<usize>,
) -> Result<Tensor<T>> {
    let [c, h, w] = expect_chw("maxpool2d", x.shape())?;
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let xd = x.data();
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let base = ch * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = xd[base + i * stride * w + j * stride];
                for ki in 0..window {
                    for kj in 0..window {
                        let v = xd[base + (i * stride + ki) * w + j * stride + kj];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out[(ch * oh + i) * ow + j] = best;
            }
        }
    }
    Tensor::new(out_shape, out)
}

/// Gradient flows to the argmax of each window; on ties the first
/// position in row-major scan wins.
fn maxpool_backward<T: Scalar>(
    window: usize,
    stride: usize,
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
    let [c, h, w] = expect_chw("maxpool2d", input.shape())?;
    let [_, oh, ow] = expect_chw("maxpool2d grad", grad_out.shape())?;
    let xd = input.data();
    let gd = grad_out.data();
    let mut grad_x = vec![T::zero(); input.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best_idx = base + i * stride * w + j * stride;
                let mut best = xd[best_idx];
                for ki in 0..window {
                    for kj in 0..window {
                        let idx = base + (i * stride + ki) * w + j * stride + kj;
                        if xd[idx] > best {
                            best = xd[idx];
                            best_idx = idx;
                        }
                    }
                }
                grad_x[best_idx] = grad_x[best_idx] + gd[(ch * oh + i) * ow + j];
            }
        }
    }
    Ok((Vec::new(), Tensor::new(input.shape().to_vec(), grad_x)?))
}
