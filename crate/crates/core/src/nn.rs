//! Layers built from the tensor operations: convolutions, linear maps,
//! frozen-statistics normalization, squeeze-and-excitation, residual and
//! pre-norm transformer blocks.
//!
//! Every layer exposes its tensors through [`Module::visit`], which yields
//! dotted names (`conv1.weight`, `se.fc2.bias`, ...) relative to the caller's
//! prefix. Running statistics are reported as [`Slot::Buffer`]; they are
//! checkpointed but never trained.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{conv, ops, Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Param,
    Buffer,
}

pub trait Module<T: Element> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>, Slot));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Uniform init with variance `gain² / fan_in`.
pub fn fan_in_uniform<T: Element, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor<T> {
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, bound, rng)
}

const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

/// How batch normalization obtains its statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NormMode {
    /// Stored running statistics; the layer is a fixed affine map of its input.
    #[default]
    Frozen,
    /// Statistics of the current batch; running statistics are updated.
    BatchStats,
}

#[derive(Clone)]
pub struct Conv2d<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Element> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        Self {
            weight: fan_in_uniform(&[cout, cin, kernel, kernel], fan_in, RELU_GAIN, rng),
            bias: bias.then(|| Tensor::zeros(&[cout])),
            stride,
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv::conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.padding)
    }
}

impl<T: Element> Module<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>, Slot)) {
        f(join(prefix, "weight"), &self.weight, Slot::Param);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b, Slot::Param);
        }
    }
}

/// Depthwise `k×k` convolution with same padding.
#[derive(Clone)]
pub struct DepthwiseConv2d<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub kernel: usize,
}

impl<T: Element> DepthwiseConv2d<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, kernel: usize, rng: &mut R) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::invalid(format!("depthwise kernel size {kernel} must be odd")));
        }
        Ok(Self {
            weight: fan_in_uniform(&[channels, 1, kernel, kernel], kernel * kernel, RELU_GAIN, rng),
            bias: Tensor::zeros(&[channels]),
            kernel,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv::depthwise_conv2d(x, &self.weight, Some(&self.bias), (self.kernel - 1) / 2)
    }
}

impl<T: Element> Module<T> for DepthwiseConv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>, Slot)) {
        f(join(prefix, "weight"), &self.weight, Slot::Param);
        f(join(prefix, "bias"), &self.bias, Slot::Param);
    }
}

#[derive(Clone)]
pub struct Linear<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> Linear<T> {
    pub fn new<R: Rng + ?Sized>(din: usize, dout: usize, rng: &mut R) -> Self {
        Self {
            weight: fan_in_uniform(&[dout, din], din, 1.0, rng),
            bias: Tensor::zeros(&[dout]),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn out_features(&self) -> usize {
        self.weight.dim(0)
    }

    /// Applies the map to the last axis of `x`, for any leading shape.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let din = self.in_features();
        let last = *x.shape().last().ok_or_else(|| Error::invalid("linear on rank-0 tensor"))?;
        if last != din {
            return Err(Error::dim("linear", format!("last axis ({})", x.ndim() - 1), din, last));
        }
        if x.ndim() == 2 {
            return ops::linear(x, &self.weight, Some(&self.bias));
        }
        let rows = x.numel() / din;
        let flat = ops::reshape(x, &[rows, din])?;
        let y = ops::linear(&flat, &self.weight, Some(&self.bias))?;
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = self.out_features();
        ops::reshape(&y, &shape)
    }
}

impl<T: Element> Module<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>, Slot)) {
        f(join(prefix, "weight"), &self.weight, Slot::Param);
        f(join(prefix, "bias"), &self.bias, Slot::Param);
    }
}

/// Batch-norm flavored normalization. In [`NormMode::Frozen`] it is an affine
/// map with constants taken from the stored statistics.
#[derive(Clone)]
pub struct BatchNorm2d<T: Element> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
}

impl<T: Element> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: NormMode) -> Result<Tensor<T>> {
        match mode {
            NormMode::Frozen => {
                let mean = self.running_mean.to_vec();
                let var = self.running_var.to_vec();
                ops::batch_norm_frozen(x, &self.gamma, &self.beta, &mean, &var, self.eps)
            }
            NormMode::BatchStats => {
                let (y, mean, var) = ops::batch_norm_train(x, &self.gamma, &self.beta, self.eps)?;
                let m = T::from_f64(self.momentum);
                let count = (x.numel() / x.dim(1)) as f64;
                let unbias = T::from_f64(if count > 1.0 { count / (count - 1.0) } else { 1.0 });
                for (r, v) in self.running_mean.data_mut().iter_mut().zip(&mean) {
                    *r = (T::one() - m) * *r + m * *v;
                }
                for (r, v) in self.running_var.data_mut().iter_mut().zip(&var) {
                    *r = (T::one() - m) * *r + m * *v * unbias;
                }
                Ok(y)
            }
        }
    }
}

impl<T: Element> Module<T> for BatchNorm2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>, Slot)) {
        f(join(prefix, "gamma"), &self.gamma, Slot::Param);
        f(join(prefix, "beta"), &self.beta, Slot::Param);
        f(join(prefix, "running_mean"), &self.running_mean, Slot::Buffer);
        f(join(prefix, "running_var"), &self.running_var, Slot::Buffer);
    }
}

/// Layer-norm flavored normalization over the last axis (per-token statistics).
#[derive(Clone)]
pub struct LayerNorm<T: Element> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub eps: f64,
}

impl<T: Element> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Tensor::full(&[dim], 1.0),
            beta: Tensor::zeros(&[dim]),
            eps: 1e-6,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::layer_norm(x, &self.gamma, &self.beta, self.eps)
    }
}

impl<T: Element> Module<T> for LayerNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>, Slot)) {
        f(join(prefix, "gamma"), &self.gamma, Slot::Param);
        f(join(prefix, "beta"), &self.beta, Slot::Param);
    }
}

/// Squeeze-and-excitation: `y = s ⊙ x`, `s = sigmoid(fc2(relu(fc1(GAP(x)))))`.
#[derive(Clone)]
pub struct SEModule<T: Element> {
    pub channels: usize,
    pub reduction: usize,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

/// Hidden width of an SE module: `⌈C / r⌉`.
pub fn se_hidden(channels: usize, reduction: usize) -> usize {
    channels.div_ceil(reduction)
}

impl<T: Element> SEModule<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, reduction: usize, rng: &mut R) -> Result<Self> {
        if channels == 0 || reduction == 0 {
            return Err(Error::invalid("SE channels and reduction must be positive"));
        }
        let hidden = se_hidden(channels, reduction);
        Ok(Self {
            channels,
            reduction,
            fc1: Linear::new(channels, hidden, rng),
            fc2: Linear::new(hidden, channels, rng),
        })
    }

    /// Per-channel scale factors `[N,C]`, each in (0,1).
    pub fn scales(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.ndim() != 4 {
            return Err(Error::Rank { op: "se_forward", expected: 4, shape: x.shape().to_vec() });
        }
        if x.dim(1) != self.channels {
            return Err(Error::dim("se_forward", "channels (axis 1)", self.channels, x.dim(1)));
        }
        let pooled = ops::global_avg_pool(x)?;
        let h = ops::relu(&self.fc1.forward(&pooled)?);
        Ok(ops::sigmoid(&self.fc2.forward(&h)?))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.scales(x)?;
        ops::channel_scale(x, &s)
    }
}

impl<T: Element> Module<T> for SEModule<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>, Slot)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }
}

#[derive(Clone)]
pub struct Shortcut<T: Element> {
    pub conv: Conv2d<T>,
    pub norm: BatchNorm2d<T>,
}

/// Basic residual block: `relu(shortcut(x) + bn2(conv2(relu(bn1(conv1(x))))))`.
#[derive(Clone)]
pub struct ResidualBlock<T: Element> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm2d<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
    /// 1×1 projection; `None` means identity.
    pub shortcut: Option<Shortcut<T>>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl<T: Element> ResidualBlock<T> {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        let shortcut = (stride != 1 || cin != cout).then(|| Shortcut {
            conv: Conv2d::new(cin, cout, 1, stride, 0, false, rng),
            norm: BatchNorm2d::new(cout),
        });
        Self {
            conv1: Conv2d::new(cin, cout, 3, stride, 1, false, rng),
            bn1: BatchNorm2d::new(cout),
            conv2: Conv2d::new(cout, cout, 3, 1, 1, false, rng),
            bn2: BatchNorm2d::new(cout),
            shortcut,
            in_channels: cin,
            out_channels: cout,
            stride,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: NormMode) -> Result<Tensor<T>> {
        if x.ndim() != 4 {
            return Err(Error::Rank { op: "residual_block", expected: 4, shape: x.shape().to_vec() });
        }
        if x.dim(1) != self.in_channels {
            return Err(Error::dim("residual_block", "channels (axis 1)", self.in_channels, x.dim(1)));
        }
        let h = ops::relu(&self.bn1.forward(&self.conv1.forward(x)?, mode)?);
        let h = self.bn2.forward(&self.conv2.forward(&h)?, mode)?;
        let skip = match &self.shortcut {
            Some(s) => s.norm.forward(&s.conv.forward(x)?, mode)?,
            None => x.clone(),
        };
        Ok(ops::relu(&ops::add(&h, &skip)?))
    }
}

impl<T: Element> Module<T> for ResidualBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>, Slot)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
        if let Some(s) = &self.shortcut {
            s.conv.visit(&join(prefix, "shortcut.conv"), f);
            s.norm.visit(&join(prefix, "shortcut.norm"), f);
        }
    }
}

/// Pre-norm transformer layer with multi-head self-attention and a GELU MLP
/// of expansion 4.
#[derive(Clone)]
pub struct TransformerBlock<T: Element> {
    pub dim: usize,
    pub heads: usize,
    pub norm1: LayerNorm<T>,
    /// Fused projection to `[q | k | v]`, output width `3·dim`.
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub norm2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Element> TransformerBlock<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid(format!("{heads} heads do not divide dim {dim}")));
        }
        Ok(Self {
            dim,
            heads,
            norm1: LayerNorm::new(dim),
            qkv: Linear::new(dim, 3 * dim, rng),
            proj: Linear::new(dim, dim, rng),
            norm2: LayerNorm::new(dim),
            fc1: Linear::new(dim, 4 * dim, rng),
            fc2: Linear::new(4 * dim, dim, rng),
        })
    }

    pub fn forward(&self, tokens: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_with_attention(tokens)?.0)
    }

    /// Also returns the attention probabilities `[N·heads, T, T]`.
    pub fn forward_with_attention(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        if x.ndim() != 3 {
            return Err(Error::Rank { op: "transformer_block", expected: 3, shape: x.shape().to_vec() });
        }
        if x.dim(2) != self.dim {
            return Err(Error::dim("transformer_block", "embed dim (axis 2)", self.dim, x.dim(2)));
        }
        let (n, t, d, h) = (x.dim(0), x.dim(1), self.dim, self.heads);
        let dh = d / h;

        let qkv = self.qkv.forward(&self.norm1.forward(x)?)?;
        let qkv = ops::reshape(&qkv, &[n, t, 3, h, dh])?;
        let qkv = ops::permute(&qkv, &[2, 0, 3, 1, 4])?;
        let qkv = ops::reshape(&qkv, &[3, n * h, t, dh])?;
        let part = |i| -> Result<Tensor<T>> { ops::reshape(&ops::narrow(&qkv, 0, i, 1)?, &[n * h, t, dh]) };
        let (q, k, v) = (part(0)?, part(1)?, part(2)?);

        let kt = ops::permute(&k, &[0, 2, 1])?;
        let scores = ops::scale_const(&ops::bmm(&q, &kt)?, 1.0 / (dh as f64).sqrt());
        let attn = ops::softmax(&scores);
        let ctx = ops::bmm(&attn, &v)?;
        let ctx = ops::permute(&ops::reshape(&ctx, &[n, h, t, dh])?, &[0, 2, 1, 3])?;
        let ctx = ops::reshape(&ctx, &[n, t, d])?;
        let x = ops::add(x, &self.proj.forward(&ctx)?)?;

        let m = self.fc2.forward(&ops::gelu(&self.fc1.forward(&self.norm2.forward(&x)?)?))?;
        Ok((ops::add(&x, &m)?, attn))
    }
}

impl<T: Element> Module<T> for TransformerBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>, Slot)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.qkv.visit(&join(prefix, "qkv"), f);
        self.proj.visit(&join(prefix, "proj"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }
}

/// Collects `(name, tensor, slot)` for every tensor of a module.
pub fn collect<T: Element>(m: &dyn Module<T>, prefix: &str) -> Vec<(String, Tensor<T>, Slot)> {
    let mut out = Vec::new();
    m.visit(prefix, &mut |name, t, slot| out.push((name, t.clone(), slot)));
    out
}
