//! Stage-wise prompt blocks and their insertion into a frozen backbone.
//!
//! A block computes `f(x) = se(conv2(relu(dw(relu(conv1(x))))))` and the
//! blended feature `x + β·f(x)` replaces the stage output it is attached to.
//! On transformer backbones the block sees the patch tokens laid out as a
//! square grid; the class token passes through unchanged.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{AttachPoint, Family, NamedTensor, StagedModel};
use crate::error::{Error, Result};
use crate::nn::{join, se_hidden, Conv2d, DepthwiseConv2d, Module, SEModule, Slot};
use crate::tensor::{ops, Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BetaMode {
    Learnable,
    Fixed(f64),
}

impl fmt::Display for BetaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BetaMode::Learnable => write!(f, "learnable"),
            BetaMode::Fixed(v) => write!(f, "{v}"),
        }
    }
}

impl FromStr for BetaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("learnable") {
            return Ok(BetaMode::Learnable);
        }
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .map(BetaMode::Fixed)
            .ok_or_else(|| Error::Config(format!("beta must be `learnable` or a finite number, got `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PromptBlockConfig {
    pub channels: usize,
    pub reduction: usize,
    pub kernel: usize,
    pub se_reduction: usize,
    /// Initial β for learnable mode.
    pub beta_init: f64,
    pub beta_mode: BetaMode,
}

impl PromptBlockConfig {
    pub fn new(channels: usize, reduction: usize) -> Self {
        Self { channels, reduction, kernel: 5, se_reduction: 16, beta_init: 0.0, beta_mode: BetaMode::Learnable }
    }

    /// Default settings for a backbone family: reduction 4 on CNNs, 2 on ViTs.
    pub fn for_family(family: Family) -> Self {
        Self::new(0, if family == Family::Cnn { 4 } else { 2 })
    }

    pub fn with_channels(mut self, channels: usize) -> Self {
        self.channels = channels;
        self
    }

    /// `C_b = ⌈C / reduction⌉`.
    pub fn bottleneck(&self) -> usize {
        self.channels.div_ceil(self.reduction).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::invalid("prompt block needs at least one channel"));
        }
        if self.reduction == 0 || self.se_reduction == 0 {
            return Err(Error::invalid("prompt reductions must be positive"));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::invalid(format!("prompt kernel {} must be odd", self.kernel)));
        }
        if let BetaMode::Fixed(v) = self.beta_mode {
            if !v.is_finite() {
                return Err(Error::invalid("fixed beta must be finite"));
            }
        }
        if !self.beta_init.is_finite() {
            return Err(Error::invalid("beta init must be finite"));
        }
        Ok(())
    }
}

/// Closed-form trainable parameter count of one block.
pub fn count_prompt_params(cfg: &PromptBlockConfig) -> usize {
    let c = cfg.channels;
    let cb = cfg.bottleneck();
    let k = cfg.kernel;
    let h = se_hidden(c, cfg.se_reduction);
    let conv1 = c * cb + cb;
    let dw = k * k * cb + cb;
    let conv2 = cb * c + c;
    let se = 2 * c * h + h + c;
    let beta = usize::from(cfg.beta_mode == BetaMode::Learnable);
    conv1 + dw + conv2 + se + beta
}

#[derive(Clone)]
pub struct PromptBlock<T: Element = f32> {
    pub config: PromptBlockConfig,
    pub conv1: Conv2d<T>,
    pub dw: DepthwiseConv2d<T>,
    pub conv2: Conv2d<T>,
    pub se: SEModule<T>,
    pub beta: Tensor<T>,
}

impl<T: Element> PromptBlock<T> {
    pub fn new<R: rand::Rng + ?Sized>(config: PromptBlockConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (c, cb) = (config.channels, config.bottleneck());
        let block = Self {
            config,
            conv1: Conv2d::new(c, cb, 1, 1, 0, true, rng),
            dw: DepthwiseConv2d::new(cb, config.kernel, rng)?,
            conv2: Conv2d::new(cb, c, 1, 1, 0, true, rng),
            se: SEModule::new(c, config.se_reduction, rng)?,
            beta: Tensor::scalar(match config.beta_mode {
                BetaMode::Learnable => config.beta_init,
                BetaMode::Fixed(v) => v,
            }),
        };
        block.visit("", &mut |_, t, _| t.set_requires_grad(true));
        block.beta.set_requires_grad(config.beta_mode == BetaMode::Learnable);
        Ok(block)
    }

    /// `f(x)`, same shape as `x`.
    pub fn prompt(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.ndim() != 4 {
            return Err(Error::Rank { op: "prompt_forward", expected: 4, shape: x.shape().to_vec() });
        }
        if x.dim(1) != self.config.channels {
            return Err(Error::dim("prompt_forward", "channels (axis 1)", self.config.channels, x.dim(1)));
        }
        let h = ops::relu(&self.conv1.forward(x)?);
        let h = ops::relu(&self.dw.forward(&h)?);
        self.se.forward(&self.conv2.forward(&h)?)
    }

    /// `x + β·f(x)`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        blend(x, &self.prompt(x)?, &self.beta)
    }

    pub fn trainable_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t, _| {
            if t.requires_grad() {
                n += t.numel()
            }
        });
        n
    }
}

impl<T: Element> Module<T> for PromptBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>, Slot)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.dw.visit(&join(prefix, "dw"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.se.visit(&join(prefix, "se"), f);
        f(join(prefix, "beta"), &self.beta, Slot::Param);
    }
}

/// `x + β·fx`.
pub fn blend<T: Element>(x: &Tensor<T>, fx: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != fx.shape() {
        return Err(Error::invalid(format!("blend shape mismatch: {:?} vs {:?}", x.shape(), fx.shape())));
    }
    ops::add(x, &ops::scale(fx, beta)?)
}

/// Splits `[N,T,D]` tokens into a `[N,D,g,g]` patch grid and, when
/// `has_cls`, the leading `[N,1,D]` class token.
pub fn tokens_to_grid<T: Element>(tokens: &Tensor<T>, has_cls: bool) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    if tokens.ndim() != 3 {
        return Err(Error::Rank { op: "tokens_to_grid", expected: 3, shape: tokens.shape().to_vec() });
    }
    let (n, t, d) = (tokens.dim(0), tokens.dim(1), tokens.dim(2));
    let skip = usize::from(has_cls);
    if t <= skip {
        return Err(Error::invalid(format!("{t} tokens leave no patch tokens")));
    }
    let patches = t - skip;
    let g = (patches as f64).sqrt().round() as usize;
    if g * g != patches {
        return Err(Error::invalid(format!("{patches} patch tokens do not form a square grid")));
    }
    let cls = if has_cls { Some(ops::narrow(tokens, 1, 0, 1)?) } else { None };
    let body = if has_cls { ops::narrow(tokens, 1, 1, patches)? } else { tokens.clone() };
    let grid = ops::reshape(&ops::permute(&body, &[0, 2, 1])?, &[n, d, g, g])?;
    Ok((grid, cls))
}

pub fn grid_to_tokens<T: Element>(grid: &Tensor<T>, cls: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    if grid.ndim() != 4 {
        return Err(Error::Rank { op: "grid_to_tokens", expected: 4, shape: grid.shape().to_vec() });
    }
    let (n, d) = (grid.dim(0), grid.dim(1));
    let tokens = ops::permute(&ops::reshape(grid, &[n, d, grid.dim(2) * grid.dim(3)])?, &[0, 2, 1])?;
    match cls {
        Some(c) => ops::concat(&[c.clone(), tokens], 1),
        None => Ok(tokens),
    }
}

/// Where prompt blocks go.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InsertionPolicy {
    /// One block after every stage (every layer on a ViT).
    PerStage,
    /// One block at the first attachment point.
    F1,
    /// Five stacked blocks at the first attachment point.
    F5,
    /// One block after the last stage.
    L1,
    /// Five stacked blocks after the last stage.
    L5,
    /// Transformer only: the embedding output and layers L/4, L/2, 3L/4, L.
    U5,
}

impl InsertionPolicy {
    pub const ALL: [InsertionPolicy; 6] =
        [Self::PerStage, Self::F1, Self::F5, Self::L1, Self::L5, Self::U5];

    pub fn name(self) -> &'static str {
        match self {
            Self::PerStage => "PerStage",
            Self::F1 => "F1",
            Self::F5 => "F5",
            Self::L1 => "L1",
            Self::L5 => "L5",
            Self::U5 => "U5",
        }
    }

    /// Attachment points in forward order, one entry per block.
    pub fn attach_points(self, model_family: Family, num_stages: usize) -> Result<Vec<AttachPoint>> {
        let n = num_stages;
        let first = match model_family {
            Family::Cnn => AttachPoint::Stage(1),
            Family::Vit => AttachPoint::Embedding,
        };
        let last = AttachPoint::Stage(n);
        Ok(match self {
            Self::PerStage => (1..=n).map(AttachPoint::Stage).collect(),
            Self::F1 => vec![first],
            Self::F5 => vec![first; 5],
            Self::L1 => vec![last],
            Self::L5 => vec![last; 5],
            Self::U5 => {
                if model_family != Family::Vit {
                    return Err(Error::Config("U5 insertion is defined for transformer backbones only".into()));
                }
                if n % 4 != 0 {
                    return Err(Error::Config(format!("U5 needs a layer count divisible by 4, got {n}")));
                }
                vec![
                    AttachPoint::Embedding,
                    AttachPoint::Stage(n / 4),
                    AttachPoint::Stage(n / 2),
                    AttachPoint::Stage(3 * n / 4),
                    AttachPoint::Stage(n),
                ]
            }
        })
    }
}

impl fmt::Display for InsertionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InsertionPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown insertion policy `{s}` (expected PerStage, F1, F5, L1, L5 or U5)")))
    }
}

/// Policy plus the per-block template (its `channels` is filled per point).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PromptSpec {
    pub policy: InsertionPolicy,
    pub block: PromptBlockConfig,
    /// Blocks stacked at each policy entry.
    pub blocks_per_point: usize,
}

impl PromptSpec {
    pub fn new(policy: InsertionPolicy, block: PromptBlockConfig) -> Self {
        Self { policy, block, blocks_per_point: 1 }
    }

    /// Block configs in forward order paired with their attachment point.
    pub fn layout(&self, model: &crate::backbone::BackboneSpec) -> Result<Vec<(AttachPoint, PromptBlockConfig)>> {
        if self.blocks_per_point == 0 {
            return Err(Error::Config("blocks_per_point must be at least 1".into()));
        }
        let points = self.policy.attach_points(model.family, model.num_stages())?;
        let mut out = Vec::new();
        for p in points {
            let width = match p {
                AttachPoint::Embedding => model.dim,
                AttachPoint::Stage(i) => model.stage_width(i),
            };
            for _ in 0..self.blocks_per_point {
                out.push((p, self.block.with_channels(width)));
            }
        }
        Ok(out)
    }

    /// Σ count_prompt_params over the layout.
    pub fn param_count(&self, model: &crate::backbone::BackboneSpec) -> Result<usize> {
        Ok(self.layout(model)?.iter().map(|(_, c)| count_prompt_params(c)).sum())
    }
}

/// A backbone with zero or more prompt blocks attached.
#[derive(Clone)]
pub struct PromptedModel<T: Element = f32> {
    pub base: StagedModel<T>,
    /// Blocks in forward order with their attachment point.
    pub blocks: Vec<(AttachPoint, PromptBlock<T>)>,
}

impl<T: Element> PromptedModel<T> {
    /// Wraps a model without prompts.
    pub fn plain(base: StagedModel<T>) -> Self {
        Self { base, blocks: Vec::new() }
    }

    pub fn is_vit(&self) -> bool {
        self.base.spec.family == Family::Vit
    }

    fn block_name(&self, idx: usize) -> String {
        let (point, _) = &self.blocks[idx];
        let pos = self.blocks[..idx].iter().filter(|(p, _)| p == point).count();
        format!("prompt.{point}.{pos}")
    }

    /// Every tensor: backbone, head, then prompt blocks.
    pub fn named_tensors(&self) -> Vec<NamedTensor<T>> {
        let mut out = self.base.named_tensors();
        for (i, (_, b)) in self.blocks.iter().enumerate() {
            b.visit(&self.block_name(i), &mut |name, t, slot| {
                out.push(NamedTensor { name, tensor: t.clone(), slot })
            });
        }
        out
    }

    pub fn prompt_tensors(&self) -> Vec<NamedTensor<T>> {
        self.named_tensors().into_iter().filter(|n| n.name.starts_with("prompt.")).collect()
    }

    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(x)?.logits)
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<crate::backbone::ForwardOutput<T>> {
        if self.blocks.is_empty() {
            return self.base.forward_collect(x);
        }
        let vit = self.is_vit();
        let blocks = &self.blocks;
        self.base.forward_hooked(x, &mut |point, h| {
            let mut here = blocks.iter().filter(|(p, _)| *p == point).map(|(_, b)| b).peekable();
            if here.peek().is_none() {
                return Ok(h);
            }
            if vit {
                let (mut grid, cls) = tokens_to_grid(&h, true)?;
                for b in here {
                    grid = b.forward(&grid)?;
                }
                grid_to_tokens(&grid, cls.as_ref())
            } else {
                let mut h = h;
                for b in here {
                    h = b.forward(&h)?;
                }
                Ok(h)
            }
        })
    }

    /// Converts precision, preserving values and requires_grad flags.
    pub fn cast<U: Element>(&self) -> PromptedModel<U> {
        let base = self.base.cast::<U>();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let blocks = self
            .blocks
            .iter()
            .map(|(p, b)| (*p, PromptBlock::<U>::new(b.config, &mut rng).expect("validated config")))
            .collect();
        let out = PromptedModel { base, blocks };
        for (dst, src) in out.prompt_tensors().iter().zip(self.prompt_tensors()) {
            *dst.tensor.data_mut() = src.tensor.cast::<U>().to_vec();
            dst.tensor.set_requires_grad(src.tensor.requires_grad());
        }
        out
    }
}

/// Attaches prompt blocks to a frozen backbone and replaces the head with a
/// fresh trainable classifier for `num_classes` outputs.
pub fn install_prompts(base: StagedModel<f32>, spec: &PromptSpec, num_classes: usize, seed: u64) -> Result<PromptedModel<f32>> {
    if base.backbone_has_trainable() {
        let name = base
            .backbone_tensors()
            .into_iter()
            .find(|p| p.slot == Slot::Param && p.tensor.requires_grad())
            .map(|p| p.name)
            .unwrap_or_default();
        return Err(Error::Parameter {
            name,
            reason: "backbone must be frozen before installing prompts (use protune-ft for joint training)".into(),
        });
    }
    attach(base, spec, num_classes, seed)
}

/// Like [`install_prompts`] without the frozen-backbone precondition.
pub fn attach<T: Element>(mut base: StagedModel<T>, spec: &PromptSpec, num_classes: usize, seed: u64) -> Result<PromptedModel<T>> {
    let layout = spec.layout(&base.spec)?;
    base.replace_head(num_classes, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7072_6f6d_7074);
    let blocks = layout
        .into_iter()
        .map(|(p, cfg)| Ok((p, PromptBlock::new(cfg, &mut rng)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(PromptedModel { base, blocks })
}
