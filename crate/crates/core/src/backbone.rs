//! Tiny staged backbones (residual CNN and ViT) with an explicit stage
//! partition, a replaceable linear head and checkpoint I/O.
//!
//! A CNN stage is the stem (for stage 1) followed by one residual block; its
//! output is the post-block feature map. A ViT stage is one transformer layer,
//! and the embedding output (class token + patch tokens + positions) is an
//! additional attachment point ahead of stage 1. Stage outputs are named
//! `stage{i}` with `i` starting at 1.

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{ArrayData, Container, Record, FLAG_BUFFER, FLAG_FROZEN};
use crate::error::{Error, Result};
use crate::nn::{self, BatchNorm2d, Conv2d, LayerNorm, Linear, Module, NormMode, ResidualBlock, Slot, TransformerBlock};
use crate::tensor::{ops, Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Cnn,
    Vit,
}

/// Architecture description. Fields not used by the chosen family are ignored
/// but must still be valid when present.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub family: Family,
    /// CNN stage widths.
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    /// ViT layer count.
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_patch")]
    pub patch: usize,
    #[serde(default = "default_input")]
    pub input_size: [usize; 2],
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default)]
    pub num_classes: usize,
}

fn default_widths() -> Vec<usize> {
    vec![16, 32, 64, 128]
}
fn default_depth() -> usize {
    12
}
fn default_dim() -> usize {
    64
}
fn default_heads() -> usize {
    4
}
fn default_patch() -> usize {
    4
}
fn default_input() -> [usize; 2] {
    [32, 32]
}
fn default_in_channels() -> usize {
    3
}

impl BackboneSpec {
    /// Stem + 4 residual stages of widths 16/32/64/128 on 32×32 inputs.
    pub fn tiny_cnn(num_classes: usize) -> Self {
        Self {
            family: Family::Cnn,
            widths: default_widths(),
            depth: default_depth(),
            dim: default_dim(),
            heads: default_heads(),
            patch: default_patch(),
            input_size: default_input(),
            in_channels: 3,
            num_classes,
        }
    }

    /// Patch 4, D=64, 12 layers, 4 heads on 32×32 inputs.
    pub fn tiny_vit(num_classes: usize) -> Self {
        Self { family: Family::Vit, ..Self::tiny_cnn(num_classes) }
    }

    /// ResNet-50 stage widths (256/512/1024/2048) on 224×224 inputs, built
    /// from basic residual blocks. Used for parameter accounting.
    pub fn resnet50_profile(num_classes: usize) -> Self {
        Self { widths: vec![256, 512, 1024, 2048], input_size: [224, 224], ..Self::tiny_cnn(num_classes) }
    }

    /// DeiT-B dimensions: D=768, 12 layers, 12 heads, patch 16 on 224×224.
    pub fn deit_b_profile(num_classes: usize) -> Self {
        Self { dim: 768, depth: 12, heads: 12, patch: 16, input_size: [224, 224], ..Self::tiny_vit(num_classes) }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("backbone: {m}")));
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.in_channels == 0 || self.input_size.iter().any(|&s| s == 0) {
            return bad("input size and channels must be positive".into());
        }
        match self.family {
            Family::Cnn => {
                if self.widths.len() < 2 {
                    return bad(format!("cnn needs at least 2 stages, got {}", self.widths.len()));
                }
                if self.widths.iter().any(|&w| w == 0) {
                    return bad(format!("widths must be positive, got {:?}", self.widths));
                }
                let downsample = 1usize << (self.widths.len() - 1);
                if self.input_size.iter().any(|&s| s < downsample) {
                    return bad(format!("input {:?} too small for {} stages", self.input_size, self.widths.len()));
                }
            }
            Family::Vit => {
                if self.depth < 4 {
                    return bad(format!("vit depth must be at least 4, got {}", self.depth));
                }
                if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
                    return bad(format!("heads {} must divide dim {}", self.heads, self.dim));
                }
                if self.patch == 0 || self.input_size.iter().any(|&s| s % self.patch != 0) {
                    return bad(format!("patch {} must divide input {:?}", self.patch, self.input_size));
                }
                let g = self.input_size[0] / self.patch;
                if self.input_size[0] != self.input_size[1] || g == 0 {
                    return bad("vit input must be square".into());
                }
            }
        }
        Ok(())
    }

    pub fn num_stages(&self) -> usize {
        match self.family {
            Family::Cnn => self.widths.len(),
            Family::Vit => self.depth,
        }
    }

    /// Channel (CNN) or embedding (ViT) width at the output of stage `i` (1-based).
    pub fn stage_width(&self, i: usize) -> usize {
        match self.family {
            Family::Cnn => self.widths[i - 1],
            Family::Vit => self.dim,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self.family {
            Family::Cnn => *self.widths.last().unwrap(),
            Family::Vit => self.dim,
        }
    }

    pub fn patch_tokens(&self) -> usize {
        let g = self.input_size[0] / self.patch;
        g * g
    }

    /// sha256 over the canonical JSON encoding.
    pub fn digest(&self) -> String {
        crate::container::sha256_hex(serde_json::to_string(self).unwrap().as_bytes())
    }
}

/// Where a prompt block can be attached.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AttachPoint {
    /// Output of the ViT embedding layer (before the first transformer layer).
    Embedding,
    /// Output of stage `i`, 1-based.
    Stage(usize),
}

impl fmt::Display for AttachPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttachPoint::Embedding => write!(f, "embedding"),
            AttachPoint::Stage(i) => write!(f, "stage{i}"),
        }
    }
}

#[derive(Clone)]
pub struct CnnBody<T: Element> {
    pub stem: Conv2d<T>,
    pub stem_bn: BatchNorm2d<T>,
    pub stages: Vec<ResidualBlock<T>>,
}

#[derive(Clone)]
pub struct VitBody<T: Element> {
    pub patch_embed: Conv2d<T>,
    pub cls_token: Tensor<T>,
    pub pos_embed: Tensor<T>,
    pub layers: Vec<TransformerBlock<T>>,
    pub norm: LayerNorm<T>,
}

#[derive(Clone)]
pub enum Body<T: Element> {
    Cnn(CnnBody<T>),
    Vit(VitBody<T>),
}

/// A backbone split into stages `g_1..g_n` plus a linear classifier head.
#[derive(Clone)]
pub struct StagedModel<T: Element = f32> {
    pub spec: BackboneSpec,
    pub body: Body<T>,
    pub head: Linear<T>,
    pub norm_mode: NormMode,
}

/// One entry of the parameter registry.
#[derive(Clone, Debug)]
pub struct NamedTensor<T: Element> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub slot: Slot,
}

/// Stage outputs and logits from a forward pass.
pub struct ForwardOutput<T: Element> {
    pub stage_outputs: Vec<Tensor<T>>,
    pub logits: Tensor<T>,
}

pub type Hook<'a, T> = dyn FnMut(AttachPoint, Tensor<T>) -> Result<Tensor<T>> + 'a;

/// Builds a freshly initialized model. All parameters are trainable.
pub fn build_backbone<T: Element>(spec: &BackboneSpec, seed: u64) -> Result<StagedModel<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let body = match spec.family {
        Family::Cnn => {
            let mut stages = Vec::with_capacity(spec.widths.len());
            let stem = Conv2d::new(spec.in_channels, spec.widths[0], 3, 1, 1, false, &mut rng);
            for (i, &w) in spec.widths.iter().enumerate() {
                let (cin, stride) = if i == 0 { (spec.widths[0], 1) } else { (spec.widths[i - 1], 2) };
                stages.push(ResidualBlock::new(cin, w, stride, &mut rng));
            }
            Body::Cnn(CnnBody { stem, stem_bn: BatchNorm2d::new(spec.widths[0]), stages })
        }
        Family::Vit => {
            let d = spec.dim;
            let mut patch_embed = Conv2d::new(spec.in_channels, d, spec.patch, spec.patch, 0, true, &mut rng);
            patch_embed.weight = nn::fan_in_uniform(
                &[d, spec.in_channels, spec.patch, spec.patch],
                spec.in_channels * spec.patch * spec.patch,
                1.0,
                &mut rng,
            );
            let cls_token = Tensor::randn(&[1, 1, d], 0.02, &mut rng);
            let pos_embed = Tensor::randn(&[1, spec.patch_tokens() + 1, d], 0.02, &mut rng);
            let layers = (0..spec.depth)
                .map(|_| TransformerBlock::new(d, spec.heads, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            Body::Vit(VitBody { patch_embed, cls_token, pos_embed, layers, norm: LayerNorm::new(d) })
        }
    };
    let head = fresh_head(spec.feature_dim(), spec.num_classes, &mut rng);
    let model = StagedModel { spec: spec.clone(), body, head, norm_mode: NormMode::Frozen };
    model.set_trainable(true);
    Ok(model)
}

pub(crate) fn fresh_head<T: Element, R: rand::Rng + ?Sized>(din: usize, classes: usize, rng: &mut R) -> Linear<T> {
    Linear { weight: Tensor::uniform(&[classes, din], 1.0 / (din as f64).sqrt(), rng), bias: Tensor::zeros(&[classes]) }
}

impl<T: Element> StagedModel<T> {
    pub fn num_stages(&self) -> usize {
        self.spec.num_stages()
    }

    /// Every tensor in registry order: backbone, then head.
    pub fn named_tensors(&self) -> Vec<NamedTensor<T>> {
        let mut out = self.backbone_tensors();
        self.head.visit("head", &mut |name, t, slot| out.push(NamedTensor { name, tensor: t.clone(), slot }));
        out
    }

    pub fn backbone_tensors(&self) -> Vec<NamedTensor<T>> {
        let mut out = Vec::new();
        let mut push = |name: String, t: &Tensor<T>, slot: Slot| out.push(NamedTensor { name, tensor: t.clone(), slot });
        match &self.body {
            Body::Cnn(b) => {
                b.stem.visit("stage1.stem", &mut push);
                b.stem_bn.visit("stage1.stem_bn", &mut push);
                for (i, s) in b.stages.iter().enumerate() {
                    s.visit(&format!("stage{}.block", i + 1), &mut push);
                }
            }
            Body::Vit(b) => {
                b.patch_embed.visit("embed.patch", &mut push);
                push("embed.cls_token".into(), &b.cls_token, Slot::Param);
                push("embed.pos_embed".into(), &b.pos_embed, Slot::Param);
                for (i, l) in b.layers.iter().enumerate() {
                    l.visit(&format!("stage{}", i + 1), &mut push);
                }
                b.norm.visit("norm", &mut push);
            }
        }
        out
    }

    pub fn parameters(&self) -> Vec<NamedTensor<T>> {
        self.named_tensors().into_iter().filter(|n| n.slot == Slot::Param).collect()
    }

    pub fn total_params(&self) -> usize {
        self.parameters().iter().map(|p| p.tensor.numel()).sum()
    }

    /// Names of the backbone parameters belonging to each stage (index `i-1`
    /// for stage `i`). The CNN stem and the ViT embedding belong to stage 1;
    /// the final ViT norm belongs to the last stage.
    pub fn stage_param_names(&self) -> Vec<Vec<String>> {
        let n = self.num_stages();
        let mut groups = vec![Vec::new(); n];
        for p in self.backbone_tensors().into_iter().filter(|p| p.slot == Slot::Param) {
            let idx = if let Some(rest) = p.name.strip_prefix("stage") {
                rest.split('.').next().and_then(|s| s.parse::<usize>().ok()).unwrap_or(1) - 1
            } else if p.name.starts_with("embed.") {
                0
            } else {
                n - 1
            };
            groups[idx].push(p.name);
        }
        groups
    }

    /// Sets requires_grad on every backbone and head parameter.
    pub fn set_trainable(&self, flag: bool) {
        for p in self.parameters() {
            p.tensor.set_requires_grad(flag);
        }
    }

    pub fn set_backbone_trainable(&self, flag: bool) {
        for p in self.backbone_tensors().into_iter().filter(|p| p.slot == Slot::Param) {
            p.tensor.set_requires_grad(flag);
        }
    }

    pub fn backbone_has_trainable(&self) -> bool {
        self.backbone_tensors().iter().any(|p| p.slot == Slot::Param && p.tensor.requires_grad())
    }

    /// Replaces the classifier with a freshly initialized trainable head.
    pub fn replace_head(&mut self, num_classes: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6865_6164);
        self.head = fresh_head(self.spec.feature_dim(), num_classes, &mut rng);
        self.head.weight.set_requires_grad(true);
        self.head.bias.set_requires_grad(true);
        self.spec.num_classes = num_classes;
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.ndim() != 4 {
            return Err(Error::Rank { op: "forward", expected: 4, shape: x.shape().to_vec() });
        }
        let s = &self.spec;
        if x.dim(1) != s.in_channels {
            return Err(Error::dim("forward", "channels (axis 1)", s.in_channels, x.dim(1)));
        }
        if x.dim(2) != s.input_size[0] {
            return Err(Error::dim("forward", "height (axis 2)", s.input_size[0], x.dim(2)));
        }
        if x.dim(3) != s.input_size[1] {
            return Err(Error::dim("forward", "width (axis 3)", s.input_size[1], x.dim(3)));
        }
        Ok(())
    }

    /// Forward pass with no prompts.
    pub fn forward_collect(&self, x: &Tensor<T>) -> Result<ForwardOutput<T>> {
        self.forward_hooked(x, &mut |_, t| Ok(t))
    }

    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_collect(x)?.logits)
    }

    /// Runs the stages, passing each attachment-point feature through `hook`
    /// and feeding its result to the next stage.
    pub fn forward_hooked(&self, x: &Tensor<T>, hook: &mut Hook<'_, T>) -> Result<ForwardOutput<T>> {
        self.check_input(x)?;
        let mode = self.norm_mode;
        let mut stage_outputs = Vec::with_capacity(self.num_stages());
        let pooled = match &self.body {
            Body::Cnn(b) => {
                let mut h = ops::relu(&b.stem_bn.forward(&b.stem.forward(x)?, mode)?);
                for (i, block) in b.stages.iter().enumerate() {
                    h = hook(AttachPoint::Stage(i + 1), block.forward(&h, mode)?)?;
                    stage_outputs.push(h.clone());
                }
                ops::global_avg_pool(&h)?
            }
            Body::Vit(b) => {
                let mut h = hook(AttachPoint::Embedding, self.embed(b, x)?)?;
                for (i, layer) in b.layers.iter().enumerate() {
                    h = hook(AttachPoint::Stage(i + 1), layer.forward(&h)?)?;
                    stage_outputs.push(h.clone());
                }
                let h = b.norm.forward(&h)?;
                let cls = ops::narrow(&h, 1, 0, 1)?;
                ops::reshape(&cls, &[x.dim(0), self.spec.dim])?
            }
        };
        let logits = self.head.forward(&pooled)?;
        Ok(ForwardOutput { stage_outputs, logits })
    }

    fn embed(&self, b: &VitBody<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let n = x.dim(0);
        let d = self.spec.dim;
        let p = b.patch_embed.forward(x)?;
        let t = p.dim(2) * p.dim(3);
        let tokens = ops::permute(&ops::reshape(&p, &[n, d, t])?, &[0, 2, 1])?;
        let cls = ops::repeat_batch(&b.cls_token, n)?;
        let tokens = ops::concat(&[cls, tokens], 1)?;
        ops::add_batch_bias(&tokens, &b.pos_embed)
    }

    /// Runs stages `from+1..=n` and the head on a stage-`from` feature
    /// (`from = 0` means the embedding output for ViT).
    pub fn forward_from(&self, from: usize, h: &Tensor<T>) -> Result<Tensor<T>> {
        let mode = self.norm_mode;
        let pooled = match &self.body {
            Body::Cnn(b) => {
                let mut h = h.clone();
                for block in &b.stages[from..] {
                    h = block.forward(&h, mode)?;
                }
                ops::global_avg_pool(&h)?
            }
            Body::Vit(b) => {
                let mut h = h.clone();
                for layer in &b.layers[from..] {
                    h = layer.forward(&h)?;
                }
                let h = b.norm.forward(&h)?;
                let n = h.dim(0);
                ops::reshape(&ops::narrow(&h, 1, 0, 1)?, &[n, self.spec.dim])?
            }
        };
        self.head.forward(&pooled)
    }

    /// Converts to another precision, preserving requires_grad flags.
    pub fn cast<U: Element>(&self) -> StagedModel<U> {
        let mut out = build_backbone::<U>(&self.spec, 0).expect("spec already validated");
        out.norm_mode = self.norm_mode;
        for (dst, src) in out.named_tensors().iter().zip(self.named_tensors()) {
            let c = src.tensor.cast::<U>();
            *dst.tensor.data_mut() = c.to_vec();
            dst.tensor.set_requires_grad(src.tensor.requires_grad());
        }
        out
    }

    /// Deep copy with independent tensors.
    pub fn deep_clone(&self) -> StagedModel<T> {
        let out = build_backbone::<T>(&self.spec, 0).expect("spec already validated");
        let mut out = out;
        out.norm_mode = self.norm_mode;
        for (dst, src) in out.named_tensors().iter().zip(self.named_tensors()) {
            *dst.tensor.data_mut() = src.tensor.to_vec();
            dst.tensor.set_requires_grad(src.tensor.requires_grad());
        }
        out
    }
}

impl StagedModel<f32> {
    /// Serializes every tensor. Parameters are flagged frozen unless they
    /// currently require grad; when `freeze_all` is set every tensor is flagged
    /// frozen.
    pub fn to_container(&self, freeze_all: bool) -> Container {
        let records = self
            .named_tensors()
            .into_iter()
            .map(|n| {
                let mut flags = 0;
                if freeze_all || n.slot == Slot::Buffer || !n.tensor.requires_grad() {
                    flags |= FLAG_FROZEN;
                }
                if n.slot == Slot::Buffer {
                    flags |= FLAG_BUFFER;
                }
                Record { name: n.name, shape: n.tensor.shape().to_vec(), flags, data: ArrayData::F32(n.tensor.to_vec()) }
            })
            .collect();
        Container { meta: serde_json::to_string(&self.spec).unwrap(), records }
    }
}

/// Writes a checkpoint with every parameter marked frozen.
pub fn save_checkpoint(model: &StagedModel<f32>, path: &Path) -> Result<()> {
    model.to_container(true).write(path)
}

/// Writes a checkpoint preserving the current trainable flags.
pub fn save_checkpoint_with_flags(model: &StagedModel<f32>, path: &Path) -> Result<()> {
    model.to_container(false).write(path)
}

/// Loads a checkpoint into a model of the given spec. Shape or name
/// mismatches are reported against the first offending tensor.
pub fn load_checkpoint(path: &Path, spec: &BackboneSpec) -> Result<StagedModel<f32>> {
    let container = Container::read(path)?;
    from_container(&container, spec).map_err(|e| match e {
        Error::Parameter { .. } | Error::Config(_) => e,
        other => Error::Checkpoint { path: path.to_path_buf(), reason: other.to_string() },
    })
}

pub fn from_container(container: &Container, spec: &BackboneSpec) -> Result<StagedModel<f32>> {
    let model = build_backbone::<f32>(spec, 0)?;
    let tensors = model.named_tensors();
    for n in &tensors {
        let rec = container.get(&n.name).ok_or_else(|| Error::Parameter {
            name: n.name.clone(),
            reason: "missing from checkpoint".into(),
        })?;
        if rec.shape != n.tensor.shape() {
            return Err(Error::Parameter {
                name: n.name.clone(),
                reason: format!("shape mismatch: checkpoint {:?}, spec {:?}", rec.shape, n.tensor.shape()),
            });
        }
        let ArrayData::F32(values) = &rec.data else {
            return Err(Error::Parameter { name: n.name.clone(), reason: "expected f32 data".into() });
        };
        *n.tensor.data_mut() = values.clone();
        if n.slot == Slot::Param {
            n.tensor.set_requires_grad(!rec.frozen());
        }
    }
    if let Some(extra) = container.records.iter().find(|r| !tensors.iter().any(|n| n.name == r.name)) {
        return Err(Error::Parameter { name: extra.name.clone(), reason: "not part of the spec's architecture".into() });
    }
    let saved: BackboneSpec = serde_json::from_str(&container.meta)
        .map_err(|e| Error::Config(format!("checkpoint metadata is not a backbone spec: {e}")))?;
    if saved.digest() != spec.digest() {
        return Err(Error::Config(format!(
            "checkpoint spec digest {} differs from requested spec digest {}",
            saved.digest(),
            spec.digest()
        )));
    }
    Ok(model)
}
