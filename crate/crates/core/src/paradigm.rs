//! Tuning paradigms as trainable-parameter masks over a staged backbone.

use std::collections::BTreeMap;
use std::fmt;

use crate::backbone::{build_backbone, Family, StagedModel};
use crate::error::{Error, Result};
use crate::nn::Slot;
use crate::prompt::{attach, install_prompts, PromptSpec, PromptedModel};

#[derive(Clone, Debug, PartialEq)]
pub enum Paradigm {
    /// Whole model from random initialization.
    Scratch,
    /// Fresh head on frozen features.
    HeadRetrain,
    /// Head plus the last `k` stage groups.
    Partial(usize),
    FineTune,
    ProTune(PromptSpec),
    ProTuneFineTune(PromptSpec),
}

impl Paradigm {
    /// Parses a config name. `prompt` is used by the prompt-based paradigms.
    pub fn from_name(name: &str, prompt: PromptSpec) -> Result<Self> {
        Ok(match name {
            "scratch" => Self::Scratch,
            "head" => Self::HeadRetrain,
            "finetune" => Self::FineTune,
            "protune" => Self::ProTune(prompt),
            "protune-ft" => Self::ProTuneFineTune(prompt),
            other => match other.strip_prefix("partial-").and_then(|k| k.parse::<usize>().ok()) {
                Some(k) if k > 0 => Self::Partial(k),
                _ => {
                    return Err(Error::Config(format!(
                        "unknown paradigm `{name}` (expected scratch, head, partial-K, finetune, protune, protune-ft)"
                    )))
                }
            },
        })
    }

    pub fn name(&self) -> String {
        match self {
            Self::Scratch => "scratch".into(),
            Self::HeadRetrain => "head".into(),
            Self::Partial(k) => format!("partial-{k}"),
            Self::FineTune => "finetune".into(),
            Self::ProTune(_) => "protune".into(),
            Self::ProTuneFineTune(_) => "protune-ft".into(),
        }
    }

    pub fn needs_checkpoint(&self) -> bool {
        !matches!(self, Self::Scratch)
    }
}

impl fmt::Display for Paradigm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Backbone parameter groups used by `Partial(k)`: stages on a CNN, quarters
/// of the layer stack on a ViT (embedding with the first, final norm with the
/// last).
pub fn partial_groups<T: crate::Element>(model: &StagedModel<T>) -> Vec<Vec<String>> {
    let stages = model.stage_param_names();
    match model.spec.family {
        Family::Cnn => stages,
        Family::Vit => {
            let per = stages.len().div_ceil(4);
            stages.chunks(per).map(|c| c.concat()).collect()
        }
    }
}

/// A model prepared for one paradigm, with its mask and a byte snapshot of
/// every tensor the mask freezes.
pub struct TunableModel {
    pub model: PromptedModel<f32>,
    pub paradigm: Paradigm,
    pub mask: BTreeMap<String, bool>,
    snapshot: Vec<(String, Vec<u32>)>,
}

/// Names of mask-false tensors whose bytes changed since preparation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FrozenReport {
    pub changed: Vec<String>,
}

impl FrozenReport {
    pub fn is_clean(&self) -> bool {
        self.changed.is_empty()
    }
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

impl TunableModel {
    /// Builds the mask from the current requires_grad flags and snapshots the
    /// frozen set.
    pub fn new(model: PromptedModel<f32>, paradigm: Paradigm) -> Self {
        let tensors = model.named_tensors();
        let mask = tensors
            .iter()
            .map(|n| (n.name.clone(), n.slot == Slot::Param && n.tensor.requires_grad()))
            .collect::<BTreeMap<_, _>>();
        let snapshot = tensors
            .iter()
            .filter(|n| !mask[&n.name])
            .map(|n| (n.name.clone(), bits(&n.tensor.data())))
            .collect();
        Self { model, paradigm, mask, snapshot }
    }

    /// Mask-true tensors in registry order.
    pub fn trainable(&self) -> Vec<crate::backbone::NamedTensor<f32>> {
        self.model.named_tensors().into_iter().filter(|n| self.mask.get(&n.name).copied().unwrap_or(false)).collect()
    }

    pub fn verify_frozen(&self) -> FrozenReport {
        let current: BTreeMap<String, _> = self.model.named_tensors().into_iter().map(|n| (n.name, n.tensor)).collect();
        let changed = self
            .snapshot
            .iter()
            .filter(|(name, before)| current.get(name).is_none_or(|t| bits(&t.data()) != *before))
            .map(|(name, _)| name.clone())
            .collect();
        FrozenReport { changed }
    }
}

/// Exact element count over mask-true tensors.
pub fn count_trainable_params(tm: &TunableModel) -> Result<usize> {
    let tensors: BTreeMap<String, _> = tm.model.named_tensors().into_iter().map(|n| (n.name, n.tensor)).collect();
    let mut total = 0;
    for (name, &on) in &tm.mask {
        let t = tensors.get(name).ok_or_else(|| Error::Parameter {
            name: name.clone(),
            reason: "mask entry has no tensor in the registry".into(),
        })?;
        if on {
            total += t.numel();
        }
    }
    Ok(total)
}

/// Prepares `model` for `paradigm` with a fresh `num_classes` head.
pub fn apply_paradigm(model: StagedModel<f32>, paradigm: &Paradigm, num_classes: usize, seed: u64) -> Result<TunableModel> {
    let prepared = match paradigm {
        Paradigm::Scratch => {
            let mut spec = model.spec.clone();
            spec.num_classes = num_classes;
            let mut fresh = build_backbone::<f32>(&spec, seed)?;
            fresh.norm_mode = model.norm_mode;
            fresh.set_trainable(true);
            PromptedModel::plain(fresh)
        }
        Paradigm::HeadRetrain => {
            let mut m = model;
            m.set_backbone_trainable(false);
            m.replace_head(num_classes, seed);
            PromptedModel::plain(m)
        }
        Paradigm::Partial(k) => {
            let groups = partial_groups(&model);
            if *k == 0 || *k >= groups.len() {
                return Err(Error::Config(format!(
                    "partial-{k} needs 1 <= k < {} (use finetune to train every group)",
                    groups.len()
                )));
            }
            let mut m = model;
            m.set_backbone_trainable(false);
            let unfrozen: Vec<&String> = groups[groups.len() - k..].iter().flatten().collect();
            for p in m.backbone_tensors() {
                if unfrozen.contains(&&p.name) {
                    p.tensor.set_requires_grad(true);
                }
            }
            m.replace_head(num_classes, seed);
            PromptedModel::plain(m)
        }
        Paradigm::FineTune => {
            let mut m = model;
            m.set_trainable(true);
            m.replace_head(num_classes, seed);
            PromptedModel::plain(m)
        }
        Paradigm::ProTune(spec) => {
            model.set_backbone_trainable(false);
            install_prompts(model, spec, num_classes, seed)?
        }
        Paradigm::ProTuneFineTune(spec) => {
            model.set_trainable(true);
            attach(model, spec, num_classes, seed)?
        }
    };
    Ok(TunableModel::new(prepared, paradigm.clone()))
}
