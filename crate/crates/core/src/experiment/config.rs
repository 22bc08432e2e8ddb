//! TOML experiment configuration. Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneSpec, Family};
use crate::container::sha256_hex;
use crate::data::CorruptionSpec;
use crate::error::{Error, Result};
use crate::paradigm::Paradigm;
use crate::prompt::{BetaMode, InsertionPolicy, PromptBlockConfig, PromptSpec};
use crate::train::HyperParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    /// Results directory; the `--out` flag takes precedence.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// `scratch | head | partial-K | finetune | protune | protune-ft`.
    #[serde(default = "default_paradigm")]
    pub paradigm: String,
    pub backbone: BackboneSpec,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub downstream: DownstreamConfig,
    #[serde(default)]
    pub prompt: PromptConfig,
    #[serde(default)]
    pub train: HyperParams,
}

fn default_name() -> String {
    "experiment".into()
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_paradigm() -> String {
    "protune".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub samples: usize,
    pub test_samples: usize,
    pub classes: usize,
    pub seed: u64,
    /// Source test accuracy the pretrained backbone must reach.
    pub accuracy_threshold: f64,
    /// Checkpoint path, relative to the output directory unless absolute.
    pub checkpoint: PathBuf,
    pub train: HyperParams,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            samples: 2000,
            test_samples: 500,
            classes: 10,
            seed: 1,
            accuracy_threshold: 0.9,
            checkpoint: PathBuf::from("pretrain.ckpt"),
            train: HyperParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownstreamConfig {
    pub samples: usize,
    pub test_samples: usize,
    pub classes: usize,
    pub shift: f64,
    pub seed: u64,
    /// Long-tail imbalance ratio applied to the training split.
    pub imbalance: Option<f64>,
    /// Corruption applied to the test split.
    pub corruption: Option<CorruptionSpec>,
    /// Few-shot sweep; empty means the full training split.
    pub shots: Vec<usize>,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self { samples: 500, test_samples: 500, classes: 10, shift: 0.5, seed: 2, imbalance: None, corruption: None, shots: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    /// Defaults to PerStage on CNNs and U5 on ViTs.
    pub policy: Option<String>,
    /// Defaults to 4 on CNNs and 2 on ViTs.
    pub reduction: Option<usize>,
    pub kernel: usize,
    pub se_reduction: usize,
    /// `learnable` or a fixed value.
    pub beta: String,
    pub beta_init: f64,
    pub blocks_per_point: usize,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            policy: None,
            reduction: None,
            kernel: 5,
            se_reduction: 16,
            beta: "learnable".into(),
            beta_init: 0.0,
            blocks_per_point: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let cfg = cfg.resolved();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Fills family-dependent defaults so that the digest covers them.
    pub fn resolved(mut self) -> Self {
        let family = self.backbone.family;
        self.backbone.num_classes = self.pretrain.classes;
        self.prompt.policy.get_or_insert_with(|| {
            if family == Family::Cnn { "PerStage" } else { "U5" }.to_string()
        });
        self.prompt.reduction.get_or_insert(PromptBlockConfig::for_family(family).reduction);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.backbone.validate()?;
        if self.backbone.input_size != [crate::data::IMAGE_SIZE; 2] || self.backbone.in_channels != crate::data::CHANNELS {
            return bad(format!("backbone input must be 3x{0}x{0} to match the synthetic data", crate::data::IMAGE_SIZE));
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.seeds.len() {
            return bad(format!("seeds must be distinct, got {:?}", self.seeds));
        }
        self.paradigm()?;
        let p = &self.pretrain;
        if !(2..=16).contains(&p.classes) || !(2..=16).contains(&self.downstream.classes) {
            return bad("class counts must be in [2, 16]".into());
        }
        if p.samples == 0 || p.test_samples == 0 || self.downstream.samples == 0 || self.downstream.test_samples == 0 {
            return bad("sample counts must be positive".into());
        }
        if !(0.0..=1.0).contains(&p.accuracy_threshold) {
            return bad("pretrain.accuracy_threshold must be in [0, 1]".into());
        }
        p.train.validate()?;
        self.train.validate()?;
        let d = &self.downstream;
        if !(0.0..=1.0).contains(&d.shift) {
            return bad(format!("downstream.shift must be in [0, 1], got {}", d.shift));
        }
        if let Some(ir) = d.imbalance {
            if !(ir >= 1.0 && ir.is_finite()) {
                return bad(format!("downstream.imbalance must be at least 1, got {ir}"));
            }
        }
        if let Some(c) = d.corruption {
            c.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        if d.shots.contains(&0) {
            return bad("downstream.shots entries must be positive".into());
        }
        let pr = &self.prompt;
        if !matches!(pr.reduction, Some(1 | 2 | 4)) {
            return bad(format!("prompt.reduction must be 1, 2 or 4, got {:?}", pr.reduction));
        }
        if ![3, 5, 7].contains(&pr.kernel) {
            return bad(format!("prompt.kernel must be 3, 5 or 7, got {}", pr.kernel));
        }
        if pr.se_reduction == 0 || pr.blocks_per_point == 0 {
            return bad("prompt.se_reduction and prompt.blocks_per_point must be positive".into());
        }
        self.prompt_spec()?.layout(&self.backbone)?;
        Ok(())
    }

    pub fn prompt_spec(&self) -> Result<PromptSpec> {
        let pr = &self.prompt;
        let policy: InsertionPolicy = pr.policy.as_deref().unwrap_or("PerStage").parse()?;
        let block = PromptBlockConfig {
            channels: 0,
            reduction: pr.reduction.unwrap_or(PromptBlockConfig::for_family(self.backbone.family).reduction),
            kernel: pr.kernel,
            se_reduction: pr.se_reduction,
            beta_init: pr.beta_init,
            beta_mode: pr.beta.parse::<BetaMode>()?,
        };
        Ok(PromptSpec { policy, block, blocks_per_point: pr.blocks_per_point })
    }

    pub fn paradigm(&self) -> Result<Paradigm> {
        let p = self.prompt_spec()?;
        Paradigm::from_name(&self.paradigm, p)
    }

    /// sha256 of the canonical JSON form, ignoring seeds and output location.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.seeds.clear();
        c.out_dir = None;
        sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }

    /// Digest of the parts that determine the pretrained checkpoint.
    pub fn pretrain_digest(&self) -> String {
        let v = serde_json::json!({ "backbone": self.backbone, "pretrain": self.pretrain });
        sha256_hex(v.to_string().as_bytes())
    }

    pub fn out_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from("runs").join(&self.name))
    }

    pub fn checkpoint_path(&self, out: &Path) -> PathBuf {
        if self.pretrain.checkpoint.is_absolute() {
            self.pretrain.checkpoint.clone()
        } else {
            out.join(&self.pretrain.checkpoint)
        }
    }
}
