use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use protune::backbone::BackboneSpec;
use protune::data::{self, CorruptionKind, CorruptionSpec, Dataset, CHANNELS, IMAGE_SIZE};
use protune::prompt::{count_prompt_params, BetaMode, InsertionPolicy, PromptBlock, PromptBlockConfig, PromptSpec};
use protune::{Error, Result, Tensor};

const PIXELS: usize = IMAGE_SIZE * IMAGE_SIZE;
const CLASSES: usize = 10;

/// One image of `class` from the unshifted source distribution.
fn sample(class: usize, seed: u64) -> Result<Dataset> {
    if class >= CLASSES {
        return Err(Error::Config(format!("class must be below {CLASSES}")));
    }
    let ds = data::synth_shapes(CLASSES, CLASSES, 0.0, seed)?;
    let i = ds.labels.iter().position(|&l| l == class).expect("balanced labels");
    Ok(ds.subset(&[i]))
}

/// CHW floats in `[0,1]` to row-major RGBA bytes.
fn rgba(chw: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(PIXELS * 4);
    for p in 0..PIXELS {
        for c in 0..CHANNELS {
            out.push((chw[c * PIXELS + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        out.push(255);
    }
    out
}

/// Two 32×32 images side by side as one 64×32 RGBA buffer.
fn side_by_side(left: &[u8], right: &[u8]) -> Vec<u8> {
    let row = IMAGE_SIZE * 4;
    let mut out = Vec::with_capacity(left.len() * 2);
    for y in 0..IMAGE_SIZE {
        out.extend_from_slice(&left[y * row..(y + 1) * row]);
        out.extend_from_slice(&right[y * row..(y + 1) * row]);
    }
    out
}

pub fn corruption_preview(kind: &str, severity: u8, class: usize, seed: u64) -> Result<Vec<u8>> {
    let clean = sample(class, seed)?;
    let spec = CorruptionSpec { kind: kind.parse::<CorruptionKind>()?, severity };
    let bad = data::corrupt(&clean, spec, seed)?;
    Ok(side_by_side(&rgba(clean.image(0)), &rgba(bad.image(0))))
}

pub fn corruption_curve(kind: &str, seed: u64) -> Result<Vec<f64>> {
    let kind = kind.parse::<CorruptionKind>()?;
    let ds = data::synth_shapes(16, CLASSES, 0.0, seed)?;
    (1..=5).map(|severity| Ok(data::mse(&ds, &data::corrupt(&ds, CorruptionSpec { kind, severity }, seed)?))).collect()
}

pub fn longtail(classes: usize, head: usize, imbalance: f64) -> Result<Vec<u32>> {
    if classes == 0 || head == 0 || !(imbalance >= 1.0 && imbalance.is_finite()) {
        return Err(Error::Config("need classes > 0, head > 0 and imbalance >= 1".into()));
    }
    Ok(data::longtail_profile(classes, head, imbalance).into_iter().map(|n| n as u32).collect())
}

fn block_config(channels: usize, reduction: usize, kernel: usize, se_reduction: usize, learnable: bool) -> PromptBlockConfig {
    PromptBlockConfig {
        kernel,
        se_reduction,
        beta_mode: if learnable { BetaMode::Learnable } else { BetaMode::Fixed(1.0) },
        ..PromptBlockConfig::new(channels, reduction)
    }
}

pub fn block_params(channels: usize, reduction: usize, kernel: usize, se_reduction: usize, learnable: bool) -> Result<usize> {
    let cfg = block_config(channels, reduction, kernel, se_reduction, learnable);
    cfg.validate()?;
    Ok(count_prompt_params(&cfg))
}

pub fn policy_params(family: &str, policy: &str, reduction: usize, kernel: usize) -> Result<usize> {
    let spec = match family {
        "cnn" => BackboneSpec::tiny_cnn(CLASSES),
        "vit" => BackboneSpec::tiny_vit(CLASSES),
        other => return Err(Error::Config(format!("unknown family `{other}`"))),
    };
    let block = PromptBlockConfig { kernel, ..PromptBlockConfig::new(0, reduction) };
    PromptSpec::new(policy.parse::<InsertionPolicy>()?, block).param_count(&spec)
}

pub fn blend_preview(beta: f64, kernel: usize, class: usize, seed: u64) -> Result<Vec<u8>> {
    let img = sample(class, seed)?;
    let cfg = PromptBlockConfig { kernel, se_reduction: 1, beta_mode: BetaMode::Fixed(beta), ..PromptBlockConfig::new(CHANNELS, 1) };
    let block = PromptBlock::<f32>::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let x = Tensor::new(&[1, CHANNELS, IMAGE_SIZE, IMAGE_SIZE], img.image(0).to_vec())?;
    let out = block.forward(&x)?;
    Ok(side_by_side(&rgba(img.image(0)), &rgba(&out.to_vec())))
}
