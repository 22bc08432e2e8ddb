//! Acceptance suite: one line per criterion, non-zero exit on any failure.
//!
//! Runs without the libtest harness so the per-criterion lines always reach
//! the output. Positional arguments filter criteria by name substring.

use std::cell::OnceCell;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use protune::backbone::{build_backbone, from_container, AttachPoint, BackboneSpec, Family, StagedModel};
use protune::container::Container;
use protune::data::{corrupt, longtail_profile, make_longtail, mse, synth_shapes, CorruptionKind, CorruptionSpec};
use protune::experiment::run::BETA_SETTINGS;
use protune::experiment::{cmd_ablate, cmd_pretrain, cmd_report, cmd_tune, read_records, AblationKind, ExperimentConfig};
use protune::nn::se_hidden;
use protune::paradigm::{apply_paradigm, count_trainable_params, Paradigm, TunableModel};
use protune::prompt::{attach, BetaMode, InsertionPolicy, PromptBlockConfig, PromptSpec};
use protune::tensor::gradcheck::{grad_check, grad_check_report};
use protune::tensor::{conv, ops, Tensor};
use protune::train::{train, HyperParams};

/// Finite-difference agreement required of every op at f64.
const GRAD_TOL: f64 = 1e-6;
const GRAD_SEEDS: u64 = 50;
/// Whole-model checks measure the error over the concatenated gradient with a
/// smaller step: the frozen backbone has hundreds of ReLUs, and a wider
/// stencil regularly straddles one of their kinks.
const MODEL_EPS: f64 = 1e-6;
/// Reference-scale totals and the allowed relative deviation.
const RESNET50_PERSTAGE_TOTAL: f64 = 3.82e6;
const DEIT_B_ONE_BLOCK_TOTAL: f64 = 0.69e6;
const RECONCILE_TOL: f64 = 0.10;
/// Regression floor for the mean ProTune minus HeadRetrain accuracy. The first
/// validated run measured +0.1440 (head 0.6360, protune 0.7800).
const TRANSFER_MARGIN_FLOOR: f64 = 0.14;
const PROTUNE_PARAM_FRACTION: f64 = 0.25;

type Outcome = std::result::Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn config_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

struct Pretrained {
    cfg: ExperimentConfig,
    checkpoint: PathBuf,
    container: Container,
    source_accuracy: f64,
}

struct Ctx {
    dir: tempfile::TempDir,
    pretrained: OnceCell<std::result::Result<Pretrained, String>>,
}

impl Ctx {
    /// The shipped TinyCNN config, pretrained once and shared.
    fn pretrained(&self) -> std::result::Result<&Pretrained, String> {
        self.pretrained
            .get_or_init(|| {
                let cfg = ExperimentConfig::load(&config_dir().join("tiny_cnn_protune.toml")).map_err(err)?;
                let out = self.dir.path().join("pretrain");
                let o = cmd_pretrain(&cfg, &out).map_err(err)?;
                let container = Container::read(&o.checkpoint).map_err(err)?;
                Ok(Pretrained { cfg, checkpoint: o.checkpoint, container, source_accuracy: o.source_accuracy })
            })
            .as_ref()
            .map_err(Clone::clone)
    }

    /// A shipped config pointed at the shared checkpoint.
    fn config(&self, file: &str) -> std::result::Result<ExperimentConfig, String> {
        let p = self.pretrained()?;
        let mut cfg = ExperimentConfig::load(&config_dir().join(file)).map_err(err)?;
        cfg.pretrain.checkpoint = p.checkpoint.clone();
        Ok(cfg)
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

// ---------------------------------------------------------------------------
// 1. gradients

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, rng)
}

/// Values bounded away from zero so that ReLU kinks stay outside the
/// finite-difference stencil.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.05..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, v).unwrap()
}

fn jitter(params: &[Tensor<f64>], rng: &mut ChaCha8Rng) {
    for p in params {
        let j = Tensor::<f64>::uniform(p.shape(), 0.1, rng).to_vec();
        p.data_mut().iter_mut().zip(j).for_each(|(v, j)| *v += j);
    }
}

type OpCheck = (&'static str, Box<dyn Fn(&mut ChaCha8Rng) -> protune::Result<f64>>);

fn op_checks() -> Vec<OpCheck> {
    fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
        (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(3..6), rng.random_range(3..6))
    }
    vec![
        ("add", Box::new(|r| {
            let (a, b) = (rand_t(&[3, 4], r), rand_t(&[3, 4], r));
            grad_check(|t| ops::add(&t[0], &t[1]), &[a, b])
        })),
        ("mul", Box::new(|r| {
            let (a, b) = (rand_t(&[2, 5], r), rand_t(&[2, 5], r));
            grad_check(|t| ops::mul(&t[0], &t[1]), &[a, b])
        })),
        ("scale", Box::new(|r| {
            let (a, s) = (rand_t(&[2, 3, 2], r), rand_t(&[1], r));
            grad_check(|t| ops::scale(&t[0], &t[1]), &[a, s])
        })),
        ("scale_const", Box::new(|r| {
            let c = r.random_range(-2.0..2.0);
            grad_check(|t| Ok(ops::scale_const(&t[0], c)), &[rand_t(&[4, 3], r)])
        })),
        ("relu", Box::new(|r| grad_check(|t| Ok(ops::relu(&t[0])), &[off_zero(&[3, 5], r)]))),
        ("sigmoid", Box::new(|r| grad_check(|t| Ok(ops::sigmoid(&t[0])), &[rand_t(&[3, 5], r)]))),
        ("gelu", Box::new(|r| grad_check(|t| Ok(ops::gelu(&t[0])), &[rand_t(&[3, 5], r)]))),
        ("sum", Box::new(|r| grad_check(|t| Ok(ops::sum(&t[0])), &[rand_t(&[2, 3, 4], r)]))),
        ("mean", Box::new(|r| grad_check(|t| Ok(ops::mean(&t[0])), &[rand_t(&[2, 3, 4], r)]))),
        ("reshape", Box::new(|r| grad_check(|t| ops::reshape(&t[0], &[4, 6]), &[rand_t(&[2, 3, 4], r)]))),
        ("permute", Box::new(|r| grad_check(|t| ops::permute(&t[0], &[2, 0, 1]), &[rand_t(&[2, 3, 4], r)]))),
        ("narrow", Box::new(|r| {
            let start = r.random_range(0..3);
            grad_check(|t| ops::narrow(&t[0], 1, start, 2), &[rand_t(&[2, 5, 3], r)])
        })),
        ("concat", Box::new(|r| {
            let (a, b) = (rand_t(&[2, 3, 2], r), rand_t(&[2, 1, 2], r));
            grad_check(|t| ops::concat(&[t[0].clone(), t[1].clone()], 1), &[a, b])
        })),
        ("repeat_batch", Box::new(|r| grad_check(|t| ops::repeat_batch(&t[0], 3), &[rand_t(&[1, 2, 3], r)]))),
        ("add_batch_bias", Box::new(|r| {
            let (x, b) = (rand_t(&[3, 2, 4], r), rand_t(&[1, 2, 4], r));
            grad_check(|t| ops::add_batch_bias(&t[0], &t[1]), &[x, b])
        })),
        ("linear", Box::new(|r| {
            let (x, w, b) = (rand_t(&[3, 4], r), rand_t(&[5, 4], r), rand_t(&[5], r));
            grad_check(|t| ops::linear(&t[0], &t[1], Some(&t[2])), &[x, w, b])
        })),
        ("bmm", Box::new(|r| {
            let (a, b) = (rand_t(&[2, 3, 4], r), rand_t(&[2, 4, 5], r));
            grad_check(|t| ops::bmm(&t[0], &t[1]), &[a, b])
        })),
        ("softmax", Box::new(|r| grad_check(|t| Ok(ops::softmax(&t[0])), &[rand_t(&[3, 6], r)]))),
        ("layer_norm", Box::new(|r| {
            let (x, g, b) = (rand_t(&[2, 3, 6], r), rand_t(&[6], r), rand_t(&[6], r));
            grad_check(|t| ops::layer_norm(&t[0], &t[1], &t[2], 1e-5), &[x, g, b])
        })),
        ("batch_norm_frozen", Box::new(|r| {
            let (n, c, h, w) = dims(r);
            let (x, g, b) = (rand_t(&[n, c, h, w], r), rand_t(&[c], r), rand_t(&[c], r));
            let mean: Vec<f64> = (0..c).map(|_| r.random_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..c).map(|_| r.random_range(0.5..2.0)).collect();
            grad_check(|t| ops::batch_norm_frozen(&t[0], &t[1], &t[2], &mean, &var, 1e-5), &[x, g, b])
        })),
        ("batch_norm_train", Box::new(|r| {
            let (n, c, h, w) = dims(r);
            let (x, g, b) = (rand_t(&[n + 1, c, h, w], r), rand_t(&[c], r), rand_t(&[c], r));
            grad_check(|t| Ok(ops::batch_norm_train(&t[0], &t[1], &t[2], 1e-5)?.0), &[x, g, b])
        })),
        ("global_avg_pool", Box::new(|r| {
            let (n, c, h, w) = dims(r);
            grad_check(|t| ops::global_avg_pool(&t[0]), &[rand_t(&[n, c, h, w], r)])
        })),
        ("channel_scale", Box::new(|r| {
            let (n, c, h, w) = dims(r);
            let (x, s) = (rand_t(&[n, c, h, w], r), rand_t(&[n, c], r));
            grad_check(|t| ops::channel_scale(&t[0], &t[1]), &[x, s])
        })),
        ("softmax_cross_entropy", Box::new(|r| {
            let labels: Vec<usize> = (0..4).map(|_| r.random_range(0..5)).collect();
            grad_check(|t| ops::softmax_cross_entropy(&t[0], &labels), &[rand_t(&[4, 5], r)])
        })),
        ("conv2d", Box::new(|r| {
            let (n, c, h, w) = dims(r);
            let cout = r.random_range(1..4);
            let k = [1, 3][r.random_range(0..2)];
            let stride = r.random_range(1..3);
            let pad = k / 2;
            let (x, wt, b) = (rand_t(&[n, c, h, w], r), rand_t(&[cout, c, k, k], r), rand_t(&[cout], r));
            grad_check(|t| conv::conv2d(&t[0], &t[1], Some(&t[2]), stride, pad), &[x, wt, b])
        })),
        ("depthwise_conv2d", Box::new(|r| {
            let (n, c, h, w) = dims(r);
            let k = [1, 3, 5][r.random_range(0..3)];
            let (x, wt, b) = (rand_t(&[n, c, h, w], r), rand_t(&[c, 1, k, k], r), rand_t(&[c], r));
            grad_check(|t| conv::depthwise_conv2d(&t[0], &t[1], Some(&t[2]), k / 2), &[x, wt, b])
        })),
    ]
}

fn small_prompted(family: Family, seed: u64) -> protune::Result<(protune::prompt::PromptedModel<f64>, [usize; 3])> {
    let spec = match family {
        Family::Cnn => BackboneSpec { widths: vec![4, 8], input_size: [8, 8], ..BackboneSpec::tiny_cnn(4) },
        Family::Vit => BackboneSpec { dim: 8, depth: 4, heads: 2, patch: 4, input_size: [8, 8], ..BackboneSpec::tiny_vit(4) },
    };
    let m = build_backbone::<f64>(&spec, seed)?;
    m.set_trainable(false);
    let policy = if family == Family::Vit { InsertionPolicy::U5 } else { InsertionPolicy::PerStage };
    let block = PromptBlockConfig { kernel: 3, se_reduction: 2, beta_init: 0.5, ..PromptBlockConfig::for_family(family) };
    Ok((attach(m, &PromptSpec::new(policy, block), 3, seed)?, [3, 8, 8]))
}

fn criterion_gradients(_: &Ctx) -> Outcome {
    let start = Instant::now();
    let checks = op_checks();
    let mut worst = (0.0f64, "");
    for seed in 0..GRAD_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        for (name, f) in &checks {
            let e = f(&mut rng).map_err(|e| format!("{name} seed {seed}: {e}"))?;
            if e > worst.0 {
                worst = (e, name);
            }
            ensure(e <= GRAD_TOL, || format!("{name} seed {seed}: relative error {e:.3e}"))?;
        }
        for family in [Family::Cnn, Family::Vit] {
            let (pm, [c, h, w]) = small_prompted(family, seed).map_err(err)?;
            let params: Vec<Tensor<f64>> =
                pm.named_tensors().into_iter().filter(|n| n.tensor.requires_grad()).map(|n| n.tensor).collect();
            jitter(&params, &mut rng);
            let x = rand_t(&[2, c, h, w], &mut rng);
            let mut inputs = params;
            inputs.push(x);
            let labels = [rng.random_range(0..3), rng.random_range(0..3)];
            let e = grad_check_report(
                |t| ops::softmax_cross_entropy(&pm.logits(t.last().unwrap())?, &labels),
                &inputs,
                MODEL_EPS,
            )
            .map_err(err)?
            .global_error;
            if e > worst.0 {
                worst = (e, "prompted forward");
            }
            ensure(e <= GRAD_TOL, || format!("prompted {family:?} seed {seed}: relative error {e:.3e}"))?;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 120.0, || format!("took {secs:.0}s"))?;
    Ok(format!(
        "{} ops + prompted CNN/ViT x {GRAD_SEEDS} seeds, worst {:.2e} ({}), {secs:.0}s",
        checks.len(),
        worst.0,
        worst.1
    ))
}

// ---------------------------------------------------------------------------
// 2. frozen invariance

fn backbone_bytes(m: &StagedModel<f32>) -> Vec<(String, Vec<u32>)> {
    m.backbone_tensors().into_iter().map(|n| (n.name, n.tensor.to_vec().iter().map(|v| v.to_bits()).collect())).collect()
}

fn frozen_run(model: StagedModel<f32>, steps: usize) -> std::result::Result<String, String> {
    let family = model.spec.family;
    let before = backbone_bytes(&model);
    let policy = if family == Family::Vit { InsertionPolicy::U5 } else { InsertionPolicy::PerStage };
    let ps = PromptSpec::new(policy, PromptBlockConfig::for_family(family));
    let mut tm = apply_paradigm(model, &Paradigm::ProTune(ps), 10, 0).map_err(err)?;
    let ds = synth_shapes(256, 10, 0.5, 3).map_err(err)?;
    let hp = HyperParams { lr: 0.02, batch_size: 8, steps: Some(steps), ..HyperParams::default() };
    let r = train(&mut tm, &ds, None, &hp, 0).map_err(err)?;
    ensure(r.steps == steps, || format!("{family:?}: ran {} steps", r.steps))?;
    ensure(r.frozen.is_clean(), || format!("{family:?}: verify_frozen reports {:?}", r.frozen.changed))?;
    let after = backbone_bytes(&tm.model.base);
    ensure(before == after, || format!("{family:?}: backbone bytes differ"))?;
    let beta_moved = tm.model.blocks.iter().any(|(_, b)| b.beta.item() != 0.0);
    ensure(beta_moved, || format!("{family:?}: prompts did not train"))?;
    Ok(format!("{family:?} {} tensors unchanged", before.len()))
}

fn criterion_frozen(ctx: &Ctx) -> Outcome {
    let start = Instant::now();
    let p = ctx.pretrained()?;
    let cnn = from_container(&p.container, &p.cfg.backbone).map_err(err)?;
    let a = frozen_run(cnn, 500)?;
    let vit = build_backbone::<f32>(&BackboneSpec::tiny_vit(10), 4).map_err(err)?;
    vit.set_trainable(false);
    let b = frozen_run(vit, 500)?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 300.0, || format!("took {secs:.0}s"))?;
    Ok(format!("500 steps each: {a}; {b}; {secs:.0}s"))
}

// ---------------------------------------------------------------------------
// 3. β = 0 collapse

fn criterion_collapse(ctx: &Ctx) -> Outcome {
    let p = ctx.pretrained()?;
    for family in [Family::Cnn, Family::Vit] {
        let base = match family {
            Family::Cnn => from_container(&p.container, &p.cfg.backbone).map_err(err)?,
            Family::Vit => {
                let m = build_backbone::<f32>(&BackboneSpec::tiny_vit(10), 8).map_err(err)?;
                m.set_trainable(false);
                m
            }
        };
        let reference = base.deep_clone();
        let policy = if family == Family::Vit { InsertionPolicy::U5 } else { InsertionPolicy::PerStage };
        let ps = PromptSpec::new(policy, PromptBlockConfig::for_family(family));
        let pm = attach(base, &ps, 7, 21).map_err(err)?;
        let mut reference = reference;
        reference.replace_head(7, 21);
        ensure(pm.base.head.weight.to_vec() == reference.head.weight.to_vec(), || "head init differs".into())?;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for chunk in 0..10 {
            let x = if chunk % 2 == 0 {
                Tensor::<f32>::uniform(&[10, 3, 32, 32], 1.0, &mut rng)
            } else {
                Tensor::<f32>::randn(&[10, 3, 32, 32], 2.0, &mut rng)
            };
            let a: Vec<u32> = pm.logits(&x).map_err(err)?.to_vec().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = reference.logits(&x).map_err(err)?.to_vec().iter().map(|v| v.to_bits()).collect();
            ensure(a == b, || format!("{family:?}: logits differ in chunk {chunk}"))?;
        }
    }
    Ok("100 inputs per backbone, logits bitwise equal (CNN, ViT)".into())
}

// ---------------------------------------------------------------------------
// 4. parameter accounting

/// Written out from the block structure, independent of the library formula.
fn block_params_by_hand(c: usize, reduction: usize, k: usize, r_se: usize, learnable: bool) -> usize {
    let cb = c.div_ceil(reduction);
    let h = se_hidden(c, r_se);
    (c * cb + cb) + (cb * k * k + cb) + (cb * c + c) + (c * h + h) + (h * c + c) + usize::from(learnable)
}

fn brute_force(tm: &TunableModel) -> usize {
    tm.model.named_tensors().iter().filter(|n| n.tensor.requires_grad()).map(|n| n.tensor.numel()).sum()
}

fn criterion_accounting(_: &Ctx) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut n_configs = 0;
    for i in 0..24 {
        let family = if i % 2 == 0 { Family::Cnn } else { Family::Vit };
        let spec = match family {
            Family::Cnn => {
                let stages = rng.random_range(2..5);
                let widths = (0..stages).map(|_| rng.random_range(2..24)).collect();
                BackboneSpec { widths, ..BackboneSpec::tiny_cnn(rng.random_range(2..12)) }
            }
            Family::Vit => {
                let heads = rng.random_range(1..4);
                BackboneSpec {
                    dim: heads * rng.random_range(2..8),
                    heads,
                    depth: 4 * rng.random_range(1..3),
                    ..BackboneSpec::tiny_vit(rng.random_range(2..12))
                }
            }
        };
        let policies: &[InsertionPolicy] = match family {
            Family::Cnn => &[InsertionPolicy::PerStage, InsertionPolicy::F1, InsertionPolicy::F5, InsertionPolicy::L1, InsertionPolicy::L5],
            Family::Vit => &InsertionPolicy::ALL,
        };
        let learnable = rng.random_bool(0.5);
        let block = PromptBlockConfig {
            channels: 0,
            reduction: [1, 2, 4][rng.random_range(0..3)],
            kernel: [3, 5, 7][rng.random_range(0..3)],
            se_reduction: rng.random_range(1..17),
            beta_init: 0.0,
            beta_mode: if learnable { BetaMode::Learnable } else { BetaMode::Fixed(0.5) },
        };
        let ps = PromptSpec { policy: policies[rng.random_range(0..policies.len())], block, blocks_per_point: rng.random_range(1..4) };
        let k = spec.num_stages();
        let paradigms = [
            Paradigm::Scratch,
            Paradigm::HeadRetrain,
            Paradigm::FineTune,
            Paradigm::ProTune(ps),
            Paradigm::ProTuneFineTune(ps),
        ];
        let classes = rng.random_range(2..20);
        for paradigm in paradigms.into_iter().chain((k > 1).then_some(Paradigm::Partial(1))) {
            let m = build_backbone::<f32>(&spec, i).map_err(err)?;
            m.set_trainable(false);
            let tm = apply_paradigm(m, &paradigm, classes, i).map_err(err)?;
            let counted = count_trainable_params(&tm).map_err(err)?;
            let brute = brute_force(&tm);
            ensure(counted == brute, || format!("config {i} {}: counted {counted}, enumerated {brute}", paradigm.name()))?;
            if let Paradigm::ProTune(ps) = &paradigm {
                let widths: Vec<usize> = ps.layout(&spec).map_err(err)?.iter().map(|(_, c)| c.channels).collect();
                let by_hand: usize = widths
                    .iter()
                    .map(|&c| block_params_by_hand(c, block.reduction, block.kernel, block.se_reduction, learnable))
                    .sum::<usize>()
                    + spec.feature_dim() * classes
                    + classes;
                ensure(counted == by_hand, || format!("config {i}: counted {counted}, by hand {by_hand}"))?;
            }
            n_configs += 1;
        }
    }

    let r50 = build_backbone::<f32>(&BackboneSpec::resnet50_profile(100), 0).map_err(err)?;
    r50.set_trainable(false);
    let ps = PromptSpec::new(InsertionPolicy::PerStage, PromptBlockConfig::new(0, 4));
    let tm = apply_paradigm(r50, &Paradigm::ProTune(ps), 100, 0).map_err(err)?;
    let r50_total = count_trainable_params(&tm).map_err(err)?;
    ensure(r50_total == brute_force(&tm), || "resnet50 profile enumeration mismatch".into())?;
    drop(tm);
    let r50_dev = r50_total as f64 / RESNET50_PERSTAGE_TOTAL - 1.0;

    let deit = build_backbone::<f32>(&BackboneSpec::deit_b_profile(100), 0).map_err(err)?;
    deit.set_trainable(false);
    let ps = PromptSpec::new(InsertionPolicy::F1, PromptBlockConfig::new(0, 2));
    let tm = apply_paradigm(deit, &Paradigm::ProTune(ps), 100, 0).map_err(err)?;
    let deit_total = count_trainable_params(&tm).map_err(err)?;
    drop(tm);
    let deit_dev = deit_total as f64 / DEIT_B_ONE_BLOCK_TOTAL - 1.0;

    ensure(r50_dev.abs() <= RECONCILE_TOL, || format!("resnet50 profile {r50_total} ({:+.1}%)", r50_dev * 100.0))?;
    ensure(deit_dev.abs() <= RECONCILE_TOL, || format!("deit-b profile {deit_total} ({:+.1}%)", deit_dev * 100.0))?;
    Ok(format!(
        "{n_configs} paradigm configs exact; resnet50 profile {r50_total} ({:+.1}%), deit-b profile {deit_total} ({:+.1}%)",
        r50_dev * 100.0,
        deit_dev * 100.0
    ))
}

// ---------------------------------------------------------------------------
// 5. insertion equalities

fn criterion_positions(_: &Ctx) -> Outcome {
    use InsertionPolicy::*;
    let mut notes = Vec::new();
    for spec in [BackboneSpec::tiny_vit(10), BackboneSpec::deit_b_profile(100)] {
        let block = PromptBlockConfig::for_family(Family::Vit);
        let n = |p| PromptSpec::new(p, block).param_count(&spec).map_err(err);
        ensure(n(F1)? == n(L1)?, || "F1 != L1".into())?;
        ensure(n(F5)? == n(L5)? && n(L5)? == n(U5)?, || "F5, L5, U5 differ".into())?;
        notes.push(format!("D={}: F1 {} F5 {}", spec.dim, n(F1)?, n(F5)?));
    }
    let u5 = U5.attach_points(Family::Vit, 12).map_err(err)?;
    let expected =
        vec![AttachPoint::Embedding, AttachPoint::Stage(3), AttachPoint::Stage(6), AttachPoint::Stage(9), AttachPoint::Stage(12)];
    ensure(u5 == expected, || format!("U5 on 12 layers = {u5:?}"))?;
    ensure(U5.attach_points(Family::Cnn, 4).is_err(), || "U5 accepted on a CNN".into())?;
    Ok(format!("{}; U5 = {{embedding, 3, 6, 9, 12}}", notes.join(", ")))
}

// ---------------------------------------------------------------------------
// 6. long-tail profile

fn criterion_longtail(_: &Ctx) -> Outcome {
    let p = longtail_profile(10, 5000, 100.0);
    ensure(p[0] == 5000 && p[9] == 50, || format!("head {} tail {}", p[0], p[9]))?;
    for (i, &n) in p.iter().enumerate() {
        let exact = 5000.0 * 100f64.powf(-(i as f64) / 9.0);
        ensure((n as f64 - exact).abs() <= 1.0, || format!("class {i}: {n} vs {exact:.2}"))?;
    }
    // The sampler realises the profile on an actual dataset.
    let ds = synth_shapes(400, 4, 0.0, 0).map_err(err)?;
    let lt = make_longtail(&ds, 10.0, 0).map_err(err)?;
    let want = longtail_profile(4, 100, 10.0);
    ensure(lt.class_counts() == want, || format!("sampled {:?}, want {want:?}", lt.class_counts()))?;
    Ok(format!("{p:?}"))
}

// ---------------------------------------------------------------------------
// 7. transfer trend

fn criterion_transfer(ctx: &Ctx) -> Outcome {
    let start = Instant::now();
    let p = ctx.pretrained()?;
    let mut means = Vec::new();
    let mut params = Vec::new();
    for file in ["tiny_cnn_head.toml", "tiny_cnn_protune.toml"] {
        let cfg = ctx.config(file)?;
        ensure(cfg.seeds.len() == 3, || format!("{file}: expected 3 seeds"))?;
        let runs = cmd_tune(&cfg, &ctx.out("transfer"), 1).map_err(err)?;
        means.push(runs.iter().map(|r| r.record.accuracy).sum::<f64>() / runs.len() as f64);
        params.push(runs[0].record.trainable_params);
    }
    let cfg = ctx.config("tiny_cnn_finetune.toml")?;
    let model = from_container(&p.container, &cfg.backbone).map_err(err)?;
    let ft = count_trainable_params(&apply_paradigm(model, &cfg.paradigm().map_err(err)?, cfg.downstream.classes, 0).map_err(err)?)
        .map_err(err)?;
    let (head, pro) = (means[0], means[1]);
    let margin = pro - head;
    let frac = params[1] as f64 / ft as f64;
    let secs = start.elapsed().as_secs_f64();
    let summary = format!(
        "source acc {:.3}; head {head:.4}, protune {pro:.4}, margin {margin:+.4} (floor {TRANSFER_MARGIN_FLOOR}); params {} / finetune {ft} = {:.1}%; {secs:.0}s",
        p.source_accuracy,
        params[1],
        frac * 100.0
    );
    ensure(pro >= head, || format!("ordering violated: {summary}"))?;
    ensure(margin >= TRANSFER_MARGIN_FLOOR, || format!("below pinned margin: {summary}"))?;
    ensure(frac < PROTUNE_PARAM_FRACTION, || format!("too many params: {summary}"))?;
    ensure(secs < 900.0, || format!("too slow: {summary}"))?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// 8. few-shot sweep

fn fewshot_curves(ctx: &Ctx, out: &Path) -> std::result::Result<Vec<(String, usize, f64)>, String> {
    for paradigm in ["head", "protune"] {
        let mut cfg = ctx.config("tiny_cnn_fewshot.toml")?;
        cfg.paradigm = paradigm.into();
        cfg.seeds = vec![0];
        cmd_tune(&cfg, out, 1).map_err(err)?;
    }
    let report = cmd_report(out).map_err(err)?;
    ensure(report.plot.as_ref().is_some_and(|p| p.exists()), || "no plot written".into())?;
    Ok(report.summary.iter().map(|r| (r.paradigm.clone(), r.shots.unwrap_or(0), r.mean_accuracy)).collect())
}

fn criterion_fewshot(ctx: &Ctx) -> Outcome {
    let start = Instant::now();
    let first = fewshot_curves(ctx, &ctx.out("fewshot-a"))?;
    for paradigm in ["head", "protune"] {
        let ks: Vec<usize> = first.iter().filter(|r| r.0 == paradigm).map(|r| r.1).collect();
        ensure(ks == [1, 2, 4, 8, 16], || format!("{paradigm}: shots {ks:?}"))?;
    }
    let csv_a = std::fs::read(ctx.out("fewshot-a").join("fewshot.csv")).map_err(err)?;
    let replay = fewshot_curves(ctx, &ctx.out("fewshot-b"))?;
    let csv_b = std::fs::read(ctx.out("fewshot-b").join("fewshot.csv")).map_err(err)?;
    ensure(first == replay && csv_a == csv_b, || "replay produced different curves".into())?;
    let fmt = |p: &str| first.iter().filter(|r| r.0 == p).map(|r| format!("{:.2}", r.2)).collect::<Vec<_>>().join(" ");
    Ok(format!("k=1..16 head [{}] protune [{}], replay identical, {:.0}s", fmt("head"), fmt("protune"), start.elapsed().as_secs_f64()))
}

// ---------------------------------------------------------------------------
// 9. ablations

fn ablation_base(ctx: &Ctx) -> std::result::Result<ExperimentConfig, String> {
    let mut cfg = ctx.config("tiny_cnn_protune.toml")?;
    cfg.seeds = vec![0];
    cfg.downstream.test_samples = 200;
    cfg.train.batch_size = 16;
    cfg.train.steps = Some(40);
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

fn criterion_ablation(ctx: &Ctx) -> Outcome {
    let start = Instant::now();
    let cfg = ablation_base(ctx)?;
    let mut lines = Vec::new();
    for (kind, want) in [
        (AblationKind::Beta, BETA_SETTINGS.iter().map(|b| format!("beta={b}")).collect::<Vec<_>>()),
        (AblationKind::Kernel, vec!["kernel=3".into(), "kernel=5".into(), "kernel=7".into()]),
    ] {
        let a = cmd_ablate(&cfg, kind, &ctx.out("ablate-a"), 1).map_err(err)?;
        let b = cmd_ablate(&cfg, kind, &ctx.out("ablate-b"), 1).map_err(err)?;
        let settings: Vec<String> = a.iter().map(|r| r.record.setting.clone()).collect();
        ensure(settings == want, || format!("{} settings {settings:?}", kind.name()))?;
        let acc = |rs: &[protune::experiment::RunResult]| rs.iter().map(|r| r.record.accuracy).collect::<Vec<_>>();
        ensure(acc(&a) == acc(&b), || format!("{} sweep not deterministic", kind.name()))?;
        let file = format!("ablate_{}.csv", kind.name());
        let (fa, fb) = (std::fs::read(ctx.out("ablate-a").join(&file)).map_err(err)?, std::fs::read(ctx.out("ablate-b").join(&file)).map_err(err)?);
        ensure(fa == fb, || format!("{file} differs between replays"))?;
        let params: Vec<usize> = a.iter().map(|r| r.record.trainable_params).collect();
        match kind {
            AblationKind::Beta => {
                let learnable = a.iter().find(|r| r.record.setting == "beta=learnable").unwrap();
                let blocks = learnable.betas.len();
                ensure(params[..7].iter().all(|&p| p + blocks == params[7]), || format!("beta params {params:?}"))?;
                ensure(learnable.betas.iter().any(|b| b.abs() > 1e-4), || format!("learnable beta stayed at init: {:?}", learnable.betas))?;
                let fixed = a.iter().find(|r| r.record.setting == "beta=0.5").unwrap();
                ensure(fixed.betas.iter().all(|&b| b == 0.5), || format!("fixed beta moved: {:?}", fixed.betas))?;
                let moved: Vec<String> = learnable.betas.iter().map(|b| format!("{b:.3}")).collect();
                lines.push(format!("beta 8 settings, learnable beta -> [{}]", moved.join(", ")));
            }
            _ => {
                ensure(params.windows(2).all(|w| w[1] > w[0]), || format!("kernel params {params:?}"))?;
                lines.push(format!("kernel params {params:?}"));
            }
        }
    }
    let rows = read_records(&ctx.out("ablate-a")).map_err(err)?;
    ensure(rows.len() == 11, || format!("{} result rows", rows.len()))?;
    Ok(format!("{}; replay identical, {:.0}s", lines.join("; "), start.elapsed().as_secs_f64()))
}

// ---------------------------------------------------------------------------
// 10. corruption severity

fn criterion_corruption(_: &Ctx) -> Outcome {
    let ds = synth_shapes(64, 10, 0.0, 9).map_err(err)?;
    let mut notes = Vec::new();
    for kind in CorruptionKind::ALL {
        let mut errors = Vec::new();
        for severity in 1..=5 {
            let spec = CorruptionSpec { kind, severity };
            let c = corrupt(&ds, spec, 1).map_err(err)?;
            ensure(c.images == corrupt(&ds, spec, 1).map_err(err)?.images, || format!("{kind:?} not deterministic"))?;
            errors.push(mse(&ds, &c));
        }
        ensure(errors.windows(2).all(|w| w[1] > w[0]), || format!("{kind:?}: {errors:?}"))?;
        notes.push(format!("{kind:?} {:.4}..{:.4}", errors[0], errors[4]));
    }
    Ok(notes.join(", "))
}

// ---------------------------------------------------------------------------

type Criterion = (&'static str, fn(&Ctx) -> Outcome);

const CRITERIA: [Criterion; 10] = [
    ("gradient_suite", criterion_gradients),
    ("frozen_invariance", criterion_frozen),
    ("beta_zero_collapse", criterion_collapse),
    ("parameter_accounting", criterion_accounting),
    ("insertion_position_equalities", criterion_positions),
    ("longtail_profile", criterion_longtail),
    ("transfer_trend", criterion_transfer),
    ("fewshot_sweep", criterion_fewshot),
    ("ablation_sweeps", criterion_ablation),
    ("corruption_monotonicity", criterion_corruption),
];

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if std::env::args().any(|a| a == "--list") {
        for (i, (name, _)) in CRITERIA.iter().enumerate() {
            println!("criterion_{:02}_{name}: test", i + 1);
        }
        return;
    }
    let ctx = Ctx { dir: tempfile::tempdir().expect("temp dir"), pretrained: OnceCell::new() };
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, f)) in CRITERIA.iter().enumerate() {
        let full = format!("criterion_{:02}_{name}", i + 1);
        if !filters.is_empty() && !filters.iter().any(|p| full.contains(p.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| f(&ctx))).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {full} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {full} ({secs:.1}s): {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
