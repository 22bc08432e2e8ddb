//! Fast invariant checks behind `protune verify`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{build_backbone, BackboneSpec, Family};
use crate::data::{corrupt, longtail_profile, mse, synth_shapes, CorruptionKind, CorruptionSpec};
use crate::error::Result;
use crate::paradigm::{apply_paradigm, count_trainable_params, Paradigm};
use crate::prompt::{attach, InsertionPolicy, PromptBlock, PromptBlockConfig, PromptSpec};
use crate::tensor::gradcheck::grad_check_report;
use crate::tensor::{ops, Tensor};
use crate::train::{train, HyperParams};

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    match f() {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check { name, passed: false, detail: format!("error: {e}") },
    }
}

fn tiny_cnn() -> BackboneSpec {
    let mut s = BackboneSpec::tiny_cnn(4);
    s.widths = vec![4, 8];
    s.input_size = [8, 8];
    s
}

pub fn run_all() -> Vec<Check> {
    vec![
        check("prompted forward gradient (f64)", || {
            let spec = tiny_cnn();
            let m = build_backbone::<f64>(&spec, 0)?;
            m.set_trainable(false);
            let mut cfg = PromptBlockConfig::new(0, 2);
            cfg.kernel = 3;
            cfg.se_reduction = 2;
            cfg.beta_init = 0.7;
            let pm = attach(m, &PromptSpec::new(InsertionPolicy::PerStage, cfg), 3, 1)?;
            let params: Vec<Tensor<f64>> =
                pm.named_tensors().into_iter().filter(|n| n.tensor.requires_grad()).map(|n| n.tensor).collect();
            // Zero-initialised biases put pre-activations exactly on ReLU
            // kinks, where central differences are meaningless.
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            for p in &params {
                let jitter = Tensor::<f64>::uniform(p.shape(), 0.1, &mut rng).to_vec();
                p.data_mut().iter_mut().zip(jitter).for_each(|(v, j)| *v += j);
            }
            let x = Tensor::<f64>::randn(&[2, 3, 8, 8], 1.0, &mut rng);
            let err = grad_check_report(|_| ops::softmax_cross_entropy(&pm.logits(&x)?, &[0, 2]), &params, 1e-6)?.global_error;
            Ok((err <= 1e-6, format!("max relative error {err:.2e}")))
        }),
        check("beta = 0 leaves logits unchanged", || {
            let spec = BackboneSpec::tiny_cnn(10);
            let m = build_backbone::<f32>(&spec, 3)?;
            m.set_trainable(false);
            let mut plain = m.deep_clone();
            plain.replace_head(5, 9);
            let pm = attach(m, &PromptSpec::new(InsertionPolicy::PerStage, PromptBlockConfig::for_family(Family::Cnn)), 5, 9)?;
            let x = Tensor::<f32>::uniform(&[4, 3, 32, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(4));
            let a = pm.logits(&x)?.to_vec();
            let b = plain.logits(&x)?.to_vec();
            Ok((a == b, "bitwise comparison on 4 inputs".into()))
        }),
        check("prompt parameter count matches enumeration", || {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            for c in [3, 8, 17] {
                for k in [1, 3, 5] {
                    let cfg = PromptBlockConfig { kernel: k, se_reduction: 4, ..PromptBlockConfig::new(c, 2) };
                    let b = PromptBlock::<f32>::new(cfg, &mut rng)?;
                    if b.trainable_count() != crate::prompt::count_prompt_params(&cfg) {
                        return Ok((false, format!("C={c} k={k}")));
                    }
                }
            }
            Ok((true, "9 configurations".into()))
        }),
        check("reference-scale reconciliation", || {
            let r50 = BackboneSpec::resnet50_profile(100);
            let ps = PromptSpec::new(InsertionPolicy::PerStage, PromptBlockConfig::for_family(Family::Cnn));
            let r50_total = ps.param_count(&r50)? + 2048 * 100 + 100;
            let deit = BackboneSpec::deit_b_profile(100);
            let ps = PromptSpec::new(InsertionPolicy::F1, PromptBlockConfig::for_family(Family::Vit));
            let deit_total = ps.param_count(&deit)? + 768 * 100 + 100;
            let ok = (r50_total as f64 / 3.82e6 - 1.0).abs() <= 0.1 && (deit_total as f64 / 0.69e6 - 1.0).abs() <= 0.1;
            Ok((ok, format!("resnet50 profile {r50_total}, deit-b profile {deit_total}")))
        }),
        check("insertion position equalities", || {
            let vit = BackboneSpec::tiny_vit(10);
            let cfg = PromptBlockConfig::for_family(Family::Vit);
            let n = |p| PromptSpec::new(p, cfg).param_count(&vit);
            use InsertionPolicy::*;
            let ok = n(F1)? == n(L1)? && n(F5)? == n(L5)? && n(L5)? == n(U5)?;
            Ok((ok, format!("F1 {} F5 {}", n(F1)?, n(F5)?)))
        }),
        check("long-tail profile", || {
            let p = longtail_profile(10, 5000, 100.0);
            Ok((p[0] == 5000 && p[9] == 50, format!("{p:?}")))
        }),
        check("corruption severity is monotone", || {
            let ds = synth_shapes(8, 10, 0.0, 0)?;
            for kind in CorruptionKind::ALL {
                let e: Vec<f64> = (1..=5)
                    .map(|severity| corrupt(&ds, CorruptionSpec { kind, severity }, 0).map(|c| mse(&ds, &c)))
                    .collect::<Result<_>>()?;
                if !e.windows(2).all(|w| w[1] > w[0]) {
                    return Ok((false, format!("{kind:?}: {e:?}")));
                }
            }
            Ok((true, "4 kinds x 5 severities".into()))
        }),
        check("frozen tensors unchanged by pro-tuning", || {
            let spec = BackboneSpec::tiny_cnn(4);
            let m = build_backbone::<f32>(&spec, 0)?;
            m.set_trainable(false);
            let ps = PromptSpec::new(InsertionPolicy::PerStage, PromptBlockConfig::for_family(Family::Cnn));
            let mut tm = apply_paradigm(m, &Paradigm::ProTune(ps), 4, 0)?;
            let ds = synth_shapes(16, 4, 0.5, 0)?;
            let hp = HyperParams { steps: Some(5), batch_size: 8, ..HyperParams::default() };
            let r = train(&mut tm, &ds, None, &hp, 0)?;
            let n = count_trainable_params(&tm)?;
            Ok((r.frozen.is_clean(), format!("{} steps, {n} trainable, changed {:?}", r.steps, r.frozen.changed)))
        }),
    ]
}
