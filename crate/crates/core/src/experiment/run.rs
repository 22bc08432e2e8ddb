//! Pretrain, tune and ablate runs.

use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

use crate::backbone::{build_backbone, from_container, save_checkpoint, Family};
use crate::container::Container;
use crate::data::{corrupt, few_shot_subset, make_longtail, synth_shapes, synth_shapes_test, Dataset};
use crate::error::{Error, Result};
use crate::paradigm::{apply_paradigm, Paradigm};
use crate::train::{evaluate, pretrain, train_then_evaluate, TrainReport};

use super::config::ExperimentConfig;
use super::results::{append_records, now_rfc3339, MetricsRecord};

/// Worker count: `PROTUNE_THREADS` when set, else the available cores.
pub fn worker_threads() -> usize {
    std::env::var("PROTUNE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub checkpoint: PathBuf,
    pub source_accuracy: f64,
    pub wall_seconds: f64,
}

/// Trains the backbone on the unshifted source task and writes a checkpoint
/// with every tensor flagged frozen. Fails before writing when the source
/// accuracy is below the configured threshold.
pub fn cmd_pretrain(cfg: &ExperimentConfig, out: &Path) -> Result<PretrainOutcome> {
    let start = Instant::now();
    let p = &cfg.pretrain;
    let train_ds = synth_shapes(p.samples, p.classes, 0.0, p.seed)?;
    let test_ds = synth_shapes_test(p.test_samples, p.classes, 0.0, p.seed)?;
    let model = build_backbone::<f32>(&cfg.backbone, p.seed)?;
    let model = pretrain(model, &train_ds, &p.train, p.seed)?;
    let accuracy = evaluate(&model, &test_ds)?;
    if accuracy < p.accuracy_threshold {
        return Err(Error::BelowThreshold { accuracy, threshold: p.accuracy_threshold });
    }
    let path = cfg.checkpoint_path(out);
    save_checkpoint(&model, &path)?;
    Ok(PretrainOutcome { checkpoint: path, source_accuracy: accuracy, wall_seconds: start.elapsed().as_secs_f64() })
}

/// Downstream train/test splits; independent of the run seed.
pub struct DownstreamData {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn downstream_data(cfg: &ExperimentConfig) -> Result<DownstreamData> {
    let d = &cfg.downstream;
    let mut train = synth_shapes(d.samples, d.classes, d.shift, d.seed)?;
    if let Some(ir) = d.imbalance {
        train = make_longtail(&train, ir, d.seed)?;
    }
    let mut test = synth_shapes_test(d.test_samples, d.classes, d.shift, d.seed)?;
    if let Some(c) = d.corruption {
        test = corrupt(&test, c, d.seed)?;
    }
    Ok(DownstreamData { train, test })
}

/// The outcome of one (config, seed, shots) run.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub record: MetricsRecord,
    pub report: TrainReport,
    /// Final β of every prompt block in forward order.
    pub betas: Vec<f64>,
}

fn load_base(cfg: &ExperimentConfig, out: &Path, paradigm: &Paradigm) -> Result<Option<Container>> {
    if !paradigm.needs_checkpoint() {
        return Ok(None);
    }
    let path = cfg.checkpoint_path(out);
    if !path.exists() {
        return Err(Error::Checkpoint {
            path,
            reason: "checkpoint not found; run `protune pretrain` with this config first".into(),
        });
    }
    let c = Container::read(&path)?;
    // Fail early on a spec mismatch rather than once per worker.
    from_container(&c, &cfg.backbone).map_err(|e| Error::Checkpoint { path: path.clone(), reason: e.to_string() })?;
    Ok(Some(c))
}

/// Runs one seed of one config against prepared data.
pub fn run_one(
    cfg: &ExperimentConfig,
    base: Option<&Container>,
    data: &DownstreamData,
    seed: u64,
    shots: Option<usize>,
    setting: &str,
) -> Result<RunResult> {
    let start = Instant::now();
    let paradigm = cfg.paradigm()?;
    let model = match base {
        Some(c) => from_container(c, &cfg.backbone)?,
        None => build_backbone::<f32>(&cfg.backbone, seed)?,
    };
    let subset;
    let train_ds = match shots {
        Some(k) => {
            subset = few_shot_subset(&data.train, k, cfg.downstream.seed)?;
            &subset
        }
        None => &data.train,
    };
    let mut tm = apply_paradigm(model, &paradigm, cfg.downstream.classes, seed)?;
    let report = train_then_evaluate(&mut tm, train_ds, &data.test, &cfg.train, seed)?;
    if let Some(name) = report.frozen.changed.first() {
        return Err(Error::Parameter { name: name.clone(), reason: "frozen tensor changed during training".into() });
    }
    let betas = tm.model.blocks.iter().map(|(_, b)| b.beta.item() as f64).collect();
    let record = MetricsRecord {
        experiment: cfg.name.clone(),
        setting: setting.to_string(),
        paradigm: paradigm.name(),
        seed,
        shots,
        trainable_params: report.trainable_params,
        accuracy: report.final_accuracy,
        wall_seconds: start.elapsed().as_secs_f64(),
        timestamp: now_rfc3339(),
        config_digest: cfg.digest(),
    };
    Ok(RunResult { record, report, betas })
}

/// Every (config, seed, shots) job in a fixed order.
fn run_jobs(jobs: &[(ExperimentConfig, String)], out: &Path, threads: usize) -> Result<Vec<RunResult>> {
    let mut prepared = Vec::with_capacity(jobs.len());
    for (cfg, setting) in jobs {
        let base = load_base(cfg, out, &cfg.paradigm()?)?;
        let data = downstream_data(cfg)?;
        let shots: Vec<Option<usize>> =
            if cfg.downstream.shots.is_empty() { vec![None] } else { cfg.downstream.shots.iter().map(|&k| Some(k)).collect() };
        prepared.push((cfg, setting, base, data, shots));
    }
    let mut tasks = Vec::new();
    for (i, (cfg, _, _, _, shots)) in prepared.iter().enumerate() {
        for &seed in &cfg.seeds {
            for &k in shots {
                tasks.push((i, seed, k));
            }
        }
    }
    let results: Vec<Result<RunResult>> = pool(threads)?.install(|| {
        tasks
            .par_iter()
            .map(|&(i, seed, k)| {
                let (cfg, setting, base, data, _) = &prepared[i];
                run_one(cfg, base.as_ref(), data, seed, k, setting)
            })
            .collect()
    });
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let records: Vec<_> = results.iter().map(|r| r.record.clone()).collect();
    append_records(out, &records)?;
    let configs = out.join("configs");
    std::fs::create_dir_all(&configs)?;
    for (cfg, _) in jobs {
        std::fs::write(configs.join(format!("{}.toml", &cfg.digest()[..16])), cfg.to_toml())?;
    }
    Ok(results)
}

/// One row per seed (and per shot count when a few-shot sweep is configured).
pub fn cmd_tune(cfg: &ExperimentConfig, out: &Path, threads: usize) -> Result<Vec<RunResult>> {
    run_jobs(&[(cfg.clone(), String::new())], out, threads)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationKind {
    Beta,
    Kernel,
    Position,
    Blocks,
}

impl FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "beta" => Self::Beta,
            "kernel" => Self::Kernel,
            "position" => Self::Position,
            "blocks" => Self::Blocks,
            other => return Err(Error::Config(format!("unknown ablation `{other}` (expected beta, kernel, position or blocks)"))),
        })
    }
}

impl AblationKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Beta => "beta",
            Self::Kernel => "kernel",
            Self::Position => "position",
            Self::Blocks => "blocks",
        }
    }
}

pub const BETA_SETTINGS: [&str; 8] = ["10", "4", "2", "1", "0.5", "0.25", "0.1", "learnable"];
pub const KERNEL_SETTINGS: [usize; 3] = [3, 5, 7];
pub const POSITION_SETTINGS: [&str; 5] = ["F1", "F5", "L1", "L5", "U5"];
pub const BLOCK_SETTINGS: [usize; 3] = [1, 2, 3];

/// Pro-tuning variants of `base` for one ablation, labelled `key=value`.
pub fn ablation_configs(base: &ExperimentConfig, kind: AblationKind) -> Result<Vec<(ExperimentConfig, String)>> {
    if kind == AblationKind::Position && base.backbone.family != Family::Vit {
        return Err(Error::Config("position ablation is defined for transformer backbones only".into()));
    }
    let mut base = base.clone();
    base.paradigm = "protune".into();
    let variants: Vec<(ExperimentConfig, String)> = match kind {
        AblationKind::Beta => BETA_SETTINGS
            .iter()
            .map(|b| {
                let mut c = base.clone();
                c.prompt.beta = b.to_string();
                (c, format!("beta={b}"))
            })
            .collect(),
        AblationKind::Kernel => KERNEL_SETTINGS
            .iter()
            .map(|&k| {
                let mut c = base.clone();
                c.prompt.kernel = k;
                (c, format!("kernel={k}"))
            })
            .collect(),
        AblationKind::Position => POSITION_SETTINGS
            .iter()
            .map(|p| {
                let mut c = base.clone();
                c.prompt.policy = Some(p.to_string());
                (c, format!("position={p}"))
            })
            .collect(),
        AblationKind::Blocks => BLOCK_SETTINGS
            .iter()
            .map(|&n| {
                let mut c = base.clone();
                c.prompt.blocks_per_point = n;
                (c, format!("blocks={n}"))
            })
            .collect(),
    };
    for (c, _) in &variants {
        c.validate()?;
    }
    Ok(variants)
}

/// Runs every setting of an ablation and writes `ablate_<kind>.csv` with one
/// summary row per setting.
pub fn cmd_ablate(base: &ExperimentConfig, kind: AblationKind, out: &Path, threads: usize) -> Result<Vec<RunResult>> {
    let jobs = ablation_configs(base, kind)?;
    let results = run_jobs(&jobs, out, threads)?;
    let mut w = csv::Writer::from_path(out.join(format!("ablate_{}.csv", kind.name())))?;
    w.write_record(["setting", "trainable_params", "seeds", "mean_accuracy"])?;
    for (_, setting) in &jobs {
        let rows: Vec<_> = results.iter().filter(|r| &r.record.setting == setting).collect();
        let mean = rows.iter().map(|r| r.record.accuracy).sum::<f64>() / rows.len().max(1) as f64;
        let params = rows.first().map_or(0, |r| r.record.trainable_params);
        w.write_record([setting.clone(), params.to_string(), rows.len().to_string(), format!("{mean:.6}")])?;
    }
    w.flush()?;
    Ok(results)
}
