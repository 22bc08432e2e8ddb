use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use protune::experiment::{
    cmd_ablate, cmd_pretrain, cmd_report, cmd_tune, format_table, verify, worker_threads, AblationKind, ExperimentConfig,
    RunResult,
};
use protune::{Error, Result};

/// Prompt tuning experiments on frozen vision backbones.
#[derive(Parser, Debug)]
#[command(name = "protune", version)]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Comma-separated seeds; overrides the config.
    #[arg(long, global = true, value_delimiter = ',')]
    seed: Vec<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the backbone on the source task and write a frozen checkpoint.
    Pretrain,
    /// Tune on the downstream task, one row per seed.
    Tune,
    /// Sweep one prompt setting: beta, kernel, position or blocks.
    Ablate { kind: String },
    /// Summarize a results directory into tables and plots.
    Report,
    /// Run the fast invariant suite.
    Verify,
}

const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli.config.as_deref().ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if !cli.seed.is_empty() {
        cfg.seeds = cli.seed.clone();
        cfg.validate()?;
    }
    Ok(cfg)
}

fn print_runs(results: &[RunResult]) {
    println!("{:<12} {:<18} {:>5} {:>5} {:>10} {:>9} {:>8}", "paradigm", "setting", "seed", "shots", "params", "accuracy", "time_s");
    for r in results {
        let m = &r.record;
        println!(
            "{:<12} {:<18} {:>5} {:>5} {:>10} {:>9.4} {:>8.1}",
            m.paradigm,
            m.setting,
            m.seed,
            m.shots.map(|k| k.to_string()).unwrap_or_default(),
            m.trainable_params,
            m.accuracy,
            m.wall_seconds
        );
    }
}

/// `Ok(false)` when the command ran but reported failures.
fn run(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Pretrain => {
            let mut cfg = load_config(cli)?;
            match cli.seed.as_slice() {
                [] => {}
                [s] => cfg.pretrain.seed = *s,
                _ => return Err(Error::Config("pretrain takes a single --seed".into())),
            }
            let out = cfg.out_dir(cli.out.as_deref());
            let o = cmd_pretrain(&cfg, &out)?;
            println!("source accuracy {:.4} in {:.1}s", o.source_accuracy, o.wall_seconds);
            println!("checkpoint {}", o.checkpoint.display());
        }
        Command::Tune => {
            let cfg = load_config(cli)?;
            let out = cfg.out_dir(cli.out.as_deref());
            let results = cmd_tune(&cfg, &out, worker_threads())?;
            print_runs(&results);
            let mean = results.iter().map(|r| r.record.accuracy).sum::<f64>() / results.len() as f64;
            println!("{} mean accuracy {mean:.4} over {} runs -> {}", cfg.name, results.len(), out.display());
        }
        Command::Ablate { kind } => {
            let kind: AblationKind = kind.parse()?;
            let cfg = load_config(cli)?;
            let out = cfg.out_dir(cli.out.as_deref());
            let results = cmd_ablate(&cfg, kind, &out, worker_threads())?;
            print_runs(&results);
            println!("wrote {}", out.join(format!("ablate_{}.csv", kind.name())).display());
        }
        Command::Report => {
            let dir = match (&cli.out, &cli.config) {
                (Some(d), _) => d.clone(),
                (None, Some(_)) => load_config(cli)?.out_dir(None),
                (None, None) => return Err(Error::Config("report needs --out DIR or --config PATH".into())),
            };
            let r = cmd_report(&dir)?;
            print!("{}", format_table(&r.summary));
            for p in [Some(&r.summary_csv), r.fewshot_csv.as_ref(), r.plot.as_ref()].into_iter().flatten() {
                println!("wrote {}", p.display());
            }
        }
        Command::Verify => {
            let checks = verify::run_all();
            for c in &checks {
                println!("[{}] {:<44} {}", if c.passed { "pass" } else { "FAIL" }, c.name, c.detail);
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                eprintln!("{failed} of {} checks failed", checks.len());
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_RUNTIME),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { EXIT_VALIDATION } else { EXIT_RUNTIME })
        }
    }
}
