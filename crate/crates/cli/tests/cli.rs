use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use protune::experiment::ExperimentConfig;

const TINY: &str = r#"
name = "tiny"
seeds = [0]
paradigm = "protune"

[backbone]
family = "cnn"
widths = [4, 8]

[pretrain]
samples = 40
test_samples = 20
classes = 4
accuracy_threshold = 0.0

[pretrain.train]
batch_size = 8
steps = 3

[downstream]
samples = 24
test_samples = 20
classes = 4

[prompt]
se_reduction = 2

[train]
batch_size = 8
steps = 3
"#;

fn protune(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_protune")).args(args).env("PROTUNE_THREADS", "1").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn unknown_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", &TINY.replace("[prompt]\n", "[prompt]\nkernal = 3\n"));
    let o = protune(&["tune", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("kernal"));
}

#[test]
fn negative_width_fails_before_compute() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), "c.toml", &TINY.replace("widths = [4, 8]", "widths = [4, -8]"));
    let o = protune(&["pretrain", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", TINY);
    let o = protune(&["tune", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("pretrain"), "{}", stderr(&o));
}

#[test]
fn malformed_seed_flag_is_rejected() {
    let o = protune(&["tune", "--seed", "1,x"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn position_ablation_on_cnn_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", TINY);
    let o = protune(&["ablate", "position", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = protune(&["ablate", "depth", "--config", &cfg]);
    assert_eq!(code(&o), 2);
}

#[test]
fn report_on_empty_dir_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = protune(&["report", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 3);
}

#[test]
fn verify_passes() {
    let o = protune(&["verify"]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("[pass]")).count(), 8);
}

#[test]
fn pretrain_tune_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();
    let cfg = write_config(dir.path(), "c.toml", TINY);

    let o = protune(&["pretrain", "--config", &cfg, "--out", out_s]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ckpt = out.join("pretrain.ckpt");
    let first = std::fs::read(&ckpt).unwrap();
    assert_eq!(code(&protune(&["pretrain", "--config", &cfg, "--out", out_s])), 0);
    assert_eq!(std::fs::read(&ckpt).unwrap(), first, "pretraining is not byte-reproducible");

    let o = protune(&["tune", "--config", &cfg, "--out", out_s, "--seed", "0,1,2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).lines().next().unwrap().contains("params"));
    let rows = protune::experiment::read_records(&out).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![0, 1, 2]);
    assert!(rows.iter().all(|r| r.config_digest == rows[0].config_digest && r.paradigm == "protune"));

    // Replaying one seed reproduces its accuracy exactly.
    assert_eq!(code(&protune(&["tune", "--config", &cfg, "--out", out_s, "--seed", "1"])), 0);
    let rows = protune::experiment::read_records(&out).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[3].accuracy, rows[1].accuracy);

    let configs: Vec<PathBuf> = std::fs::read_dir(out.join("configs")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(configs.len(), 1);
    let saved = ExperimentConfig::load(&configs[0]).unwrap();
    assert_eq!(saved.digest(), rows[0].config_digest);

    let o = protune(&["report", "--out", out_s]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join("summary.csv").exists());
    assert!(stdout(&o).contains("protune"));
}

#[test]
fn kernel_ablation_writes_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), "c.toml", TINY);
    assert_eq!(code(&protune(&["pretrain", "--config", &cfg, "--out", out.to_str().unwrap()])), 0);
    let o = protune(&["ablate", "kernel", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(out.join("ablate_kernel.csv")).unwrap();
    let params: Vec<usize> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(params.len(), 3);
    assert!(params.windows(2).all(|w| w[1] > w[0]), "{params:?}");
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(root).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert!(n >= 5);
}
