//! Append-only results files: `results.csv` (canonical) and `results.jsonl`.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RESULTS_CSV: &str = "results.csv";
pub const RESULTS_JSONL: &str = "results.jsonl";

/// One row per (config, seed, shots) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub experiment: String,
    /// Ablation setting label, empty for plain runs.
    pub setting: String,
    pub paradigm: String,
    pub seed: u64,
    pub shots: Option<usize>,
    pub trainable_params: usize,
    pub accuracy: f64,
    pub wall_seconds: f64,
    pub timestamp: String,
    pub config_digest: String,
}

pub fn now_rfc3339() -> String {
    use time::format_description::well_known::Rfc3339;
    time::OffsetDateTime::now_utc().format(&Rfc3339).unwrap_or_default()
}

fn open_locked(path: &Path) -> Result<File> {
    let f = OpenOptions::new().create(true).append(true).open(path)?;
    f.lock()?;
    Ok(f)
}

/// Appends rows under an exclusive lock on each file.
pub fn append_records(dir: &Path, records: &[MetricsRecord]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let csv_path = dir.join(RESULTS_CSV);
    let mut f = open_locked(&csv_path)?;
    let fresh = f.metadata()?.len() == 0;
    {
        let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(&mut f);
        for r in records {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    f.unlock()?;

    let mut j = open_locked(&dir.join(RESULTS_JSONL))?;
    for r in records {
        writeln!(j, "{}", serde_json::to_string(r)?)?;
    }
    j.unlock()?;
    Ok(())
}

pub fn read_records(dir: &Path) -> Result<Vec<MetricsRecord>> {
    let path: PathBuf = dir.join(RESULTS_CSV);
    if !path.exists() {
        return Err(Error::Data(format!("no results file at {}", path.display())));
    }
    let mut r = csv::Reader::from_path(&path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<MetricsRecord>, _>>()?;
    Ok(rows)
}
