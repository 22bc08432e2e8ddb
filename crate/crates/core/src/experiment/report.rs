//! Summary tables and the few-shot curve from a results directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use crate::error::{Error, Result};

use super::results::{read_records, MetricsRecord};

pub const SUMMARY_CSV: &str = "summary.csv";
pub const FEWSHOT_CSV: &str = "fewshot.csv";
pub const FEWSHOT_SVG: &str = "fewshot.svg";

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub experiment: String,
    pub setting: String,
    pub paradigm: String,
    pub shots: Option<usize>,
    pub seeds: usize,
    pub trainable_params: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct ReportOutput {
    pub summary: Vec<SummaryRow>,
    pub summary_csv: PathBuf,
    pub fewshot_csv: Option<PathBuf>,
    pub plot: Option<PathBuf>,
}

type Key = (String, String, String, Option<usize>);

/// Groups rows by (experiment, setting, paradigm, shots), sorted by key.
pub fn summarize(records: &[MetricsRecord]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<Key, Vec<&MetricsRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.experiment.clone(), r.setting.clone(), r.paradigm.clone(), r.shots)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((experiment, setting, paradigm, shots), rows)| {
            let n = rows.len() as f64;
            let mean = rows.iter().map(|r| r.accuracy).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r.accuracy - mean).powi(2)).sum::<f64>() / n;
            SummaryRow {
                experiment,
                setting,
                paradigm,
                shots,
                seeds: rows.len(),
                trainable_params: rows[0].trainable_params,
                mean_accuracy: mean,
                std_accuracy: var.sqrt(),
            }
        })
        .collect()
}

fn shots_str(s: Option<usize>) -> String {
    s.map(|k| k.to_string()).unwrap_or_default()
}

/// Writes `summary.csv`, and when few-shot rows exist `fewshot.csv` plus a
/// plot of every curve with at least two points.
pub fn cmd_report(dir: &Path) -> Result<ReportOutput> {
    let records = read_records(dir)?;
    if records.is_empty() {
        return Err(Error::Data(format!("{} has no result rows", dir.display())));
    }
    let summary = summarize(&records);
    let summary_csv = dir.join(SUMMARY_CSV);
    let mut w = csv::Writer::from_path(&summary_csv)?;
    w.write_record(["experiment", "setting", "paradigm", "shots", "seeds", "trainable_params", "mean_accuracy", "std_accuracy"])?;
    for r in &summary {
        w.write_record([
            r.experiment.clone(),
            r.setting.clone(),
            r.paradigm.clone(),
            shots_str(r.shots),
            r.seeds.to_string(),
            r.trainable_params.to_string(),
            format!("{:.6}", r.mean_accuracy),
            format!("{:.6}", r.std_accuracy),
        ])?;
    }
    w.flush()?;

    // Curves keyed by (experiment, setting, paradigm), points sorted by k.
    let mut curves: BTreeMap<(String, String, String), Vec<(usize, f64)>> = BTreeMap::new();
    for r in summary.iter().filter(|r| r.shots.is_some()) {
        curves
            .entry((r.experiment.clone(), r.setting.clone(), r.paradigm.clone()))
            .or_default()
            .push((r.shots.unwrap(), r.mean_accuracy));
    }
    let mut fewshot_csv = None;
    let mut plot = None;
    if !curves.is_empty() {
        let path = dir.join(FEWSHOT_CSV);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["experiment", "setting", "paradigm", "shots", "mean_accuracy"])?;
        for ((e, s, p), pts) in &curves {
            for (k, acc) in pts {
                w.write_record([e.clone(), s.clone(), p.clone(), k.to_string(), format!("{acc:.6}")])?;
            }
        }
        w.flush()?;
        fewshot_csv = Some(path);
        if curves.values().any(|pts| pts.len() >= 2) {
            let path = dir.join(FEWSHOT_SVG);
            render_curves(&path, &curves)?;
            plot = Some(path);
        }
    }
    Ok(ReportOutput { summary, summary_csv, fewshot_csv, plot })
}

fn render_curves(path: &Path, curves: &BTreeMap<(String, String, String), Vec<(usize, f64)>>) -> Result<()> {
    let plot_err = |e: Box<dyn std::error::Error>| Error::invalid(format!("plot: {e}"));
    let max_k = curves.values().flatten().map(|p| p.0).max().unwrap_or(1).max(2) as f64;
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(Box::new(e)))?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Few-shot accuracy", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(48)
        .build_cartesian_2d((1f64..max_k).log_scale(), 0f64..1f64)
        .map_err(|e| plot_err(Box::new(e)))?;
    chart
        .configure_mesh()
        .x_desc("shots per class")
        .y_desc("accuracy")
        .draw()
        .map_err(|e| plot_err(Box::new(e)))?;
    for (i, ((_, setting, paradigm), pts)) in curves.iter().filter(|(_, p)| p.len() >= 2).enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let label = if setting.is_empty() { paradigm.clone() } else { format!("{paradigm} {setting}") };
        let series: Vec<(f64, f64)> = pts.iter().map(|&(k, a)| (k as f64, a)).collect();
        chart
            .draw_series(LineSeries::new(series.clone(), color.stroke_width(2)))
            .map_err(|e| plot_err(Box::new(e)))?
            .label(label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        chart
            .draw_series(series.into_iter().map(|p| Circle::new(p, 3, color.filled())))
            .map_err(|e| plot_err(Box::new(e)))?;
    }
    chart
        .configure_series_labels()
        .border_style(BLACK)
        .background_style(WHITE.mix(0.8))
        .draw()
        .map_err(|e| plot_err(Box::new(e)))?;
    root.present().map_err(|e| plot_err(Box::new(e)))?;
    Ok(())
}

/// Fixed-width table for the terminal.
pub fn format_table(rows: &[SummaryRow]) -> String {
    let mut s = format!("{:<14} {:<18} {:<12} {:>5} {:>5} {:>10} {:>9}\n", "experiment", "setting", "paradigm", "shots", "seeds", "params", "accuracy");
    for r in rows {
        s.push_str(&format!(
            "{:<14} {:<18} {:<12} {:>5} {:>5} {:>10} {:>9.4}\n",
            r.experiment,
            r.setting,
            r.paradigm,
            shots_str(r.shots),
            r.seeds,
            r.trainable_params,
            r.mean_accuracy
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::results::append_records;

    fn rec(paradigm: &str, seed: u64, shots: Option<usize>, acc: f64) -> MetricsRecord {
        MetricsRecord {
            experiment: "fs".into(),
            setting: String::new(),
            paradigm: paradigm.into(),
            seed,
            shots,
            trainable_params: 10,
            accuracy: acc,
            wall_seconds: 0.0,
            timestamp: "t".into(),
            config_digest: "d".into(),
        }
    }

    #[test]
    fn single_row_no_plot() {
        let dir = tempfile::tempdir().unwrap();
        append_records(dir.path(), &[rec("head", 0, Some(1), 0.5)]).unwrap();
        let out = cmd_report(dir.path()).unwrap();
        assert_eq!(out.summary.len(), 1);
        assert!(out.plot.is_none());
        assert!(out.fewshot_csv.is_some());
    }

    #[test]
    fn fewshot_curves_are_sorted_and_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let mut rows = Vec::new();
        for p in ["protune", "head"] {
            for k in [16, 1, 4, 2, 8] {
                for seed in 0..2 {
                    rows.push(rec(p, seed, Some(k), k as f64 / 20.0 + seed as f64 * 0.01));
                }
            }
        }
        append_records(dir.path(), &rows).unwrap();
        let out = cmd_report(dir.path()).unwrap();
        assert!(out.plot.is_some());
        let first = std::fs::read(&out.summary_csv).unwrap();
        let curve = std::fs::read_to_string(out.fewshot_csv.as_ref().unwrap()).unwrap();
        let ks: Vec<&str> = curve.lines().skip(1).filter(|l| l.contains(",head,")).map(|l| l.split(',').nth(3).unwrap()).collect();
        assert_eq!(ks, vec!["1", "2", "4", "8", "16"]);
        cmd_report(dir.path()).unwrap();
        assert_eq!(std::fs::read(&out.summary_csv).unwrap(), first);
    }
}
