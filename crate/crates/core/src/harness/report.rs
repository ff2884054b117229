use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::pipeline::{mean_std, Summary};
use super::{HarnessError, Result};
use crate::diagnostics::read_diagnostics;
use crate::distill::read_records;

/// Published accuracies bundled for side-by-side comparison.
pub const REFERENCE_CSV: &str = include_str!("reference.csv");

#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct ReferenceRow {
    pub network: String,
    pub dataset: String,
    pub ratio: f64,
    pub method: String,
    /// `None` where the method failed to converge.
    pub accuracy: Option<f64>,
}

pub fn reference_rows() -> Vec<ReferenceRow> {
    csv::Reader::from_reader(REFERENCE_CSV.as_bytes())
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .expect("bundled reference table parses")
}

/// One row of the comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    /// `run` or `reference:<network>/<dataset>`.
    pub source: String,
    pub method: String,
    pub ratio: f64,
    pub seeds: usize,
    pub mean_accuracy: Option<f64>,
    pub std_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ReportOutput {
    pub table: Vec<TableRow>,
    pub long_rows: usize,
    pub long_csv: PathBuf,
    pub table_csv: PathBuf,
    pub text: String,
}

fn opt(x: Option<f64>) -> String {
    x.map(crate::sig6).unwrap_or_default()
}

/// Merges run directories into `long.csv` (method, ratio, seed, epoch,
/// metric, value) and `table.csv` under `out`.
pub fn report(run_dirs: &[PathBuf], out: &Path, include_reference: bool) -> Result<ReportOutput> {
    let missing: Vec<String> = run_dirs
        .iter()
        .filter(|d| !d.join("summary.json").is_file())
        .map(|d| d.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(HarnessError::Usage(format!(
            "run directories without summary.json: {}",
            missing.join(", ")
        )));
    }

    let mut long = String::from("method,ratio,seed,epoch,metric,value\n");
    let mut long_rows = 0;
    let mut groups: BTreeMap<(String, String), (f64, Vec<f64>)> = BTreeMap::new();
    for dir in run_dirs {
        let summary = Summary::load(&dir.join("summary.json"))?;
        let ratio = summary.ratio;
        let mut push = |seed: u64, epoch: usize, metric: &str, value: String| {
            let _ = writeln!(long, "{},{},{seed},{epoch},{metric},{value}", summary.method, ratio);
            long_rows += 1;
        };
        for s in &summary.seeds {
            let seed_dir = dir.join(format!("seed-{}", s.seed));
            for r in read_records(&seed_dir.join("runs.csv"))? {
                for (name, v) in [
                    ("loss_oh", r.loss_oh),
                    ("loss_m", r.loss_m),
                    ("loss_total", r.loss_total),
                    ("test_accuracy", r.test_accuracy),
                    ("dtd", r.dtd),
                    ("mean_lm", r.mean_lm),
                    ("lr", r.lr),
                ] {
                    push(s.seed, r.epoch, name, crate::sig6(v));
                }
            }
            for d in read_diagnostics(&seed_dir.join("diagnostics.csv"))? {
                for (name, v) in [
                    ("delta_ell_pred", d.delta_ell_pred),
                    ("delta_ell_meas", d.delta_ell_meas),
                    ("s_drift", d.s_drift),
                ] {
                    if v.is_some() {
                        push(s.seed, d.epoch, name, opt(v));
                    }
                }
            }
        }
        let entry = groups
            .entry((summary.method.clone(), ratio.to_string()))
            .or_insert((ratio, Vec::new()));
        entry.1.extend(summary.seeds.iter().map(|s| s.final_accuracy));
    }

    let mut table: Vec<TableRow> = groups
        .into_iter()
        .map(|((method, _), (ratio, finals))| {
            let (m, s) = mean_std(&finals);
            TableRow {
                source: "run".into(),
                method,
                ratio,
                seeds: finals.len(),
                mean_accuracy: Some(m),
                std_accuracy: Some(s),
            }
        })
        .collect();
    if include_reference {
        table.extend(reference_rows().into_iter().map(|r| TableRow {
            source: format!("reference:{}/{}", r.network, r.dataset),
            method: r.method,
            ratio: r.ratio,
            seeds: 0,
            mean_accuracy: r.accuracy,
            std_accuracy: None,
        }));
    }

    std::fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    let long_csv = out.join("long.csv");
    std::fs::write(&long_csv, long).map_err(|e| HarnessError::io(&long_csv, e))?;
    let mut csv_text = String::from("source,method,ratio,seeds,mean_accuracy,std_accuracy\n");
    let mut text = format!(
        "{:<28} {:<24} {:>6} {:>5} {:>10} {:>8}\n",
        "source", "method", "ratio", "seeds", "accuracy", "std"
    );
    for r in &table {
        let _ = writeln!(
            csv_text,
            "{},{},{},{},{},{}",
            r.source,
            r.method,
            r.ratio,
            r.seeds,
            opt(r.mean_accuracy),
            opt(r.std_accuracy)
        );
        let acc = r.mean_accuracy.map_or("#".to_string(), |a| format!("{a:.2}"));
        let std = r.std_accuracy.map_or(String::new(), |s| format!("{s:.2}"));
        let _ = writeln!(
            text,
            "{:<28} {:<24} {:>6} {:>5} {:>10} {:>8}",
            r.source, r.method, r.ratio, r.seeds, acc, std
        );
    }
    let table_csv = out.join("table.csv");
    std::fs::write(&table_csv, csv_text).map_err(|e| HarnessError::io(&table_csv, e))?;
    Ok(ReportOutput {
        table,
        long_rows,
        long_csv,
        table_csv,
        text,
    })
}
