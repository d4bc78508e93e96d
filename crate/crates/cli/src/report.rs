//! Cross-run comparison table: one row per run, one column per
//! organ × metric, best value of each column flagged.

use std::io::Write;
use std::path::PathBuf;

use serde::Serialize;

use semiseg::metrics::{MetricReport, OrganSummary, METRIC_COLUMNS};
use semiseg::voldata::ORGAN_NAMES;

use crate::{load_run_report, metric_columns};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow {
    pub run: String,
    /// False when the run directory has no readable report.
    pub complete: bool,
    /// Column means; `None` is N/A.
    pub values: Vec<Option<f64>>,
    pub best: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonTable {
    pub columns: Vec<String>,
    pub rows: Vec<TableRow>,
}

/// Ranking key of a column value; smaller is better. DSC is maximized, the
/// distances minimized and volume difference minimized in magnitude.
fn rank(metric: &str, v: f64) -> f64 {
    match metric {
        "dsc" => -v,
        "vd_percent" => v.abs(),
        _ => v,
    }
}

fn organ_values(s: &OrganSummary) -> [Option<f64>; 4] {
    [s.dsc.mean, s.ahd_mm.mean, s.ashd_mm.mean, s.vd_percent.mean]
}

impl ComparisonTable {
    pub fn from_reports(runs: Vec<(String, Option<MetricReport>)>) -> Self {
        let organs: Vec<String> = ORGAN_NAMES.iter().map(|s| s.to_string()).collect();
        let columns = metric_columns(&organs);
        let mut rows: Vec<TableRow> = runs
            .into_iter()
            .map(|(run, rep)| {
                let values = match &rep {
                    Some(r) => r.summary.iter().flat_map(organ_values).collect(),
                    None => vec![None; columns.len()],
                };
                TableRow {
                    run,
                    complete: rep.is_some(),
                    best: vec![false; columns.len()],
                    values,
                }
            })
            .collect();
        for (j, _) in columns.iter().enumerate() {
            let metric = METRIC_COLUMNS[j % METRIC_COLUMNS.len()];
            let best = rows
                .iter()
                .filter_map(|r| r.values[j].map(|v| rank(metric, v)))
                .min_by(f64::total_cmp);
            if let Some(b) = best {
                for r in &mut rows {
                    r.best[j] = r.values[j].is_some_and(|v| rank(metric, v) == b);
                }
            }
        }
        Self { columns, rows }
    }

    /// Rows in the order given; a run without `report.json` is kept as an
    /// incomplete row.
    pub fn from_runs(dirs: &[PathBuf]) -> Self {
        Self::from_reports(
            dirs.iter()
                .map(|d| (d.display().to_string(), load_run_report(d)))
                .collect(),
        )
    }

    /// CSV with `run`, `complete`, then one column per organ × metric.
    /// Best values carry a trailing `*`; missing values read `N/A`.
    pub fn write_csv(&self, w: impl Write) -> semiseg::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["run".to_string(), "complete".to_string()];
        header.extend(self.columns.iter().cloned());
        out.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.run.clone(), r.complete.to_string()];
            for (v, b) in r.values.iter().zip(&r.best) {
                rec.push(match v {
                    Some(x) if *b => format!("{x:.4}*"),
                    Some(x) => format!("{x:.4}"),
                    None => "N/A".into(),
                });
            }
            out.write_record(&rec)?;
        }
        out.flush().map_err(|e| semiseg::Error::io("<csv>", e))?;
        Ok(())
    }
}
