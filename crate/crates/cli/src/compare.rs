//! Method comparison tables: local run directories and evaluation reports
//! side by side with externally supplied baseline rows, best performance
//! marked per row, plus paired-bootstrap significance between report pairs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::fmt_float;
use crate::report::{read_run_log, summarize_run};
use crate::stats::significance_test;

/// JSON report emitted by the evaluate command; per-task scores make it
/// usable for paired significance testing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluateReport {
    pub label: String,
    pub split: String,
    pub aggregate: si_agent_core::ScoreVector,
    #[serde(default)]
    pub raw_fre: Option<f64>,
    pub per_task: Vec<PerTaskScore>,
    pub usage: si_agent_core::UsageMeter,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerTaskScore {
    pub task_id: String,
    #[serde(default)]
    pub performance: Option<f64>,
}

/// Externally supplied table (e.g. published baseline numbers).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExternalTable {
    #[serde(default)]
    pub title: Option<String>,
    pub columns: Vec<String>,
    pub rows: Vec<ExternalRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExternalRow {
    pub task: String,
    pub metric: String,
    /// "performance" rows get best-of-row marking; "readability" rows don't.
    #[serde(default = "default_kind")]
    pub kind: String,
    pub values: BTreeMap<String, f64>,
}

fn default_kind() -> String {
    "performance".to_string()
}

/// One classified comparison input.
pub enum CompareInput {
    RunDir {
        label: String,
        performance: Option<f64>,
        fre: Option<f64>,
        scalar: f64,
    },
    Report(EvaluateReport),
    External(ExternalTable),
}

/// Classifies a path: a directory with `run.jsonl`, an evaluate-report JSON,
/// or an external-table JSON.
pub fn classify_input(path: &Path) -> Result<CompareInput> {
    if path.is_dir() {
        let records = read_run_log(path)?;
        let summary = summarize_run(&records)?;
        let label = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        return Ok(CompareInput::RunDir {
            label,
            performance: summary.best_performance,
            fre: summary.best_fre,
            scalar: summary.best_scalar,
        });
    }
    let raw =
        std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&raw).with_context(|| format!("{} is not JSON", path.display()))?;
    if value.get("rows").is_some() {
        let table: ExternalTable = serde_json::from_value(value)
            .with_context(|| format!("{} is not a valid external table", path.display()))?;
        Ok(CompareInput::External(table))
    } else if value.get("per_task").is_some() {
        let report: EvaluateReport = serde_json::from_value(value)
            .with_context(|| format!("{} is not a valid evaluate report", path.display()))?;
        Ok(CompareInput::Report(report))
    } else {
        bail!(
            "{} is neither a run directory, an evaluate report, nor an external table",
            path.display()
        );
    }
}

pub struct CompareOutput {
    pub markdown: String,
    pub csv: String,
}

fn cell(value: Option<f64>, best: bool) -> String {
    match value {
        Some(v) if best => format!("**{}**", fmt_float(v)),
        Some(v) => fmt_float(v),
        None => "—".to_string(),
    }
}

fn max_value(values: impl Iterator<Item = f64>) -> Option<f64> {
    values.fold(None, |acc: Option<f64>, v| {
        Some(acc.map_or(v, |a| a.max(v)))
    })
}

/// Builds the comparison tables and significance section.
pub fn build_comparison(
    inputs: &[(PathBuf, CompareInput)],
    bootstrap: usize,
    seed: u64,
) -> Result<CompareOutput> {
    let mut markdown = String::from("# Method comparison\n");
    let mut csv = String::from("task,metric,method,value,best\n");

    // local methods: run dirs + evaluate reports
    let mut methods: Vec<(String, Option<f64>, Option<f64>)> = Vec::new();
    for (_, input) in inputs {
        match input {
            CompareInput::RunDir {
                label,
                performance,
                fre,
                ..
            } => methods.push((label.clone(), *performance, *fre)),
            CompareInput::Report(report) => methods.push((
                report.label.clone(),
                report.aggregate.performance,
                report.raw_fre,
            )),
            CompareInput::External(_) => {}
        }
    }
    if !methods.is_empty() {
        let best = max_value(methods.iter().filter_map(|(_, p, _)| *p));
        markdown.push_str(
            "\n## Methods\n\n| Method | Performance | Readability (FRE) |\n|---|---|---|\n",
        );
        for (label, performance, fre) in &methods {
            let is_best =
                matches!((performance, best), (Some(p), Some(b)) if (p - b).abs() < 1e-12);
            markdown.push_str(&format!(
                "| {} | {} | {} |\n",
                label,
                cell(*performance, is_best),
                cell(*fre, false)
            ));
            if let Some(p) = performance {
                csv.push_str(&format!(
                    "local,performance,{},{},{}\n",
                    label,
                    fmt_float(*p),
                    is_best
                ));
            }
            if let Some(f) = fre {
                csv.push_str(&format!(
                    "local,readability_fre,{},{},false\n",
                    label,
                    fmt_float(*f)
                ));
            }
        }
    }

    // external tables, rendered row-wise with best-of-row performance marking
    for (path, input) in inputs {
        let CompareInput::External(table) = input else {
            continue;
        };
        let title = table.title.clone().unwrap_or_else(|| {
            path.file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "external".to_string())
        });
        markdown.push_str(&format!("\n## {title}\n\n"));
        markdown.push_str(&format!(
            "| Task | Metric | {} |\n",
            table.columns.join(" | ")
        ));
        markdown.push_str(&format!(
            "|---|---|{}\n",
            "---|".repeat(table.columns.len())
        ));
        for row in &table.rows {
            let mark_best = row.kind == "performance";
            let best = if mark_best {
                max_value(row.values.values().copied())
            } else {
                None
            };
            let cells: Vec<String> = table
                .columns
                .iter()
                .map(|column| {
                    let value = row.values.get(column).copied();
                    let is_best =
                        matches!((value, best), (Some(v), Some(b)) if (v - b).abs() < 1e-12);
                    cell(value, is_best)
                })
                .collect();
            markdown.push_str(&format!(
                "| {} | {} | {} |\n",
                row.task,
                row.metric,
                cells.join(" | ")
            ));
            for column in &table.columns {
                if let Some(value) = row.values.get(column) {
                    let is_best = mark_best && matches!(best, Some(b) if (value - b).abs() < 1e-12);
                    csv.push_str(&format!(
                        "{},{},{},{},{}\n",
                        csv_escape(&row.task),
                        csv_escape(&row.metric),
                        csv_escape(column),
                        fmt_float(*value),
                        is_best
                    ));
                }
            }
        }
    }

    // significance between consecutive evaluate-report pairs
    let reports: Vec<&EvaluateReport> = inputs
        .iter()
        .filter_map(|(_, input)| match input {
            CompareInput::Report(report) => Some(report),
            _ => None,
        })
        .collect();
    if reports.len() >= 2 {
        markdown.push_str("\n## Significance (paired bootstrap)\n\n");
        markdown.push_str("| A | B | mean Δ | p-value |\n|---|---|---|---|\n");
        for pair in reports.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let shared: Vec<(&str, f64, f64)> = a
                .per_task
                .iter()
                .filter_map(|ta| {
                    let pa = ta.performance?;
                    let tb = b.per_task.iter().find(|tb| tb.task_id == ta.task_id)?;
                    Some((ta.task_id.as_str(), pa, tb.performance?))
                })
                .collect();
            if shared.is_empty() {
                continue;
            }
            let scores_a: Vec<f64> = shared.iter().map(|(_, x, _)| *x).collect();
            let scores_b: Vec<f64> = shared.iter().map(|(_, _, y)| *y).collect();
            let (delta, p) = significance_test(&scores_a, &scores_b, bootstrap, seed)?;
            markdown.push_str(&format!(
                "| {} | {} | {} | {} |\n",
                a.label,
                b.label,
                fmt_float(delta),
                fmt_float(p)
            ));
            csv.push_str(&format!(
                "significance,mean_delta,{} vs {},{},false\n",
                a.label,
                b.label,
                fmt_float(delta)
            ));
            csv.push_str(&format!(
                "significance,p_value,{} vs {},{},false\n",
                a.label,
                b.label,
                fmt_float(p)
            ));
        }
    }

    Ok(CompareOutput { markdown, csv })
}

fn csv_escape(field: &str) -> String {
    if field.contains(',') || field.contains('"') {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}
