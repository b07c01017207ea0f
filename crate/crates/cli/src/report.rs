//! Run-directory reporting: learning-curve and trade-off CSVs plus a
//! markdown summary, all reproducible from the run log.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};

use si_agent_core::eval::readability::readability_stats;
use si_agent_core::opt_loop::{BestEntry, RunState, ValPoint};
use si_agent_core::{
    should_terminate, FeedbackSignal, RunConfig, RunRecord, ScoreVector, SiCandidate, UsageMeter,
};

use crate::fmt_float;

/// Parses every line of a run log.
pub fn read_run_log(run_dir: &Path) -> Result<Vec<RunRecord>> {
    let path = run_dir.join("run.jsonl");
    let raw = std::fs::read_to_string(&path)
        .with_context(|| format!("cannot read run log {}", path.display()))?;
    let mut records = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: RunRecord = serde_json::from_str(line)
            .with_context(|| format!("run log line {} is not a valid record", idx + 1))?;
        records.push(record);
    }
    if records.is_empty() {
        bail!("run log {} has no records", path.display());
    }
    Ok(records)
}

/// Facts extracted from a run log, shared by the report and compare paths.
pub struct RunSummary {
    pub iterations: usize,
    pub best_candidate_id: String,
    pub best_candidate_text: String,
    pub best_scalar: f64,
    pub best_performance: Option<f64>,
    pub best_fre: Option<f64>,
    pub best_val_scalar: Option<f64>,
    pub total_usage: UsageMeter,
}

fn candidate_fre(text: &str, scores: &ScoreVector) -> Option<f64> {
    scores
        .readability
        .map(|r| r * 100.0)
        .or_else(|| readability_stats(text).ok().map(|s| s.fre))
}

/// Replays the log into the summary facts: running-best train scalar, the
/// best candidate and its channels, validation running best, and usage
/// totals.
pub fn summarize_run(records: &[RunRecord]) -> Result<RunSummary> {
    let mut texts: BTreeMap<&str, &str> = BTreeMap::new();
    let mut best: Option<(&str, f64, ScoreVector)> = None;
    let mut best_val = None;
    let mut total_usage = UsageMeter::default();
    for record in records {
        for candidate in &record.candidates {
            texts.insert(&candidate.id, &candidate.text);
        }
        for feedback in &record.feedback {
            let improves = best.as_ref().is_none_or(|(_, s, _)| feedback.scalar > *s);
            if improves {
                best = Some((&feedback.si_id, feedback.scalar, feedback.scores));
            }
        }
        if let Some(val) = record.val {
            best_val = Some(best_val.map_or(val.scalar, |b: f64| b.max(val.scalar)));
        }
        total_usage.merge(&UsageMeter {
            prompt_tokens: record.usage.prompt_tokens,
            completion_tokens: record.usage.completion_tokens,
            call_count: record.usage.calls,
            wall_ms: record.usage.wall_ms,
        });
    }
    let (id, scalar, scores) = best.context("run log has no feedback entries")?;
    let text = texts.get(id).copied().unwrap_or_default().to_string();
    Ok(RunSummary {
        iterations: records.len(),
        best_candidate_id: id.to_string(),
        best_fre: candidate_fre(&text, &scores),
        best_candidate_text: text,
        best_scalar: scalar,
        best_performance: scores.performance,
        best_val_scalar: best_val,
        total_usage,
    })
}

/// `iteration,best_train_scalar,val_scalar,cumulative_tokens` with one row
/// per log record. The val column is empty on iterations without validation.
pub fn learning_curve_csv(records: &[RunRecord]) -> String {
    let mut out = String::from("iteration,best_train_scalar,val_scalar,cumulative_tokens\n");
    let mut best = f64::MIN;
    let mut tokens = 0u64;
    for record in records {
        for feedback in &record.feedback {
            best = best.max(feedback.scalar);
        }
        tokens += record.usage.prompt_tokens + record.usage.completion_tokens;
        let val = record.val.map(|v| fmt_float(v.scalar)).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{}\n",
            record.iteration,
            fmt_float(best),
            val,
            tokens
        ));
    }
    out
}

/// `candidate_id,performance,fre` over all evaluated candidates: one row per
/// candidate (last evaluation wins), in first-appearance order. FRE comes
/// from the logged readability channel when present, else is recomputed from
/// the candidate text.
pub fn tradeoff_csv(records: &[RunRecord]) -> String {
    let mut order: Vec<String> = Vec::new();
    let mut rows: BTreeMap<String, (Option<f64>, Option<f64>)> = BTreeMap::new();
    let mut texts: BTreeMap<String, String> = BTreeMap::new();
    for record in records {
        for candidate in &record.candidates {
            texts.insert(candidate.id.clone(), candidate.text.clone());
        }
        for feedback in &record.feedback {
            if !rows.contains_key(&feedback.si_id) {
                order.push(feedback.si_id.clone());
            }
            let text = texts.get(&feedback.si_id).map(String::as_str).unwrap_or("");
            let fre = candidate_fre(text, &feedback.scores);
            rows.insert(feedback.si_id.clone(), (feedback.scores.performance, fre));
        }
    }
    let mut out = String::from("candidate_id,performance,fre\n");
    for id in order {
        let (performance, fre) = rows[&id];
        out.push_str(&format!(
            "{},{},{}\n",
            id,
            performance.map(fmt_float).unwrap_or_default(),
            fre.map(fmt_float).unwrap_or_default(),
        ));
    }
    out
}

/// Rebuilds just enough state from the log to replay the termination rules
/// against the run's config.
fn replay_stop_reason(records: &[RunRecord], config: &RunConfig) -> String {
    let Some(last) = records.last() else {
        return "unknown".to_string();
    };
    let summary = match summarize_run(records) {
        Ok(s) => s,
        Err(_) => return "unknown".to_string(),
    };
    let candidate = SiCandidate {
        id: summary.best_candidate_id.clone(),
        text: if summary.best_candidate_text.is_empty() {
            "placeholder".to_string()
        } else {
            summary.best_candidate_text.clone()
        },
        parent_id: None,
        origin: si_agent_core::Origin::Manual,
        created_iteration: 0,
    };
    let mut val_history = Vec::new();
    let mut running = f64::MIN;
    for record in records {
        if let Some(val) = record.val {
            running = running.max(val.scalar);
            val_history.push(ValPoint {
                iteration: record.iteration,
                scalar: running,
            });
        }
    }
    let state = RunState {
        iteration: last.iteration + 1,
        history: Vec::new(),
        population: vec![candidate.clone()],
        best: Some(BestEntry {
            candidate,
            feedback: FeedbackSignal {
                scalar: summary.best_scalar,
                scores: ScoreVector::default(),
                critique_tags: vec![],
                critique_text: None,
                preference: None,
            },
        }),
        val_history,
        val_best: None,
        usage: summary.total_usage,
        rng_seed: config.seed,
        next_candidate_id: 0,
        pending_usage: UsageMeter::default(),
    };
    let decision = should_terminate(&state, config);
    if decision.stop {
        decision.reason.to_string()
    } else {
        "unknown".to_string()
    }
}

/// Markdown summary: best SI text, stop reason, totals.
pub fn report_markdown(records: &[RunRecord], config: Option<&RunConfig>) -> Result<String> {
    let summary = summarize_run(records)?;
    let stop = config
        .map(|c| replay_stop_reason(records, c))
        .unwrap_or_else(|| "unknown".to_string());
    let mut out = String::from("# Run report\n\n");
    out.push_str(&format!("- Iterations: {}\n", summary.iterations));
    out.push_str(&format!("- Stop reason: {stop}\n"));
    out.push_str(&format!(
        "- Best train scalar: {} (candidate {})\n",
        fmt_float(summary.best_scalar),
        summary.best_candidate_id
    ));
    if let Some(val) = summary.best_val_scalar {
        out.push_str(&format!("- Best validation scalar: {}\n", fmt_float(val)));
    }
    if let Some(performance) = summary.best_performance {
        out.push_str(&format!(
            "- Best candidate performance: {}\n",
            fmt_float(performance)
        ));
    }
    if let Some(fre) = summary.best_fre {
        out.push_str(&format!("- Best candidate raw FRE: {}\n", fmt_float(fre)));
    }
    let usage = summary.total_usage;
    out.push_str(&format!(
        "- Usage: {} prompt + {} completion tokens over {} calls, {} ms\n",
        usage.prompt_tokens, usage.completion_tokens, usage.call_count, usage.wall_ms
    ));
    out.push_str("\n## Best instruction\n\n```text\n");
    out.push_str(&summary.best_candidate_text);
    out.push_str("\n```\n");
    Ok(out)
}

/// Reads the run dir and writes `learning_curve.csv`, `tradeoff.csv`, and
/// `report.md` into `out_dir`.
pub fn write_reports(run_dir: &Path, out_dir: &Path) -> Result<()> {
    let records = read_run_log(run_dir)?;
    let config: Option<RunConfig> = std::fs::read_to_string(run_dir.join("config.json"))
        .ok()
        .and_then(|raw| serde_json::from_str(&raw).ok());
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create {}", out_dir.display()))?;
    std::fs::write(
        out_dir.join("learning_curve.csv"),
        learning_curve_csv(&records),
    )?;
    std::fs::write(out_dir.join("tradeoff.csv"), tradeoff_csv(&records))?;
    std::fs::write(
        out_dir.join("report.md"),
        report_markdown(&records, config.as_ref())?,
    )?;
    Ok(())
}
