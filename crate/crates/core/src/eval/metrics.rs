//! Task-performance metrics: exact match, sentence-level BLEU, ROUGE-L F1,
//! the unbiased pass@k estimator, and the code-execution harness feeding it.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use regex::Regex;

use super::MetricError;
use crate::model::TaskInstance;

fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|t| t.to_lowercase()).collect()
}

fn normalize_answer(text: &str) -> String {
    text.trim()
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Returns 1 iff the (optionally pattern-extracted) output equals any
/// reference after trim/lowercase/whitespace normalization.
///
/// When `answer_pattern` is set, its first capture group on the first match
/// is the extraction; a pattern that does not match falls back to the whole
/// output.
pub fn exact_match(output: &str, task: &TaskInstance) -> Result<u8, MetricError> {
    if task.references.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let extracted = match task.answer_pattern() {
        Some(pattern) => {
            let re = Regex::new(&pattern)
                .map_err(|e| MetricError::PatternInvalid(format!("{pattern}: {e}")))?;
            re.captures(output)
                .and_then(|caps| caps.get(1))
                .map(|m| m.as_str().to_string())
                .unwrap_or_else(|| output.to_string())
        }
        None => output.to_string(),
    };
    let norm = normalize_answer(&extracted);
    let hit = task.references.iter().any(|r| normalize_answer(r) == norm);
    Ok(u8::from(hit))
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence-level BLEU over whitespace tokens (lowercased): geometric mean of
/// clipped n-gram precisions for n = 1..min(4, candidate length), add-one
/// smoothing on numerator and denominator for n >= 2, times the brevity
/// penalty exp(1 - r/c) when the candidate is shorter than the closest
/// reference.
pub fn bleu(candidate: &str, references: &[String]) -> Result<f64, MetricError> {
    let cand = tokenize(candidate);
    let refs: Vec<Vec<String>> = references
        .iter()
        .map(|r| tokenize(r))
        .filter(|t| !t.is_empty())
        .collect();
    if cand.is_empty() || refs.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let c = cand.len();
    let max_n = c.min(4);
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let cand_counts = ngram_counts(&cand, n);
        let ref_counts: Vec<HashMap<&[String], usize>> =
            refs.iter().map(|r| ngram_counts(r, n)).collect();
        let total = c - n + 1;
        let mut clipped = 0usize;
        for (gram, &count) in &cand_counts {
            let max_ref = ref_counts
                .iter()
                .map(|rc| rc.get(gram).copied().unwrap_or(0))
                .max()
                .unwrap_or(0);
            clipped += count.min(max_ref);
        }
        let (num, den) = if n >= 2 {
            (clipped + 1, total + 1)
        } else {
            (clipped, total)
        };
        if num == 0 {
            return Ok(0.0);
        }
        log_sum += (num as f64 / den as f64).ln();
    }
    let precision = (log_sum / max_n as f64).exp();
    // closest reference length, ties towards the shorter reference
    let r = refs
        .iter()
        .map(|t| t.len())
        .min_by_key(|&len| ((len as i64 - c as i64).abs(), len))
        .unwrap();
    let bp = if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    };
    Ok((precision * bp).clamp(0.0, 1.0))
}

/// ROUGE-L F1 over whitespace tokens (lowercased): P = LCS/|candidate|,
/// R = LCS/|reference|, F1 = 2PR/(P+R) with 0 when P+R = 0.
pub fn rouge_l(candidate: &str, reference: &str) -> Result<f64, MetricError> {
    let cand = tokenize(candidate);
    let refr = tokenize(reference);
    if cand.is_empty() || refr.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let (n, m) = (refr.len(), cand.len());
    let mut dp = vec![vec![0usize; m + 1]; n + 1];
    for i in 0..n {
        for j in 0..m {
            dp[i + 1][j + 1] = if refr[i] == cand[j] {
                dp[i][j] + 1
            } else {
                dp[i + 1][j].max(dp[i][j + 1])
            };
        }
    }
    let lcs = dp[n][m] as f64;
    let precision = lcs / m as f64;
    let recall = lcs / n as f64;
    if precision + recall == 0.0 {
        Ok(0.0)
    } else {
        Ok(2.0 * precision * recall / (precision + recall))
    }
}

/// Unbiased pass@k estimator: 1 - C(n-c, k)/C(n, k), computed with the stable
/// product form so large n never overflows.
pub fn pass_at_k(n: u64, c: u64, k: u64) -> Result<f64, MetricError> {
    if c > n || k == 0 || k > n {
        return Err(MetricError::DomainError(format!(
            "pass_at_k requires 0 <= c <= n and 1 <= k <= n, got n={n} c={c} k={k}"
        )));
    }
    if n - c < k {
        return Ok(1.0);
    }
    let mut product = 1.0f64;
    for i in (n - c + 1)..=n {
        product *= 1.0 - k as f64 / i as f64;
    }
    Ok(1.0 - product)
}

/// Settings for the code-execution harness.
#[derive(Debug, Clone)]
pub struct HarnessConfig {
    /// Directory sample files are written into.
    pub work_dir: PathBuf,
    /// Per-sample timeout; a timed-out sample counts as a failure.
    pub timeout_ms: u64,
}

impl HarnessConfig {
    pub fn new(work_dir: impl Into<PathBuf>) -> Self {
        Self {
            work_dir: work_dir.into(),
            timeout_ms: 10_000,
        }
    }
}

enum RunOutcome {
    Exited(bool),
    TimedOut,
}

fn run_with_timeout(command: &str, timeout: Duration) -> Result<RunOutcome, MetricError> {
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(command)
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| MetricError::HarnessUnavailable(format!("cannot spawn `{command}`: {e}")))?;
    let start = Instant::now();
    loop {
        match child.try_wait() {
            Ok(Some(status)) => return Ok(RunOutcome::Exited(status.success())),
            Ok(None) => {
                if start.elapsed() >= timeout {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Ok(RunOutcome::TimedOut);
                }
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(e) => {
                return Err(MetricError::HarnessUnavailable(format!(
                    "wait failed for `{command}`: {e}"
                )))
            }
        }
    }
}

/// Writes each sample to a file under the work dir and runs the task's
/// `test_command` template (with `{file}` substituted) through the platform
/// shell. Returns (samples, correct) where correct counts zero exit
/// statuses; timeouts count as failures.
pub fn run_code_samples(
    task: &TaskInstance,
    outputs: &[String],
    cfg: &HarnessConfig,
) -> Result<(u64, u64), MetricError> {
    let template = task.test_command().ok_or_else(|| {
        MetricError::HarnessUnavailable(format!("task {} has no test_command", task.id))
    })?;
    if !template.contains("{file}") {
        return Err(MetricError::HarnessUnavailable(format!(
            "test_command for task {} lacks the {{file}} placeholder",
            task.id
        )));
    }
    std::fs::create_dir_all(&cfg.work_dir)
        .map_err(|e| MetricError::HarnessUnavailable(format!("work dir: {e}")))?;
    let mut correct = 0u64;
    for (i, sample) in outputs.iter().enumerate() {
        let path = cfg.work_dir.join(format!("{}_sample_{i:03}.code", task.id));
        std::fs::write(&path, sample)
            .map_err(|e| MetricError::HarnessUnavailable(format!("write sample: {e}")))?;
        let command = template.replace("{file}", &shell_quote(&path));
        match run_with_timeout(&command, Duration::from_millis(cfg.timeout_ms))? {
            RunOutcome::Exited(true) => correct += 1,
            RunOutcome::Exited(false) | RunOutcome::TimedOut => {}
        }
    }
    Ok((outputs.len() as u64, correct))
}

fn shell_quote(path: &Path) -> String {
    let s = path.to_string_lossy();
    if s.contains(|c: char| c.is_whitespace() || c == '\'' || c == '"') {
        format!("'{}'", s.replace('\'', "'\\''"))
    } else {
        s.into_owned()
    }
}
