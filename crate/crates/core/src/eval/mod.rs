//! The feedback/reward agent: task-performance metrics, SI readability
//! metrics, LLM-as-judge scoring, and assembly of the structured feedback
//! signal.

pub mod judge;
pub mod metrics;
pub mod readability;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::follower::{self, FollowerConfig, FollowerError};
use crate::model::{
    normalize_fre, scalarize, CritiqueTag, FeedbackSignal, ModelError, ScoreVector, SiCandidate,
    TaskInstance, TaskType, UsageMeter, Weights,
};
use crate::provider::ChatProvider;
use judge::{JudgeConfig, JudgeContext, JudgeError, JudgeRubric};
use metrics::HarnessConfig;
use readability::split_sentences;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("answer pattern failed to compile: {0}")]
    PatternInvalid(String),
    #[error("candidate or reference is empty after tokenization")]
    EmptyInput,
    #[error("{0}")]
    DomainError(String),
    #[error("word contains no letters")]
    NoLetters,
    #[error("text is empty or contains no words")]
    EmptyText,
    #[error("code harness unavailable: {0}")]
    HarnessUnavailable(String),
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Follower(#[from] FollowerError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Judge(#[from] JudgeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("task type {0:?} needs a judge provider but none is configured")]
    JudgeUnavailable(TaskType),
    #[error("no tasks to evaluate")]
    NoTasks,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// Which optional score channels the evaluator fills. The task-performance
/// channel is always on.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ChannelConfig {
    #[serde(default = "default_true")]
    pub readability: bool,
    #[serde(default)]
    pub judge_task: bool,
    #[serde(default)]
    pub judge_readability: bool,
}

fn default_true() -> bool {
    true
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            readability: true,
            judge_task: false,
            judge_readability: false,
        }
    }
}

/// Providers available to one evaluation.
#[derive(Clone, Copy, Default)]
pub struct EvalProviders<'a> {
    pub follower: Option<&'a dyn ChatProvider>,
    pub judge: Option<&'a dyn ChatProvider>,
}

/// Everything evaluate_si needs beyond the candidate and tasks.
#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub channels: ChannelConfig,
    pub judge: JudgeConfig,
    pub harness: HarnessConfig,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            channels: ChannelConfig::default(),
            judge: JudgeConfig::default(),
            harness: HarnessConfig::new(std::env::temp_dir().join("si-agent-harness")),
        }
    }
}

/// Per-SI evaluation over a task list: per-task channel scores, their
/// aggregate, and the auxiliary statistics the critique rules need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub si_id: String,
    pub split: Split,
    pub per_task: Vec<(String, ScoreVector)>,
    pub aggregate: ScoreVector,
    pub usage: UsageMeter,
    /// Raw Flesch reading ease of the SI text, when computable.
    pub si_fre: Option<f64>,
    /// Mean sentence count over non-error outputs.
    pub mean_output_sentences: Option<f64>,
    /// Fraction of outputs matching their task's format_pattern, over tasks
    /// that declare one.
    pub format_match_rate: Option<f64>,
    /// Strictest max_sentences bound declared by any task in the batch.
    pub max_sentences_bound: Option<u64>,
}

/// Thresholds behind the critique tags.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CritiqueThresholds {
    #[serde(default = "default_low_accuracy")]
    pub low_accuracy: f64,
    #[serde(default = "default_format_match")]
    pub format_match: f64,
    #[serde(default = "default_readability_fre")]
    pub readability_fre: f64,
}

fn default_low_accuracy() -> f64 {
    0.5
}
fn default_format_match() -> f64 {
    0.5
}
fn default_readability_fre() -> f64 {
    50.0
}

impl Default for CritiqueThresholds {
    fn default() -> Self {
        Self {
            low_accuracy: 0.5,
            format_match: 0.5,
            readability_fre: 50.0,
        }
    }
}

fn critique_sentence(tag: CritiqueTag) -> &'static str {
    match tag {
        CritiqueTag::LowAccuracy => {
            "Task accuracy is low; outputs often fail to match the references."
        }
        CritiqueTag::TooVerbose => "Responses run longer than the allowed sentence budget.",
        CritiqueTag::WrongFormat => "Responses frequently violate the required output format.",
        CritiqueTag::SiUnreadable => {
            "The instruction itself is hard to read; shorten its sentences and words."
        }
    }
}

fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

fn judge_output_score(
    output_text: &str,
    task: &TaskInstance,
    provider: &dyn ChatProvider,
    cfg: &JudgeConfig,
) -> Result<f64, JudgeError> {
    let ctx = JudgeContext {
        task_input: Some(task.input.clone()),
        reference: task.references.first().cloned(),
    };
    judge::judge_score_averaged(
        output_text,
        JudgeRubric::TaskQuality,
        Some(&ctx),
        provider,
        cfg,
    )
    .map(|(score, _)| score)
}

/// Runs the follower over the batch and scores every output with the task
/// type's metric (reasoning/tool-use: exact match; style: BLEU; coding: the
/// execution harness + pass@1; generic: the task-quality judge). SI-level
/// readability channels are computed once per SI. Error-marked outputs score
/// zero rather than aborting the evaluation.
pub fn evaluate_si(
    si: &SiCandidate,
    tasks: &[TaskInstance],
    split: Split,
    follower_cfg: &FollowerConfig,
    providers: &EvalProviders,
    opts: &EvalOptions,
) -> Result<EvaluationRecord, EvalError> {
    if tasks.is_empty() {
        return Err(EvalError::NoTasks);
    }
    let outputs = follower::execute_batch(si, tasks, follower_cfg, providers.follower)?;
    let mut usage = follower::batch_usage(&outputs);

    let mut per_task: Vec<(String, ScoreVector)> = Vec::with_capacity(tasks.len());
    let mut sentence_counts: Vec<f64> = Vec::new();
    let mut format_checked = 0usize;
    let mut format_matched = 0usize;
    let mut max_sentences_bound: Option<u64> = None;

    for (task, output) in tasks.iter().zip(&outputs) {
        let mut scores = ScoreVector::default();
        if output.is_error() {
            scores.performance = Some(0.0);
        } else {
            match task.task_type {
                TaskType::Reasoning | TaskType::ToolUse => {
                    let value = match metrics::exact_match(&output.text, task) {
                        Ok(v) => f64::from(v),
                        Err(MetricError::EmptyInput) => 0.0,
                        Err(e) => return Err(e.into()),
                    };
                    scores.performance = Some(value);
                }
                TaskType::Style => {
                    let value = match metrics::bleu(&output.text, &task.references) {
                        Ok(v) => v,
                        Err(MetricError::EmptyInput) => 0.0,
                        Err(e) => return Err(e.into()),
                    };
                    scores.performance = Some(value);
                }
                TaskType::Coding => {
                    let (n, c) = metrics::run_code_samples(
                        task,
                        std::slice::from_ref(&output.text),
                        &opts.harness,
                    )?;
                    scores.performance = Some(metrics::pass_at_k(n, c, 1)?);
                }
                TaskType::Generic => {
                    let provider = providers
                        .judge
                        .ok_or(EvalError::JudgeUnavailable(TaskType::Generic))?;
                    let (score, judge_usage) = judge::judge_score_averaged(
                        &output.text,
                        JudgeRubric::TaskQuality,
                        Some(&JudgeContext {
                            task_input: Some(task.input.clone()),
                            reference: task.references.first().cloned(),
                        }),
                        provider,
                        &opts.judge,
                    )?;
                    usage.merge(&judge_usage);
                    scores.judge_task = Some(score);
                }
            }
            // optional judge channel on top of the automated metric
            if opts.channels.judge_task && task.task_type != TaskType::Generic {
                if let Some(provider) = providers.judge {
                    let score = judge_output_score(&output.text, task, provider, &opts.judge)?;
                    scores.judge_task = Some(score);
                }
            }
            sentence_counts.push(split_sentences(&output.text).len() as f64);
            if let Some(pattern) = task.format_pattern() {
                let re = regex::Regex::new(&pattern)
                    .map_err(|e| MetricError::PatternInvalid(format!("{pattern}: {e}")))?;
                format_checked += 1;
                if re.is_match(&output.text) {
                    format_matched += 1;
                }
            }
        }
        if let Some(bound) = task.max_sentences() {
            max_sentences_bound =
                Some(max_sentences_bound.map_or(bound, |current| current.min(bound)));
        }
        per_task.push((task.id.clone(), scores));
    }

    let mut aggregate = ScoreVector {
        performance: mean(
            &per_task
                .iter()
                .filter_map(|(_, s)| s.performance)
                .collect::<Vec<_>>(),
        ),
        judge_task: mean(
            &per_task
                .iter()
                .filter_map(|(_, s)| s.judge_task)
                .collect::<Vec<_>>(),
        ),
        ..Default::default()
    };

    // SI-level readability channels, computed once per SI
    let mut si_fre = None;
    if !si.text.trim().is_empty() {
        if opts.channels.readability {
            let stats = readability::readability_stats(&si.text)?;
            si_fre = Some(stats.fre);
            aggregate.readability = Some(normalize_fre(stats.fre)?);
        }
        if opts.channels.judge_readability {
            if let Some(provider) = providers.judge {
                let (score, judge_usage) = judge::judge_score_averaged(
                    &si.text,
                    JudgeRubric::SiReadability,
                    None,
                    provider,
                    &opts.judge,
                )?;
                usage.merge(&judge_usage);
                aggregate.judge_readability = Some(score);
            }
        }
    }

    Ok(EvaluationRecord {
        si_id: si.id.clone(),
        split,
        per_task,
        aggregate,
        usage,
        si_fre,
        mean_output_sentences: mean(&sentence_counts),
        format_match_rate: if format_checked > 0 {
            Some(format_matched as f64 / format_checked as f64)
        } else {
            None
        },
        max_sentences_bound,
    })
}

/// Scalarizes the record under the run's weights and attaches critique tags
/// per the fixed rule table. The scalar is reproducible from the persisted
/// record and weights alone.
pub fn build_feedback(
    record: &EvaluationRecord,
    weights: &Weights,
    thresholds: &CritiqueThresholds,
) -> Result<FeedbackSignal, ModelError> {
    let scalar = scalarize(&record.aggregate, weights)?;
    let mut tags = Vec::new();
    if record
        .aggregate
        .performance
        .is_some_and(|p| p < thresholds.low_accuracy)
    {
        tags.push(CritiqueTag::LowAccuracy);
    }
    if let (Some(mean_sentences), Some(bound)) =
        (record.mean_output_sentences, record.max_sentences_bound)
    {
        if mean_sentences > bound as f64 {
            tags.push(CritiqueTag::TooVerbose);
        }
    }
    if record
        .format_match_rate
        .is_some_and(|rate| rate < thresholds.format_match)
    {
        tags.push(CritiqueTag::WrongFormat);
    }
    if record
        .si_fre
        .is_some_and(|fre| fre < thresholds.readability_fre)
    {
        tags.push(CritiqueTag::SiUnreadable);
    }
    let critique_text = if tags.is_empty() {
        None
    } else {
        Some(
            tags.iter()
                .map(|t| critique_sentence(*t))
                .collect::<Vec<_>>()
                .join(" "),
        )
    };
    Ok(FeedbackSignal {
        scalar,
        scores: record.aggregate,
        critique_tags: tags,
        critique_text,
        preference: None,
    })
}
