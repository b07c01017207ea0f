//! Shared domain types: SI candidates, tasks, outputs, score vectors,
//! feedback signals, usage accounting, and the weighted scalarization that
//! turns a score vector into a single fitness number.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("no score channel present for the positively weighted {0} family")]
    MissingChannel(&'static str),
    #[error("value is not finite")]
    NonFinite,
    #[error("weights must be non-negative with a strictly positive sum")]
    InvalidWeights,
    #[error("score {0} outside [0,1]")]
    ScoreOutOfRange(f64),
    #[error("candidate text is empty after trimming")]
    EmptyText,
    #[error("unknown origin string: {0}")]
    UnknownOrigin(String),
}

/// Provenance of an SI candidate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Origin {
    SeedTemplate,
    LlmRefined,
    /// Produced by a named mutation operator, e.g. `mutation:inject_directive`.
    Mutation(String),
    HeuristicEdit,
    Manual,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::SeedTemplate => write!(f, "seed-template"),
            Origin::LlmRefined => write!(f, "llm-refined"),
            Origin::Mutation(op) => write!(f, "mutation:{op}"),
            Origin::HeuristicEdit => write!(f, "heuristic-edit"),
            Origin::Manual => write!(f, "manual"),
        }
    }
}

impl From<Origin> for String {
    fn from(o: Origin) -> String {
        o.to_string()
    }
}

impl TryFrom<String> for Origin {
    type Error = ModelError;

    fn try_from(s: String) -> Result<Self, ModelError> {
        match s.as_str() {
            "seed-template" => Ok(Origin::SeedTemplate),
            "llm-refined" => Ok(Origin::LlmRefined),
            "heuristic-edit" => Ok(Origin::HeuristicEdit),
            "manual" => Ok(Origin::Manual),
            other => match other.strip_prefix("mutation:") {
                Some(op) if !op.is_empty() => Ok(Origin::Mutation(op.to_string())),
                _ => Err(ModelError::UnknownOrigin(s)),
            },
        }
    }
}

/// One human-readable instruction text with lineage metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiCandidate {
    pub id: String,
    pub text: String,
    pub parent_id: Option<String>,
    pub origin: Origin,
    pub created_iteration: u32,
}

impl SiCandidate {
    /// Builds a candidate, rejecting text that is empty after trimming.
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        parent_id: Option<String>,
        origin: Origin,
        created_iteration: u32,
    ) -> Result<Self, ModelError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(ModelError::EmptyText);
        }
        Ok(Self {
            id: id.into(),
            text,
            parent_id,
            origin,
            created_iteration,
        })
    }
}

/// Deterministic sequential id source for candidates within a run.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct CandidateIds {
    next: u64,
}

impl CandidateIds {
    pub fn starting_at(next: u64) -> Self {
        Self { next }
    }

    pub fn next_id(&mut self) -> String {
        self.next += 1;
        format!("si-{:06}", self.next)
    }

    pub fn next_value(&self) -> u64 {
        self.next
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskType {
    Reasoning,
    Coding,
    Style,
    ToolUse,
    Generic,
}

/// One task input with references and task-type metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub id: String,
    pub input: String,
    #[serde(default)]
    pub references: Vec<String>,
    pub task_type: TaskType,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl TaskInstance {
    fn meta_str(&self, key: &str) -> Option<String> {
        self.metadata
            .get(key)
            .and_then(|v| v.as_str())
            .map(str::to_string)
    }

    /// Extraction pattern for exact-match scoring.
    pub fn answer_pattern(&self) -> Option<String> {
        self.meta_str("answer_pattern")
    }

    /// Output-format check pattern.
    pub fn format_pattern(&self) -> Option<String> {
        self.meta_str("format_pattern")
    }

    /// Phrases the synthetic follower requires in the SI.
    pub fn required_directives(&self) -> Option<Vec<String>> {
        self.metadata.get("required_directives").and_then(|v| {
            v.as_array().map(|arr| {
                arr.iter()
                    .filter_map(|x| x.as_str().map(str::to_string))
                    .collect()
            })
        })
    }

    /// Verbosity bound on follower outputs.
    pub fn max_sentences(&self) -> Option<u64> {
        self.metadata.get("max_sentences").and_then(|v| v.as_u64())
    }

    /// Per-sample command template for code tasks.
    pub fn test_command(&self) -> Option<String> {
        self.meta_str("test_command")
    }
}

/// Token and call accounting. All fields are exact integers so accumulation
/// is associative and commutative.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageMeter {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub call_count: u64,
    pub wall_ms: u64,
}

impl UsageMeter {
    pub fn merge(&mut self, other: &UsageMeter) {
        self.prompt_tokens += other.prompt_tokens;
        self.completion_tokens += other.completion_tokens;
        self.call_count += other.call_count;
        self.wall_ms += other.wall_ms;
    }

    pub fn merged(mut self, other: &UsageMeter) -> UsageMeter {
        self.merge(other);
        self
    }

    pub fn total_tokens(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

/// The Follower's response for one (SI, task) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskOutput {
    pub task_id: String,
    pub si_id: String,
    pub text: String,
    pub usage: UsageMeter,
    pub latency_ms: u64,
    pub finish: FinishReason,
}

impl TaskOutput {
    pub fn is_error(&self) -> bool {
        self.finish == FinishReason::Error
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

/// Named score channels, each in [0,1] when present. `performance` and
/// `judge_task` form the performance family; `readability` and
/// `judge_readability` the readability family.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub performance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub readability: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub judge_task: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub judge_readability: Option<f64>,
}

impl ScoreVector {
    pub fn validate(&self) -> Result<(), ModelError> {
        for v in [
            self.performance,
            self.readability,
            self.judge_task,
            self.judge_readability,
        ]
        .into_iter()
        .flatten()
        {
            if !v.is_finite() {
                return Err(ModelError::NonFinite);
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(ModelError::ScoreOutOfRange(v));
            }
        }
        Ok(())
    }

    /// Mean of the present performance-family channels.
    pub fn performance_family(&self) -> Option<f64> {
        mean_of_present(&[self.performance, self.judge_task])
    }

    /// Mean of the present readability-family channels.
    pub fn readability_family(&self) -> Option<f64> {
        mean_of_present(&[self.readability, self.judge_readability])
    }
}

fn mean_of_present(channels: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = channels.iter().copied().flatten().collect();
    if present.is_empty() {
        None
    } else {
        Some(present.iter().sum::<f64>() / present.len() as f64)
    }
}

/// Critique tags the evaluator can attach to feedback. Declaration order is
/// the order heuristic edits are applied in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CritiqueTag {
    LowAccuracy,
    TooVerbose,
    WrongFormat,
    SiUnreadable,
}

impl CritiqueTag {
    pub const ALL: [CritiqueTag; 4] = [
        CritiqueTag::LowAccuracy,
        CritiqueTag::TooVerbose,
        CritiqueTag::WrongFormat,
        CritiqueTag::SiUnreadable,
    ];
}

/// A recorded human preference between two candidates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Preference {
    pub chosen: String,
    pub rejected: String,
}

/// Structured feedback for one candidate: scalar fitness, the score vector
/// it was derived from, critique tags/text, and an optional preference label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackSignal {
    pub scalar: f64,
    pub scores: ScoreVector,
    #[serde(default)]
    pub critique_tags: Vec<CritiqueTag>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub critique_text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preference: Option<Preference>,
}

/// Relative importance of the performance and readability families, stored
/// normalized so the two weights always sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WeightsRaw")]
pub struct Weights {
    pub performance: f64,
    pub readability: f64,
}

#[derive(Deserialize)]
struct WeightsRaw {
    performance: f64,
    readability: f64,
}

impl TryFrom<WeightsRaw> for Weights {
    type Error = ModelError;

    fn try_from(raw: WeightsRaw) -> Result<Self, ModelError> {
        Weights::new(raw.performance, raw.readability)
    }
}

impl Weights {
    pub fn new(performance: f64, readability: f64) -> Result<Self, ModelError> {
        if !performance.is_finite() || !readability.is_finite() {
            return Err(ModelError::NonFinite);
        }
        if performance < 0.0 || readability < 0.0 {
            return Err(ModelError::InvalidWeights);
        }
        let sum = performance + readability;
        if sum <= 0.0 {
            return Err(ModelError::InvalidWeights);
        }
        Ok(Self {
            performance: performance / sum,
            readability: readability / sum,
        })
    }

    /// Performance-only weighting.
    pub fn performance_only() -> Self {
        Self {
            performance: 1.0,
            readability: 0.0,
        }
    }
}

impl Default for Weights {
    fn default() -> Self {
        Self {
            performance: 0.7,
            readability: 0.3,
        }
    }
}

/// Collapses a score vector into one number in [0,1]: each family is averaged
/// over its present channels, then the family means are combined with the
/// normalized weights. A positively weighted family with no present channel
/// is an error.
pub fn scalarize(scores: &ScoreVector, weights: &Weights) -> Result<f64, ModelError> {
    scores.validate()?;
    let mut total = 0.0;
    if weights.performance > 0.0 {
        let perf = scores
            .performance_family()
            .ok_or(ModelError::MissingChannel("performance"))?;
        total += weights.performance * perf;
    }
    if weights.readability > 0.0 {
        let read = scores
            .readability_family()
            .ok_or(ModelError::MissingChannel("readability"))?;
        total += weights.readability * read;
    }
    Ok(total.clamp(0.0, 1.0))
}

/// Maps a raw Flesch reading-ease value onto the unit score channel:
/// clamp to [0,100], divide by 100.
pub fn normalize_fre(fre: f64) -> Result<f64, ModelError> {
    if !fre.is_finite() {
        return Err(ModelError::NonFinite);
    }
    Ok(fre.clamp(0.0, 100.0) / 100.0)
}
