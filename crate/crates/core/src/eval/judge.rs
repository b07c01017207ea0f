//! LLM-as-a-judge scoring with fixed rubric templates and strict score-line
//! parsing. Rubrics ship with the artifact so judge behavior is scriptable.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::UsageMeter;
use crate::provider::{ChatProvider, ChatRequest, ProviderError};

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("judge reply contained no valid `Score: <1-5>` line after one retry")]
    ParseError,
    #[error(transparent)]
    Provider(#[from] ProviderError),
}

/// Which rubric the judge applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeRubric {
    TaskQuality,
    SiReadability,
}

/// Task context rendered into the task-quality rubric.
#[derive(Debug, Clone, Default)]
pub struct JudgeContext {
    pub task_input: Option<String>,
    pub reference: Option<String>,
}

/// Rubric template, version 1. `{task}`, `{reference}` and `{subject}` are
/// substituted at render time.
pub const TASK_QUALITY_RUBRIC: &str = "You are grading a model response to a task.

Task input:
{task}

Reference answer (may be empty):
{reference}

Response to grade:
{subject}

Rate the response for correctness, helpfulness, and relevance on a scale from 1 (very poor) to 5 (excellent).
Explain briefly, then end your reply with a line of exactly this form:
Score: <n>";

/// Rubric template, version 1.
pub const SI_READABILITY_RUBRIC: &str = "You are grading the readability of a system instruction.

Instruction to grade:
{subject}

Rate the instruction for clarity, conciseness, and understandability on a scale from 1 (very hard to read) to 5 (very easy to read).
Explain briefly, then end your reply with a line of exactly this form:
Score: <n>";

const FORMAT_REMINDER: &str =
    "\n\nYour previous reply had no valid score line. Reply again and end with a line of exactly this form:\nScore: <n>";

/// Single judge verdict: the raw 1-5 rating and its unit-interval mapping
/// (raw - 1) / 4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeResult {
    pub raw: u8,
    pub normalized: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
}

/// Provider-call settings for the judge role.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgeConfig {
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default = "default_judge_temperature")]
    pub temperature: f64,
    #[serde(default = "default_judge_max_tokens")]
    pub max_tokens: u32,
    /// Number of repeated judgments averaged per subject.
    #[serde(default = "default_judge_repeats")]
    pub repeats: u32,
}

fn default_judge_temperature() -> f64 {
    0.0
}
fn default_judge_max_tokens() -> u32 {
    256
}
fn default_judge_repeats() -> u32 {
    1
}

impl Default for JudgeConfig {
    fn default() -> Self {
        Self {
            model: None,
            temperature: 0.0,
            max_tokens: 256,
            repeats: 1,
        }
    }
}

pub fn render_rubric(subject: &str, rubric: JudgeRubric, context: Option<&JudgeContext>) -> String {
    let template = match rubric {
        JudgeRubric::TaskQuality => TASK_QUALITY_RUBRIC,
        JudgeRubric::SiReadability => SI_READABILITY_RUBRIC,
    };
    let task = context
        .and_then(|c| c.task_input.clone())
        .unwrap_or_default();
    let reference = context
        .and_then(|c| c.reference.clone())
        .unwrap_or_default();
    template
        .replace("{task}", &task)
        .replace("{reference}", &reference)
        .replace("{subject}", subject)
}

/// Parses the last `Score:` occurrence followed by an integer in 1..=5.
pub fn parse_score(text: &str) -> Option<u8> {
    for (idx, _) in text
        .match_indices("Score:")
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
    {
        let rest = text[idx + "Score:".len()..].trim_start();
        let digits: String = rest.chars().take_while(|c| c.is_ascii_digit()).collect();
        if let Ok(v) = digits.parse::<u8>() {
            if (1..=5).contains(&v) {
                return Some(v);
            }
        }
    }
    None
}

/// Renders the rubric, calls the provider, and parses the rating. A reply
/// without a valid score line is re-asked once with a format reminder; a
/// second failure is a `ParseError`. Returns the result and the usage of all
/// calls made.
pub fn judge_score(
    subject: &str,
    rubric: JudgeRubric,
    context: Option<&JudgeContext>,
    provider: &dyn ChatProvider,
    cfg: &JudgeConfig,
) -> Result<(JudgeResult, UsageMeter), JudgeError> {
    let prompt = render_rubric(subject, rubric, context);
    let model = cfg.model.clone().unwrap_or_default();
    let mut usage = UsageMeter::default();
    for attempt in 0..2 {
        let text = if attempt == 0 {
            prompt.clone()
        } else {
            format!("{prompt}{FORMAT_REMINDER}")
        };
        let request = ChatRequest::user_only(&model, &text, cfg.temperature, cfg.max_tokens);
        let response = provider.complete(&request)?;
        usage.merge(&response.usage);
        if let Some(raw) = parse_score(&response.text) {
            let result = JudgeResult {
                raw,
                normalized: f64::from(raw - 1) / 4.0,
                rationale: Some(response.text),
            };
            return Ok((result, usage));
        }
    }
    Err(JudgeError::ParseError)
}

/// Averages `cfg.repeats` normalized judgments of the same subject.
pub fn judge_score_averaged(
    subject: &str,
    rubric: JudgeRubric,
    context: Option<&JudgeContext>,
    provider: &dyn ChatProvider,
    cfg: &JudgeConfig,
) -> Result<(f64, UsageMeter), JudgeError> {
    let repeats = cfg.repeats.max(1);
    let mut usage = UsageMeter::default();
    let mut sum = 0.0;
    for _ in 0..repeats {
        let (result, call_usage) = judge_score(subject, rubric, context, provider, cfg)?;
        usage.merge(&call_usage);
        sum += result.normalized;
    }
    Ok((sum / f64::from(repeats), usage))
}
