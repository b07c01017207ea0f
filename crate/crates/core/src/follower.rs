//! The instruction-follower agent: executes tasks under a given SI against a
//! provider, or against the built-in deterministic synthetic follower, in
//! single and batch modes.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{FinishReason, SiCandidate, TaskInstance, TaskOutput, UsageMeter};
use crate::provider::{ChatProvider, ChatRequest, ProviderError};

#[derive(Debug, Error)]
pub enum FollowerError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("task {0} has no required_directives metadata for the synthetic follower")]
    SyntheticRuleMissing(String),
    #[error("provider mode requires a provider instance")]
    ProviderMissing,
    #[error("task batch is empty")]
    EmptyBatch,
    #[error("every task in the batch failed; last error: {0}")]
    AllTasksFailed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FollowerMode {
    Provider,
    Synthetic,
}

/// Where the SI goes in the rendered request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SiPlacement {
    /// SI occupies the system message slot.
    System,
    /// SI is prepended to the user turn.
    UserPrefix,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FollowerConfig {
    #[serde(default = "default_mode")]
    pub mode: FollowerMode,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default = "default_si_placement")]
    pub si_placement: SiPlacement,
}

fn default_mode() -> FollowerMode {
    FollowerMode::Synthetic
}
fn default_max_tokens() -> u32 {
    512
}
fn default_parallelism() -> usize {
    4
}
fn default_si_placement() -> SiPlacement {
    SiPlacement::System
}

impl Default for FollowerConfig {
    fn default() -> Self {
        Self {
            mode: FollowerMode::Synthetic,
            model: None,
            temperature: 0.0,
            max_tokens: 512,
            parallelism: 4,
            si_placement: SiPlacement::System,
        }
    }
}

impl FollowerConfig {
    pub fn synthetic() -> Self {
        Self::default()
    }
}

/// Pure deterministic follower: returns the task's first reference iff every
/// phrase in `required_directives` occurs case-insensitively in the SI text,
/// otherwise "I don't know.". Performance under this rule is a monotone
/// function of SI content, which is what closed-loop convergence tests need.
pub fn sim_follower(si_text: &str, task: &TaskInstance) -> Result<String, FollowerError> {
    let directives = task
        .required_directives()
        .ok_or_else(|| FollowerError::SyntheticRuleMissing(task.id.clone()))?;
    let haystack = si_text.to_lowercase();
    let satisfied = directives
        .iter()
        .all(|d| haystack.contains(&d.to_lowercase()));
    if satisfied {
        Ok(task.references.first().cloned().unwrap_or_default())
    } else {
        Ok("I don't know.".to_string())
    }
}

/// Executes one task under the SI. Provider mode issues a single chat
/// request (SI placement per config); synthetic mode applies `sim_follower`
/// with zero I/O.
pub fn execute(
    si: &SiCandidate,
    task: &TaskInstance,
    cfg: &FollowerConfig,
    provider: Option<&dyn ChatProvider>,
) -> Result<TaskOutput, FollowerError> {
    match cfg.mode {
        FollowerMode::Synthetic => {
            let text = sim_follower(&si.text, task)?;
            Ok(TaskOutput {
                task_id: task.id.clone(),
                si_id: si.id.clone(),
                text,
                usage: UsageMeter::default(),
                latency_ms: 0,
                finish: FinishReason::Stop,
            })
        }
        FollowerMode::Provider => {
            let provider = provider.ok_or(FollowerError::ProviderMissing)?;
            let model = cfg.model.clone().unwrap_or_default();
            let si_text = si.text.trim();
            let request = match cfg.si_placement {
                SiPlacement::System => ChatRequest::chat(
                    &model,
                    (!si_text.is_empty()).then_some(si_text),
                    &task.input,
                    cfg.temperature,
                    cfg.max_tokens,
                ),
                SiPlacement::UserPrefix => {
                    let user = if si_text.is_empty() {
                        task.input.clone()
                    } else {
                        format!("{si_text}\n\n{}", task.input)
                    };
                    ChatRequest::user_only(&model, &user, cfg.temperature, cfg.max_tokens)
                }
            };
            let response = provider.complete(&request)?;
            Ok(TaskOutput {
                task_id: task.id.clone(),
                si_id: si.id.clone(),
                text: response.text,
                latency_ms: response.usage.wall_ms,
                usage: response.usage,
                finish: response.finish_reason,
            })
        }
    }
}

fn error_output(si: &SiCandidate, task: &TaskInstance) -> TaskOutput {
    TaskOutput {
        task_id: task.id.clone(),
        si_id: si.id.clone(),
        text: String::new(),
        usage: UsageMeter::default(),
        latency_ms: 0,
        finish: FinishReason::Error,
    }
}

/// Executes a batch, fanning out up to `cfg.parallelism` concurrent calls.
/// Outputs are positionally aligned with inputs for every parallelism value,
/// and with parallelism 1 the batch is plain sequential execution. A failed
/// task degrades to an error-marked output; the batch errors only when every
/// task failed.
pub fn execute_batch(
    si: &SiCandidate,
    tasks: &[TaskInstance],
    cfg: &FollowerConfig,
    provider: Option<&dyn ChatProvider>,
) -> Result<Vec<TaskOutput>, FollowerError> {
    if tasks.is_empty() {
        return Err(FollowerError::EmptyBatch);
    }
    let workers = cfg.parallelism.max(1).min(tasks.len());
    let results: Vec<Result<TaskOutput, FollowerError>> = if workers == 1 {
        tasks
            .iter()
            .map(|task| execute(si, task, cfg, provider))
            .collect()
    } else {
        let next = AtomicUsize::new(0);
        let (sender, receiver) = mpsc::channel();
        std::thread::scope(|scope| {
            for _ in 0..workers {
                let sender = sender.clone();
                let next = &next;
                scope.spawn(move || loop {
                    let idx = next.fetch_add(1, Ordering::SeqCst);
                    if idx >= tasks.len() {
                        break;
                    }
                    let result = execute(si, &tasks[idx], cfg, provider);
                    if sender.send((idx, result)).is_err() {
                        break;
                    }
                });
            }
        });
        drop(sender);
        let mut collected: Vec<(usize, Result<TaskOutput, FollowerError>)> =
            receiver.into_iter().collect();
        collected.sort_by_key(|(idx, _)| *idx);
        collected.into_iter().map(|(_, r)| r).collect()
    };

    let mut outputs = Vec::with_capacity(tasks.len());
    let mut failures = 0usize;
    let mut last_error = String::new();
    for (task, result) in tasks.iter().zip(results) {
        match result {
            Ok(output) => outputs.push(output),
            Err(e) => {
                failures += 1;
                last_error = e.to_string();
                outputs.push(error_output(si, task));
            }
        }
    }
    if failures == tasks.len() {
        return Err(FollowerError::AllTasksFailed(last_error));
    }
    Ok(outputs)
}

/// Sum of per-task usage; exact by construction since meters are integers.
pub fn batch_usage(outputs: &[TaskOutput]) -> UsageMeter {
    outputs
        .iter()
        .fold(UsageMeter::default(), |acc, o| acc.merged(&o.usage))
}
