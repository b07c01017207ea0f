//! The iterative optimization loop: generation, execution, evaluation,
//! refinement — with minibatch training evaluation, periodic validation,
//! plateau/budget/target termination, checkpointing, and append-only run
//! logging.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{sample_minibatch, Dataset, DatasetError};
use crate::eval::judge::JudgeConfig;
use crate::eval::metrics::HarnessConfig;
use crate::eval::{
    build_feedback, evaluate_si, ChannelConfig, CritiqueThresholds, EvalError, EvalOptions,
    EvalProviders, Split,
};
use crate::follower::FollowerConfig;
use crate::instructor::{
    directive_library_from_file, evolve_step, heuristic_edit, propose_initial, refine_llm,
    EvolutionConfig, EvolveCtx, HeuristicContext, HistoryEntry, InstructorError, InstructorLlm,
    MetaPromptConfig, SeedSource, TemplateLibrary,
};
use crate::model::{
    CandidateIds, CritiqueTag, FeedbackSignal, ModelError, Preference, ScoreVector, SiCandidate,
    UsageMeter, Weights,
};
use crate::provider::{ChatProvider, ProviderSpec};
use crate::rng::derive_rng;

#[derive(Debug, Error)]
pub enum LoopError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint schema version mismatch (found {found:?}, expected {expected})")]
    SchemaMismatch { found: Option<u64>, expected: u64 },
    #[error("checkpoint is corrupt: {0}")]
    CorruptCheckpoint(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Instructor(#[from] InstructorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("dataset has an empty train split")]
    EmptyTrainSplit,
    #[error("labels file {path} line {line} is invalid: {message}")]
    LabelsParse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("run aborted at iteration {iteration}: {message}")]
    Aborted { iteration: u32, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Llm,
    Evolutionary,
    Heuristic,
}

/// Meta-prompt layout knobs carried by the run config; the full
/// `MetaPromptConfig` is assembled with the run's task description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetaPromptSettings {
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_exemplar_count")]
    pub exemplar_count: usize,
}

fn default_top_k() -> usize {
    10
}
fn default_exemplar_count() -> usize {
    3
}

impl Default for MetaPromptSettings {
    fn default() -> Self {
        Self {
            top_k: 10,
            exemplar_count: 3,
        }
    }
}

/// Provider endpoints per agent role, as configured.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RoleProviderSpecs {
    #[serde(default)]
    pub instructor: Option<ProviderSpec>,
    #[serde(default)]
    pub follower: Option<ProviderSpec>,
    #[serde(default)]
    pub judge: Option<ProviderSpec>,
}

/// Full resolved configuration of one optimization run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub strategy: Strategy,
    pub weights: Weights,
    pub max_iterations: u32,
    pub minibatch_size: usize,
    pub val_every: u32,
    pub plateau_window: usize,
    pub plateau_min_delta: f64,
    pub target_scalar: Option<f64>,
    pub token_budget: Option<u64>,
    pub seed: u64,
    /// Raw FRE threshold used by both the readability filter and the
    /// SI_UNREADABLE critique.
    pub readability_threshold: f64,
    /// Ablation hook: disables the evolutionary readability filter.
    pub readability_filter: bool,
    pub task_description: String,
    pub follower: FollowerConfig,
    pub channels: ChannelConfig,
    pub judge: JudgeConfig,
    pub evolution: EvolutionConfig,
    pub meta_prompt: MetaPromptSettings,
    pub thresholds: CritiqueThresholds,
    pub providers: RoleProviderSpecs,
    /// Optional labels.jsonl from the preference-labeling command.
    pub labels_path: Option<String>,
    /// Optional plain-text seed template library (one per line).
    pub seed_templates_path: Option<String>,
    /// Optional plain-text directive library (one per line).
    pub directive_library_path: Option<String>,
    pub instructor_temperature: f64,
    pub instructor_max_tokens: u32,
    pub harness_timeout_ms: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Evolutionary,
            weights: Weights::default(),
            max_iterations: 30,
            minibatch_size: 8,
            val_every: 5,
            plateau_window: 5,
            plateau_min_delta: 0.01,
            target_scalar: None,
            token_budget: None,
            seed: 42,
            readability_threshold: 50.0,
            readability_filter: true,
            task_description: String::new(),
            follower: FollowerConfig::default(),
            channels: ChannelConfig::default(),
            judge: JudgeConfig::default(),
            evolution: EvolutionConfig::default(),
            meta_prompt: MetaPromptSettings::default(),
            thresholds: CritiqueThresholds::default(),
            providers: RoleProviderSpecs::default(),
            labels_path: None,
            seed_templates_path: None,
            directive_library_path: None,
            instructor_temperature: 1.0,
            instructor_max_tokens: 1024,
            harness_timeout_ms: 10_000,
        }
    }
}

impl RunConfig {
    fn meta_prompt_config(&self) -> MetaPromptConfig {
        MetaPromptConfig {
            task_description: self.task_description.clone(),
            top_k: self.meta_prompt.top_k,
            exemplar_count: self.meta_prompt.exemplar_count,
            ..Default::default()
        }
    }

    /// Evolution settings with the run-wide readability threshold applied.
    fn effective_evolution(&self) -> Result<EvolutionConfig, LoopError> {
        let mut evolution = self.evolution.clone();
        evolution.readability_threshold = self.readability_threshold;
        if let Some(path) = &self.directive_library_path {
            evolution.directive_library =
                directive_library_from_file(path).map_err(|source| LoopError::Io {
                    path: path.clone(),
                    source,
                })?;
        }
        Ok(evolution)
    }

    fn effective_thresholds(&self) -> CritiqueThresholds {
        CritiqueThresholds {
            readability_fre: self.readability_threshold,
            ..self.thresholds
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestEntry {
    pub candidate: SiCandidate,
    pub feedback: FeedbackSignal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValPoint {
    pub iteration: u32,
    /// Running-best validation scalar as of this evaluation.
    pub scalar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValBest {
    pub candidate: SiCandidate,
    pub scalar: f64,
}

/// Persistent loop state. Together with the immutable config and scripted
/// providers this reproduces a run exactly: all randomness is derived from
/// (seed, purpose, iteration).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub iteration: u32,
    pub history: Vec<HistoryEntry>,
    pub population: Vec<SiCandidate>,
    pub best: Option<BestEntry>,
    pub val_history: Vec<ValPoint>,
    pub val_best: Option<ValBest>,
    pub usage: UsageMeter,
    pub rng_seed: u64,
    pub next_candidate_id: u64,
    /// Usage accrued before the next loggable iteration (seeding).
    pub pending_usage: UsageMeter,
}

impl RunState {
    /// Best validation scalar when validation ran, else best train scalar.
    pub fn best_scalar_so_far(&self) -> Option<f64> {
        self.val_history
            .last()
            .map(|p| p.scalar)
            .or_else(|| self.best.as_ref().map(|b| b.feedback.scalar))
    }

    /// The candidate a finished run reports: best by validation scalar when
    /// validation ran, else by train scalar, else the first seed.
    pub fn reported_best(&self) -> Option<&SiCandidate> {
        self.val_best
            .as_ref()
            .map(|v| &v.candidate)
            .or_else(|| self.best.as_ref().map(|b| &b.candidate))
            .or_else(|| self.population.first())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIterations,
    Plateau,
    TargetReached,
    BudgetExhausted,
    None,
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            StopReason::MaxIterations => "max_iterations",
            StopReason::Plateau => "plateau",
            StopReason::TargetReached => "target_reached",
            StopReason::BudgetExhausted => "budget_exhausted",
            StopReason::None => "none",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StopDecision {
    pub stop: bool,
    pub reason: StopReason,
}

impl StopDecision {
    fn fire(reason: StopReason) -> Self {
        Self { stop: true, reason }
    }

    fn none() -> Self {
        Self {
            stop: false,
            reason: StopReason::None,
        }
    }
}

/// True iff the running-best sequence gained less than `min_delta` over the
/// trailing `window` entries. Histories no longer than the window never
/// plateau.
pub fn detect_plateau(running_best: &[f64], window: usize, min_delta: f64) -> bool {
    if window == 0 || running_best.len() <= window {
        return false;
    }
    let last = running_best[running_best.len() - 1];
    let earlier = running_best[running_best.len() - 1 - window];
    last - earlier < min_delta
}

/// Checks the termination criteria in fixed priority order: target reached,
/// budget exhausted, validation plateau, iteration cap.
pub fn should_terminate(state: &RunState, config: &RunConfig) -> StopDecision {
    if let Some(target) = config.target_scalar {
        if state.best_scalar_so_far().unwrap_or(0.0) >= target {
            return StopDecision::fire(StopReason::TargetReached);
        }
    }
    if let Some(budget) = config.token_budget {
        if state.usage.total_tokens() >= budget {
            return StopDecision::fire(StopReason::BudgetExhausted);
        }
    }
    let running: Vec<f64> = state.val_history.iter().map(|p| p.scalar).collect();
    if detect_plateau(&running, config.plateau_window, config.plateau_min_delta) {
        return StopDecision::fire(StopReason::Plateau);
    }
    if state.iteration >= config.max_iterations {
        return StopDecision::fire(StopReason::MaxIterations);
    }
    StopDecision::none()
}

const CHECKPOINT_SCHEMA_VERSION: u64 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    schema_version: u64,
    state: RunState,
}

/// Writes the state as a versioned JSON checkpoint.
pub fn checkpoint(state: &RunState, path: impl AsRef<Path>) -> Result<(), LoopError> {
    let path = path.as_ref();
    let file = CheckpointFile {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        state: state.clone(),
    };
    let body = serde_json::to_string_pretty(&file).expect("checkpoint serialization");
    std::fs::write(path, body).map_err(|source| LoopError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads a checkpoint, rejecting version drift and corrupt files.
pub fn resume(path: impl AsRef<Path>) -> Result<RunState, LoopError> {
    let path = path.as_ref();
    let raw = std::fs::read_to_string(path).map_err(|source| LoopError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let value: serde_json::Value =
        serde_json::from_str(&raw).map_err(|e| LoopError::CorruptCheckpoint(e.to_string()))?;
    let found = value.get("schema_version").and_then(|v| v.as_u64());
    if found != Some(CHECKPOINT_SCHEMA_VERSION) {
        return Err(LoopError::SchemaMismatch {
            found,
            expected: CHECKPOINT_SCHEMA_VERSION,
        });
    }
    let file: CheckpointFile =
        serde_json::from_value(value).map_err(|e| LoopError::CorruptCheckpoint(e.to_string()))?;
    Ok(file.state)
}

// --- run-log records -------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordCandidate {
    pub id: String,
    pub text: String,
    pub origin: String,
    pub parent_id: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordFeedback {
    pub si_id: String,
    pub scalar: f64,
    pub scores: ScoreVector,
    pub tags: Vec<CritiqueTag>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RecordVal {
    pub scalar: f64,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct RecordUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub calls: u64,
    pub wall_ms: u64,
}

impl From<UsageMeter> for RecordUsage {
    fn from(m: UsageMeter) -> Self {
        Self {
            prompt_tokens: m.prompt_tokens,
            completion_tokens: m.completion_tokens,
            calls: m.call_count,
            wall_ms: m.wall_ms,
        }
    }
}

/// One appended run-log line: everything evaluated this iteration plus the
/// iteration's usage delta.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub iteration: u32,
    pub candidates: Vec<RecordCandidate>,
    pub feedback: Vec<RecordFeedback>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val: Option<RecordVal>,
    pub usage: RecordUsage,
}

/// Providers wired to the three agent roles.
#[derive(Clone, Copy, Default)]
pub struct ProviderSet<'a> {
    pub instructor: Option<&'a dyn ChatProvider>,
    pub follower: Option<&'a dyn ChatProvider>,
    pub judge: Option<&'a dyn ChatProvider>,
}

/// Where and how to run.
pub struct RunOptions<'a> {
    pub out_dir: PathBuf,
    /// Continue from `checkpoint.json` inside `out_dir`, appending to its log.
    pub resume: bool,
    pub progress: Option<&'a mut dyn FnMut(&RunRecord)>,
}

impl RunOptions<'_> {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        RunOptions {
            out_dir: out_dir.into(),
            resume: false,
            progress: None,
        }
    }
}

#[derive(Debug)]
pub struct RunResult {
    pub best: SiCandidate,
    pub best_scalar: Option<f64>,
    pub stop: StopDecision,
    pub state: RunState,
    pub run_dir: PathBuf,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> LoopError + '_ {
    move |source| LoopError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn usage_delta(after: &UsageMeter, before: &UsageMeter) -> UsageMeter {
    UsageMeter {
        prompt_tokens: after.prompt_tokens - before.prompt_tokens,
        completion_tokens: after.completion_tokens - before.completion_tokens,
        call_count: after.call_count - before.call_count,
        wall_ms: after.wall_ms - before.wall_ms,
    }
}

fn zero_feedback(weights: &Weights) -> FeedbackSignal {
    let scores = ScoreVector {
        performance: Some(0.0),
        readability: (weights.readability > 0.0).then_some(0.0),
        ..Default::default()
    };
    FeedbackSignal {
        scalar: 0.0,
        scores,
        critique_tags: vec![CritiqueTag::LowAccuracy],
        critique_text: Some("Evaluation failed; the candidate scored zero.".to_string()),
        preference: None,
    }
}

fn exemplars_from_train(dataset: &Dataset, count: usize) -> Vec<(String, String)> {
    dataset
        .train
        .iter()
        .take(count)
        .map(|t| {
            (
                t.input.clone(),
                t.references.first().cloned().unwrap_or_default(),
            )
        })
        .collect()
}

fn load_labels(path: &str) -> Result<Vec<Preference>, LoopError> {
    let raw = std::fs::read_to_string(path).map_err(|source| LoopError::Io {
        path: path.to_string(),
        source,
    })?;
    let mut labels = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| LoopError::LabelsParse {
                path: path.to_string(),
                line: idx + 1,
                message: e.to_string(),
            })?;
        let chosen = value.get("chosen").and_then(|v| v.as_str());
        let rejected = value.get("rejected").and_then(|v| v.as_str());
        match (chosen, rejected) {
            (Some(c), Some(r)) => labels.push(Preference {
                chosen: c.to_string(),
                rejected: r.to_string(),
            }),
            _ => {
                return Err(LoopError::LabelsParse {
                    path: path.to_string(),
                    line: idx + 1,
                    message: "needs string fields \"chosen\" and \"rejected\"".to_string(),
                })
            }
        }
    }
    Ok(labels)
}

/// Immutable per-run surroundings `iterate` works inside: resolved configs,
/// providers, exemplars, and loaded preference labels.
pub struct LoopEnv<'a> {
    config: &'a RunConfig,
    dataset: &'a Dataset,
    providers: &'a ProviderSet<'a>,
    eval_opts: EvalOptions,
    follower_cfg: FollowerConfig,
    meta_cfg: MetaPromptConfig,
    evolution: EvolutionConfig,
    thresholds: CritiqueThresholds,
    exemplars: Vec<(String, String)>,
    labels: Vec<Preference>,
}

impl<'a> LoopEnv<'a> {
    /// Resolves the run configuration against a dataset and provider set.
    /// `work_dir` hosts code-harness sample files.
    pub fn prepare(
        config: &'a RunConfig,
        dataset: &'a Dataset,
        providers: &'a ProviderSet<'a>,
        work_dir: &Path,
    ) -> Result<Self, LoopError> {
        let labels = match &config.labels_path {
            Some(path) => load_labels(path)?,
            None => Vec::new(),
        };
        Ok(LoopEnv {
            config,
            dataset,
            providers,
            eval_opts: EvalOptions {
                channels: config.channels,
                judge: config.judge.clone(),
                harness: HarnessConfig {
                    work_dir: work_dir.join("harness"),
                    timeout_ms: config.harness_timeout_ms,
                },
            },
            follower_cfg: config.follower.clone(),
            meta_cfg: config.meta_prompt_config(),
            evolution: config.effective_evolution()?,
            thresholds: config.effective_thresholds(),
            exemplars: exemplars_from_train(dataset, config.meta_prompt.exemplar_count),
            labels,
        })
    }

    fn instructor_llm(&self) -> Option<InstructorLlm<'_>> {
        self.providers.instructor.map(|provider| InstructorLlm {
            provider,
            model: self
                .config
                .providers
                .instructor
                .as_ref()
                .map(|s| s.model.clone())
                .unwrap_or_default(),
            temperature: self.config.instructor_temperature,
            max_tokens: self.config.instructor_max_tokens,
        })
    }
}

/// One full cycle: evaluate the current candidates on a fresh deterministic
/// minibatch, update history and the running best, periodically validate,
/// refine via the configured strategy, and return the log record.
pub fn iterate(state: &mut RunState, env: &LoopEnv) -> Result<RunRecord, LoopError> {
    let iteration = state.iteration;
    let config = env.config;
    let usage_before = state.usage;

    let size = config.minibatch_size.max(1).min(env.dataset.train.len());
    let batch = sample_minibatch(&env.dataset.train, size, config.seed, u64::from(iteration))?;

    let eval_providers = EvalProviders {
        follower: env.providers.follower,
        judge: env.providers.judge,
    };

    // evaluate every current candidate on the shared minibatch
    let mut feedbacks: Vec<FeedbackSignal> = Vec::with_capacity(state.population.len());
    let mut failures = 0usize;
    let mut last_error = String::new();
    for candidate in &state.population {
        match evaluate_si(
            candidate,
            &batch,
            Split::Train,
            &env.follower_cfg,
            &eval_providers,
            &env.eval_opts,
        ) {
            Ok(record) => {
                state.usage.merge(&record.usage);
                let feedback = build_feedback(&record, &config.weights, &env.thresholds)?;
                feedbacks.push(feedback);
            }
            Err(e) => {
                failures += 1;
                last_error = e.to_string();
                feedbacks.push(zero_feedback(&config.weights));
            }
        }
    }
    if failures == state.population.len() {
        return Err(LoopError::Aborted {
            iteration,
            message: format!("every candidate failed evaluation: {last_error}"),
        });
    }

    // attach preference labels that reference two candidates of this round
    for label in &env.labels {
        let has_rejected = state.population.iter().any(|c| c.id == label.rejected);
        if !has_rejected {
            continue;
        }
        if let Some(idx) = state.population.iter().position(|c| c.id == label.chosen) {
            feedbacks[idx].preference = Some(label.clone());
        }
    }

    // history + running best
    for (candidate, feedback) in state.population.iter().zip(&feedbacks) {
        state.history.push(HistoryEntry {
            candidate: candidate.clone(),
            feedback: feedback.clone(),
            iteration,
        });
        let improves = state
            .best
            .as_ref()
            .is_none_or(|b| feedback.scalar > b.feedback.scalar);
        if improves {
            state.best = Some(BestEntry {
                candidate: candidate.clone(),
                feedback: feedback.clone(),
            });
        }
    }

    // periodic validation of the current best on the full val split
    let mut val_field = None;
    if config.val_every > 0
        && (iteration + 1).is_multiple_of(config.val_every)
        && !env.dataset.val.is_empty()
    {
        if let Some(best) = state.best.clone() {
            let record = evaluate_si(
                &best.candidate,
                &env.dataset.val,
                Split::Val,
                &env.follower_cfg,
                &eval_providers,
                &env.eval_opts,
            )?;
            state.usage.merge(&record.usage);
            let feedback = build_feedback(&record, &config.weights, &env.thresholds)?;
            if state
                .val_best
                .as_ref()
                .is_none_or(|v| feedback.scalar > v.scalar)
            {
                state.val_best = Some(ValBest {
                    candidate: best.candidate.clone(),
                    scalar: feedback.scalar,
                });
            }
            let running = state
                .val_history
                .last()
                .map_or(feedback.scalar, |p| p.scalar.max(feedback.scalar));
            state.val_history.push(ValPoint {
                iteration,
                scalar: running,
            });
            val_field = Some(RecordVal { scalar: running });
        }
    }

    // refinement: produce the next population
    let mut ids = CandidateIds::starting_at(state.next_candidate_id);
    let mut instructor_usage = UsageMeter::default();
    let llm = env.instructor_llm();
    let next_population = match config.strategy {
        Strategy::Evolutionary => {
            let mut rng = derive_rng(config.seed, "evolve", u64::from(iteration));
            let mut ctx = EvolveCtx {
                llm: llm.as_ref(),
                rng: &mut rng,
                ids: &mut ids,
                iteration: iteration + 1,
                usage: &mut instructor_usage,
                filter_enabled: config.readability_filter,
            };
            evolve_step(&state.population, &feedbacks, &env.evolution, &mut ctx)?
        }
        Strategy::Llm => {
            let llm = llm.as_ref().ok_or_else(|| LoopError::Aborted {
                iteration,
                message: "llm strategy requires an instructor provider".to_string(),
            })?;
            let latest = feedbacks.last().expect("population is non-empty");
            let (candidate, usage) = refine_llm(
                &state.history,
                latest,
                &env.meta_cfg,
                &env.exemplars,
                llm,
                &mut ids,
                iteration + 1,
            )?;
            instructor_usage.merge(&usage);
            vec![candidate]
        }
        Strategy::Heuristic => {
            let current = &state.population[0];
            let feedback = &feedbacks[0];
            let hctx = HeuristicContext {
                max_sentences: batch.iter().filter_map(|t| t.max_sentences()).min(),
                format_pattern: batch.iter().find_map(|t| t.format_pattern()),
            };
            vec![heuristic_edit(
                current,
                &feedback.critique_tags,
                &hctx,
                &mut ids,
                iteration + 1,
            )]
        }
    };
    state.usage.merge(&instructor_usage);
    state.next_candidate_id = ids.next_value();

    // the log record covers what was evaluated this iteration
    let mut delta = usage_delta(&state.usage, &usage_before);
    delta.merge(&std::mem::take(&mut state.pending_usage));
    let record = RunRecord {
        iteration,
        candidates: state
            .population
            .iter()
            .map(|c| RecordCandidate {
                id: c.id.clone(),
                text: c.text.clone(),
                origin: c.origin.to_string(),
                parent_id: c.parent_id.clone(),
            })
            .collect(),
        feedback: state
            .population
            .iter()
            .zip(&feedbacks)
            .map(|(c, f)| RecordFeedback {
                si_id: c.id.clone(),
                scalar: f.scalar,
                scores: f.scores,
                tags: f.critique_tags.clone(),
            })
            .collect(),
        val: val_field,
        usage: delta.into(),
    };

    state.population = next_population;
    state.iteration += 1;
    Ok(record)
}

fn init_state(env: &LoopEnv) -> Result<RunState, LoopError> {
    let config = env.config;
    let mut ids = CandidateIds::default();
    let template_store;
    let llm_store;
    let source = match (config.strategy, env.providers.instructor) {
        (Strategy::Llm, Some(_)) => {
            llm_store = env.instructor_llm().expect("provider present");
            SeedSource::Llm(&llm_store)
        }
        _ => {
            template_store = match &config.seed_templates_path {
                Some(path) => TemplateLibrary::from_file(path).map_err(|source| LoopError::Io {
                    path: path.clone(),
                    source,
                })?,
                None => TemplateLibrary::default(),
            };
            SeedSource::Templates(&template_store)
        }
    };
    let n = match config.strategy {
        Strategy::Evolutionary => env.evolution.population_size,
        Strategy::Llm | Strategy::Heuristic => 1,
    };
    let (population, seed_usage) = propose_initial(
        &config.task_description,
        &env.exemplars,
        n,
        &source,
        &env.meta_cfg,
        &mut ids,
    )?;
    Ok(RunState {
        iteration: 0,
        history: Vec::new(),
        population,
        best: None,
        val_history: Vec::new(),
        val_best: None,
        usage: seed_usage,
        rng_seed: config.seed,
        next_candidate_id: ids.next_value(),
        pending_usage: seed_usage,
    })
}

/// Runs the full loop: seeds candidates, iterates until a stop criterion
/// fires, and persists the run directory (`run.jsonl`, `checkpoint.json`,
/// `best_si.txt`, `config.json`). With `resume` the state is loaded from the
/// directory's checkpoint and the log is appended to. On an unrecoverable
/// failure an `error.json` record is persisted and the partial log remains
/// valid.
pub fn run_optimization(
    config: &RunConfig,
    dataset: &Dataset,
    providers: &ProviderSet,
    mut options: RunOptions,
) -> Result<RunResult, LoopError> {
    if dataset.train.is_empty() {
        return Err(LoopError::EmptyTrainSplit);
    }
    let out_dir = options.out_dir.clone();
    std::fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;
    let env = LoopEnv::prepare(config, dataset, providers, &out_dir)?;

    let config_path = out_dir.join("config.json");
    let config_body = serde_json::to_string_pretty(config).expect("config serialization");
    std::fs::write(&config_path, config_body).map_err(io_err(&config_path))?;

    let persist_abort = |iteration: u32, message: &str| {
        let body = serde_json::json!({ "iteration": iteration, "error": message });
        let _ = std::fs::write(
            out_dir.join("error.json"),
            serde_json::to_string_pretty(&body).unwrap(),
        );
    };

    let checkpoint_path = out_dir.join("checkpoint.json");
    let mut state = if options.resume {
        resume(&checkpoint_path)?
    } else {
        match init_state(&env) {
            Ok(state) => state,
            Err(e) => {
                let message = e.to_string();
                persist_abort(0, &message);
                return Err(LoopError::Aborted {
                    iteration: 0,
                    message,
                });
            }
        }
    };

    let log_path = out_dir.join("run.jsonl");
    let log_file = if options.resume {
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(io_err(&log_path))?
    } else {
        File::create(&log_path).map_err(io_err(&log_path))?
    };
    let mut writer = BufWriter::new(log_file);

    let stop = loop {
        let decision = should_terminate(&state, config);
        if decision.stop {
            break decision;
        }
        match iterate(&mut state, &env) {
            Ok(record) => {
                let line = serde_json::to_string(&record).expect("record serialization");
                writer
                    .write_all(line.as_bytes())
                    .and_then(|()| writer.write_all(b"\n"))
                    .and_then(|()| writer.flush())
                    .map_err(io_err(&log_path))?;
                if let Some(progress) = options.progress.as_deref_mut() {
                    progress(&record);
                }
            }
            Err(e) => {
                persist_abort(state.iteration, &e.to_string());
                let _ = checkpoint(&state, &checkpoint_path);
                return Err(LoopError::Aborted {
                    iteration: state.iteration,
                    message: e.to_string(),
                });
            }
        }
    };

    checkpoint(&state, &checkpoint_path)?;
    let best = state
        .reported_best()
        .cloned()
        .expect("population is never empty");
    let best_path = out_dir.join("best_si.txt");
    std::fs::write(&best_path, format!("{}\n", best.text)).map_err(io_err(&best_path))?;

    Ok(RunResult {
        best_scalar: state.best_scalar_so_far(),
        best,
        stop,
        state,
        run_dir: out_dir,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Origin;

    fn state_with(
        iteration: u32,
        best_train: Option<f64>,
        val_running: &[f64],
        tokens: u64,
    ) -> RunState {
        let candidate =
            SiCandidate::new("si-000001", "Do the task.", None, Origin::SeedTemplate, 0).unwrap();
        RunState {
            iteration,
            history: Vec::new(),
            population: vec![candidate.clone()],
            best: best_train.map(|scalar| BestEntry {
                candidate: candidate.clone(),
                feedback: FeedbackSignal {
                    scalar,
                    scores: ScoreVector {
                        performance: Some(scalar),
                        ..Default::default()
                    },
                    critique_tags: vec![],
                    critique_text: None,
                    preference: None,
                },
            }),
            val_history: val_running
                .iter()
                .enumerate()
                .map(|(i, &scalar)| ValPoint {
                    iteration: i as u32,
                    scalar,
                })
                .collect(),
            val_best: None,
            usage: UsageMeter {
                prompt_tokens: tokens,
                completion_tokens: 0,
                call_count: 0,
                wall_ms: 0,
            },
            rng_seed: 42,
            next_candidate_id: 1,
            pending_usage: UsageMeter::default(),
        }
    }

    #[test]
    fn plateau_truth_table() {
        assert!(detect_plateau(
            &[0.50, 0.51, 0.52, 0.52, 0.52, 0.52],
            3,
            0.01
        ));
        assert!(!detect_plateau(&[0.50, 0.51, 0.53], 2, 0.01));
        assert!(!detect_plateau(&[0.50, 0.51], 5, 0.01));
        assert!(!detect_plateau(&[], 3, 0.01));
    }

    #[test]
    fn terminate_on_max_iterations() {
        let state = state_with(30, Some(0.5), &[], 0);
        let config = RunConfig {
            max_iterations: 30,
            ..Default::default()
        };
        let decision = should_terminate(&state, &config);
        assert!(decision.stop);
        assert_eq!(decision.reason, StopReason::MaxIterations);
    }

    #[test]
    fn terminate_on_budget() {
        let state = state_with(3, Some(0.5), &[], 10_001);
        let config = RunConfig {
            token_budget: Some(10_000),
            ..Default::default()
        };
        let decision = should_terminate(&state, &config);
        assert!(decision.stop);
        assert_eq!(decision.reason, StopReason::BudgetExhausted);
    }

    #[test]
    fn target_beats_plateau_in_priority() {
        // both the target and the plateau fire; target wins
        let state = state_with(10, Some(0.4), &[0.95, 0.95, 0.95, 0.95, 0.95, 0.95], 0);
        let config = RunConfig {
            target_scalar: Some(0.9),
            plateau_window: 3,
            plateau_min_delta: 0.01,
            ..Default::default()
        };
        let decision = should_terminate(&state, &config);
        assert!(decision.stop);
        assert_eq!(decision.reason, StopReason::TargetReached);
    }

    #[test]
    fn target_zero_fires_before_any_evaluation() {
        let state = state_with(0, None, &[], 0);
        let config = RunConfig {
            target_scalar: Some(0.0),
            ..Default::default()
        };
        let decision = should_terminate(&state, &config);
        assert!(decision.stop);
        assert_eq!(decision.reason, StopReason::TargetReached);
    }

    #[test]
    fn no_reason_means_keep_going() {
        let state = state_with(3, Some(0.5), &[0.4], 100);
        let config = RunConfig::default();
        let decision = should_terminate(&state, &config);
        assert!(!decision.stop);
        assert_eq!(decision.reason, StopReason::None);
    }

    #[test]
    fn checkpoint_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.json");
        let state = state_with(7, Some(0.8), &[0.3, 0.5], 1234);
        checkpoint(&state, &path).unwrap();
        let loaded = resume(&path).unwrap();
        assert_eq!(loaded, state);
    }

    #[test]
    fn truncated_checkpoint_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.json");
        let state = state_with(7, Some(0.8), &[], 0);
        checkpoint(&state, &path).unwrap();
        let body = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &body[..body.len() / 2]).unwrap();
        assert!(matches!(
            resume(&path),
            Err(LoopError::CorruptCheckpoint(_))
        ));
    }

    #[test]
    fn version_drift_is_a_schema_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.json");
        let state = state_with(7, Some(0.8), &[], 0);
        checkpoint(&state, &path).unwrap();
        let body = std::fs::read_to_string(&path)
            .unwrap()
            .replace("\"schema_version\": 1", "\"schema_version\": 99");
        std::fs::write(&path, body).unwrap();
        assert!(matches!(
            resume(&path),
            Err(LoopError::SchemaMismatch {
                found: Some(99),
                ..
            })
        ));
    }

    #[test]
    fn run_config_serde_round_trip() {
        let config = RunConfig {
            task_description: "Answer.".into(),
            target_scalar: Some(0.9),
            ..Default::default()
        };
        let json = serde_json::to_string_pretty(&config).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back.task_description, "Answer.");
        assert_eq!(back.target_scalar, Some(0.9));
        assert_eq!(back.weights, config.weights);
    }
}
