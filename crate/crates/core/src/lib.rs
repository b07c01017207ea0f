//! Engine for automatically generating and iteratively refining
//! human-readable system instructions via a three-agent feedback loop:
//! an instructor proposes and refines instructions, a follower executes
//! tasks under them, and an evaluator scores task performance and
//! instruction readability into a structured feedback signal.
//!
//! Fitness is a weighted combination of the performance and readability
//! score families. Every randomized component derives its generator from
//! the run seed, so runs with scripted or synthetic providers are fully
//! deterministic and resumable from checkpoints.

pub mod dataset;
pub mod eval;
pub mod follower;
pub mod instructor;
pub mod model;
pub mod opt_loop;
pub mod provider;
pub mod rng;

pub use dataset::{load_dataset, sample_minibatch, Dataset, DatasetError};
pub use eval::{
    build_feedback, evaluate_si, ChannelConfig, CritiqueThresholds, EvalError, EvalOptions,
    EvalProviders, EvaluationRecord, MetricError, Split,
};
pub use follower::{execute, execute_batch, FollowerConfig, FollowerError, FollowerMode};
pub use instructor::{
    build_meta_prompt, evolve_step, heuristic_edit, mutate, parse_si, propose_initial,
    readability_filter, refine_llm, tournament_select, EvolutionConfig, HistoryEntry,
    InstructorError, InstructorLlm, MetaPromptConfig, MutationOperator, SeedSource,
    TemplateLibrary,
};
pub use model::{
    normalize_fre, scalarize, CandidateIds, CritiqueTag, FeedbackSignal, FinishReason, ModelError,
    Origin, Preference, ScoreVector, SiCandidate, TaskInstance, TaskOutput, TaskType, UsageMeter,
    Weights,
};
pub use opt_loop::{
    checkpoint, detect_plateau, iterate, resume, run_optimization, should_terminate, LoopEnv,
    LoopError, ProviderSet, RunConfig, RunOptions, RunRecord, RunResult, RunState, StopDecision,
    StopReason, Strategy,
};
pub use provider::{
    accumulate_usage, ChatMessage, ChatProvider, ChatRequest, ChatResponse, HttpProvider,
    ProviderError, ProviderSpec, RetryPolicy, Role, ScriptedProvider,
};
