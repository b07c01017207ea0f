//! The instructor agent: seeds initial SI candidates and refines them via
//! three interchangeable strategies — LLM meta-prompt refinement,
//! evolutionary search, and heuristic critique-driven editing — with
//! readability enforcement.

mod evolve;
mod heuristic;
mod meta;

pub use evolve::{
    evolve_step, mutate, preference_adjusted_fitness, readability_filter, tournament_select,
    tournament_select_index, EvolveCtx, FilterOutcome, MutationCtx, MutationOperator,
};
pub use heuristic::{heuristic_edit, split_long_sentences, HeuristicContext};
pub use meta::{build_meta_prompt, parse_all_blocks, parse_si, refine_llm};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CandidateIds, FeedbackSignal, ModelError, Origin, SiCandidate, UsageMeter};
use crate::provider::{ChatProvider, ChatRequest, ProviderError};

#[derive(Debug, Error)]
pub enum InstructorError {
    #[error("completion contained no complete <INS>...</INS> block")]
    MarkerMissing,
    #[error("provider produced {got} parseable candidates, needed {wanted}")]
    InsufficientCandidates { wanted: usize, got: usize },
    #[error("unknown mutation operator \"{0}\"")]
    UnknownOperator(String),
    #[error("{0}")]
    DomainError(String),
    #[error("operator {0} needs an LLM provider")]
    ProviderRequired(&'static str),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One evaluated candidate in the optimization history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub candidate: SiCandidate,
    pub feedback: FeedbackSignal,
    pub iteration: u32,
}

/// Provider handle for instructor-side LLM calls (refinement, paraphrase,
/// combine, candidate induction).
pub struct InstructorLlm<'a> {
    pub provider: &'a dyn ChatProvider,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl<'a> InstructorLlm<'a> {
    pub fn new(provider: &'a dyn ChatProvider, model: impl Into<String>) -> Self {
        Self {
            provider,
            model: model.into(),
            temperature: 1.0,
            max_tokens: 1024,
        }
    }

    pub(crate) fn complete(&self, prompt: &str) -> Result<(String, UsageMeter), ProviderError> {
        let request =
            ChatRequest::user_only(&self.model, prompt, self.temperature, self.max_tokens);
        let response = self.provider.complete(&request)?;
        Ok((response.text, response.usage))
    }
}

/// Layout of the OPRO-style meta-prompt.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetaPromptConfig {
    pub task_description: String,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_exemplar_count")]
    pub exemplar_count: usize,
    #[serde(default = "default_marker_open")]
    pub marker_open: String,
    #[serde(default = "default_marker_close")]
    pub marker_close: String,
}

fn default_top_k() -> usize {
    10
}
fn default_exemplar_count() -> usize {
    3
}
fn default_marker_open() -> String {
    "<INS>".to_string()
}
fn default_marker_close() -> String {
    "</INS>".to_string()
}

impl Default for MetaPromptConfig {
    fn default() -> Self {
        Self {
            task_description: String::new(),
            top_k: 10,
            exemplar_count: 3,
            marker_open: default_marker_open(),
            marker_close: default_marker_close(),
        }
    }
}

/// Evolutionary-search settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvolutionConfig {
    #[serde(default = "default_population_size")]
    pub population_size: usize,
    #[serde(default = "default_elite_count")]
    pub elite_count: usize,
    #[serde(default = "default_tournament_size")]
    pub tournament_size: usize,
    #[serde(default = "default_operator_weights")]
    pub operator_weights: BTreeMap<String, f64>,
    #[serde(default = "default_directive_library")]
    pub directive_library: Vec<String>,
    #[serde(default = "default_readability_threshold")]
    pub readability_threshold: f64,
    /// Tournament draws with replacement instead of distinct indices.
    #[serde(default)]
    pub with_replacement: bool,
}

fn default_population_size() -> usize {
    8
}
fn default_elite_count() -> usize {
    1
}
fn default_tournament_size() -> usize {
    3
}
fn default_readability_threshold() -> f64 {
    50.0
}

fn default_operator_weights() -> BTreeMap<String, f64> {
    // provider-free operators carry the weight so the engine works offline;
    // configs with an instructor endpoint can shift mass to the LLM operators
    BTreeMap::from([
        ("inject_directive".to_string(), 0.85),
        ("drop_sentence".to_string(), 0.15),
        ("paraphrase".to_string(), 0.0),
        ("combine".to_string(), 0.0),
    ])
}

/// Default directive phrases. Includes chain-of-thought and answer-format
/// phrases so synthetic convergence is reachable by `inject_directive` alone.
pub fn default_directive_library() -> Vec<String> {
    [
        "think step by step",
        "answer only with the final result",
        "be concise",
        "use simple words",
        "show your reasoning briefly",
        "check your work before you answer",
    ]
    .map(str::to_string)
    .to_vec()
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        Self {
            population_size: 8,
            elite_count: 1,
            tournament_size: 3,
            operator_weights: default_operator_weights(),
            directive_library: default_directive_library(),
            readability_threshold: 50.0,
            with_replacement: false,
        }
    }
}

/// Built-in seed instruction templates. `{task}` is replaced with the task
/// description. One deliberately dense entry keeps the readability-ablation
/// path exercised: with filtering off it can survive, with filtering on its
/// children are rejected.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TemplateLibrary {
    pub entries: Vec<String>,
}

impl Default for TemplateLibrary {
    fn default() -> Self {
        Self {
            entries: [
                "You are a careful assistant. {task}",
                "Read the task, then respond. {task}",
                "Your job: {task} Keep the reply short and clear.",
                "Follow the task exactly. {task}",
                "{task} Work through the task and give your answer.",
                "Comprehensively operationalize multidimensional organizational heuristics, \
                 systematically orchestrating infrastructural considerations notwithstanding \
                 extraordinarily complicated institutional interdependencies surrounding the \
                 following assignment: {task}",
                "You help with one task. {task} Give only what is asked.",
                "Do this task well. {task} Check each step as you go.",
            ]
            .map(str::to_string)
            .to_vec(),
        }
    }
}

impl TemplateLibrary {
    /// One template per non-empty line.
    pub fn from_file(path: impl AsRef<std::path::Path>) -> std::io::Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        Ok(Self {
            entries: raw
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(str::to_string)
                .collect(),
        })
    }

    pub fn instantiate(&self, index: usize, task_description: &str) -> String {
        self.entries[index % self.entries.len()].replace("{task}", task_description)
    }
}

/// Loads a directive library: one phrase per non-empty line.
pub fn directive_library_from_file(
    path: impl AsRef<std::path::Path>,
) -> std::io::Result<Vec<String>> {
    let raw = std::fs::read_to_string(path)?;
    Ok(raw
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

/// Where initial candidates come from.
pub enum SeedSource<'a> {
    Llm(&'a InstructorLlm<'a>),
    Templates(&'a TemplateLibrary),
}

fn induction_prompt(
    task_description: &str,
    exemplars: &[(String, String)],
    n: usize,
    cfg: &MetaPromptConfig,
) -> String {
    let mut prompt = String::new();
    prompt.push_str("You write system instructions for a language model.\n\n");
    prompt.push_str(&format!("Task description: {task_description}\n\n"));
    if !exemplars.is_empty() {
        prompt.push_str("Examples of the task:\n\n");
        for (input, expected) in exemplars {
            prompt.push_str(&format!("Input: {input}\nExpected output: {expected}\n\n"));
        }
    }
    prompt.push_str(&format!(
        "Write {n} different candidate instructions for this task. Wrap each one between {} and {}.",
        cfg.marker_open, cfg.marker_close
    ));
    prompt
}

/// Seeds the initial candidate set. With an LLM source, renders an induction
/// prompt from the task description and exemplars and parses the marker
/// blocks (retrying once on a short parse); with templates, returns the first
/// `n` library entries parameterized by the task description.
pub fn propose_initial(
    task_description: &str,
    exemplars: &[(String, String)],
    n: usize,
    source: &SeedSource,
    cfg: &MetaPromptConfig,
    ids: &mut CandidateIds,
) -> Result<(Vec<SiCandidate>, UsageMeter), InstructorError> {
    if n == 0 {
        return Err(InstructorError::DomainError(
            "cannot propose zero candidates".into(),
        ));
    }
    let mut usage = UsageMeter::default();
    match source {
        SeedSource::Templates(library) => {
            if library.entries.is_empty() {
                return Err(InstructorError::DomainError(
                    "template library is empty".into(),
                ));
            }
            let candidates = (0..n)
                .map(|i| {
                    SiCandidate::new(
                        ids.next_id(),
                        library.instantiate(i, task_description),
                        None,
                        Origin::SeedTemplate,
                        0,
                    )
                })
                .collect::<Result<Vec<_>, ModelError>>()?;
            Ok((candidates, usage))
        }
        SeedSource::Llm(llm) => {
            let prompt = induction_prompt(task_description, exemplars, n, cfg);
            let (text, call_usage) = llm.complete(&prompt)?;
            usage.merge(&call_usage);
            let mut blocks = parse_all_blocks(&text, cfg);
            if blocks.len() < n {
                let retry_prompt = format!(
                    "{prompt}\n\nYour previous reply had too few instructions. Reply again with {n} instructions, each wrapped between {} and {}.",
                    cfg.marker_open, cfg.marker_close
                );
                let (text, call_usage) = llm.complete(&retry_prompt)?;
                usage.merge(&call_usage);
                blocks = parse_all_blocks(&text, cfg);
            }
            if blocks.len() < n {
                return Err(InstructorError::InsufficientCandidates {
                    wanted: n,
                    got: blocks.len(),
                });
            }
            let candidates = blocks
                .into_iter()
                .take(n)
                .map(|text| SiCandidate::new(ids.next_id(), text, None, Origin::LlmRefined, 0))
                .collect::<Result<Vec<_>, ModelError>>()?;
            Ok((candidates, usage))
        }
    }
}
