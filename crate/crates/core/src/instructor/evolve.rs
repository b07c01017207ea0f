//! Evolutionary search over SI candidates: tournament selection, mutation
//! operators, readability filtering, and the per-generation step. Feedback
//! scalars are the fitness function.

use std::collections::BTreeMap;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::eval::readability::{readability_stats, split_sentences};
use crate::model::{CandidateIds, FeedbackSignal, Origin, SiCandidate, UsageMeter};

use super::{EvolutionConfig, InstructorError, InstructorLlm};

/// Preference-nudge epsilon: a chosen candidate's fitness is lifted to at
/// least the rejected candidate's scalar plus this.
const PREFERENCE_EPSILON: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MutationOperator {
    Paraphrase,
    Combine,
    InjectDirective,
    DropSentence,
}

impl MutationOperator {
    pub fn name(self) -> &'static str {
        match self {
            MutationOperator::Paraphrase => "paraphrase",
            MutationOperator::Combine => "combine",
            MutationOperator::InjectDirective => "inject_directive",
            MutationOperator::DropSentence => "drop_sentence",
        }
    }

    pub fn from_name(name: &str) -> Result<Self, InstructorError> {
        match name {
            "paraphrase" => Ok(MutationOperator::Paraphrase),
            "combine" => Ok(MutationOperator::Combine),
            "inject_directive" => Ok(MutationOperator::InjectDirective),
            "drop_sentence" => Ok(MutationOperator::DropSentence),
            other => Err(InstructorError::UnknownOperator(other.to_string())),
        }
    }

    fn needs_provider(self) -> bool {
        matches!(
            self,
            MutationOperator::Paraphrase | MutationOperator::Combine
        )
    }
}

/// Picks the index of the tournament winner: `k` indices drawn via the seeded
/// generator (distinct unless `with_replacement`), maximal fitness wins, ties
/// broken by the lowest population index.
pub fn tournament_select_index(
    population_len: usize,
    fitness: &[f64],
    k: usize,
    rng: &mut ChaCha8Rng,
    with_replacement: bool,
) -> Result<usize, InstructorError> {
    if population_len == 0 || fitness.len() != population_len {
        return Err(InstructorError::DomainError(
            "population and fitness must be non-empty and aligned".into(),
        ));
    }
    if k == 0 || k > population_len {
        return Err(InstructorError::DomainError(format!(
            "tournament size {k} outside 1..={population_len}"
        )));
    }
    let drawn: Vec<usize> = if with_replacement {
        (0..k).map(|_| rng.gen_range(0..population_len)).collect()
    } else {
        rand::seq::index::sample(rng, population_len, k).into_vec()
    };
    let mut best = drawn[0];
    for &i in &drawn[1..] {
        if fitness[i] > fitness[best] || (fitness[i] == fitness[best] && i < best) {
            best = i;
        }
    }
    Ok(best)
}

/// Tournament selection over candidates; see `tournament_select_index`.
pub fn tournament_select<'p>(
    population: &'p [SiCandidate],
    fitness: &[f64],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<&'p SiCandidate, InstructorError> {
    let idx = tournament_select_index(population.len(), fitness, k, rng, false)?;
    Ok(&population[idx])
}

/// Extracts fitness values from feedback, applying the preference nudge: a
/// candidate recorded as chosen over a rejected one scores at least
/// rejected + epsilon. The stored feedback scalars are never modified.
pub fn preference_adjusted_fitness(
    population: &[SiCandidate],
    feedbacks: &[FeedbackSignal],
) -> Vec<f64> {
    let by_id: BTreeMap<&str, f64> = population
        .iter()
        .zip(feedbacks)
        .map(|(c, f)| (c.id.as_str(), f.scalar))
        .collect();
    population
        .iter()
        .zip(feedbacks)
        .map(|(candidate, feedback)| {
            let mut fitness = feedback.scalar;
            if let Some(preference) = &feedback.preference {
                if preference.chosen == candidate.id {
                    if let Some(&rejected) = by_id.get(preference.rejected.as_str()) {
                        fitness = fitness.max(rejected + PREFERENCE_EPSILON);
                    }
                }
            }
            fitness
        })
        .collect()
}

/// Everything a mutation may need. `population`/`fitness` back the second
/// tournament pick of the `combine` operator.
pub struct MutationCtx<'a> {
    pub llm: Option<&'a InstructorLlm<'a>>,
    pub rng: &'a mut ChaCha8Rng,
    pub directive_library: &'a [String],
    pub population: &'a [SiCandidate],
    pub fitness: &'a [f64],
    pub tournament_size: usize,
    pub ids: &'a mut CandidateIds,
    pub iteration: u32,
    pub usage: &'a mut UsageMeter,
}

fn capitalize(phrase: &str) -> String {
    let mut chars = phrase.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().collect::<String>() + chars.as_str(),
        None => String::new(),
    }
}

fn directive_sentence(phrase: &str) -> String {
    let capitalized = capitalize(phrase.trim());
    if capitalized.ends_with(['.', '!', '?']) {
        capitalized
    } else {
        format!("{capitalized}.")
    }
}

fn child(
    parent: &SiCandidate,
    text: String,
    operator: MutationOperator,
    ids: &mut CandidateIds,
    iteration: u32,
) -> Result<SiCandidate, InstructorError> {
    Ok(SiCandidate::new(
        ids.next_id(),
        text,
        Some(parent.id.clone()),
        Origin::Mutation(operator.name().to_string()),
        iteration,
    )?)
}

/// Applies one mutation operator.
///
/// paraphrase: provider rewrite preserving meaning; combine: provider merge
/// with a second tournament-selected candidate; inject_directive: appends one
/// PRNG-chosen library phrase not already present, as a capitalized sentence;
/// drop_sentence: removes a PRNG-chosen sentence (no-op on single-sentence
/// text).
pub fn mutate(
    si: &SiCandidate,
    operator: MutationOperator,
    ctx: &mut MutationCtx,
) -> Result<SiCandidate, InstructorError> {
    match operator {
        MutationOperator::Paraphrase => {
            let llm = ctx
                .llm
                .ok_or(InstructorError::ProviderRequired("paraphrase"))?;
            let prompt = format!(
                "Rewrite the following instruction so it keeps the same meaning but uses different wording. Keep it short, clear, and readable. Wrap the rewritten instruction between <INS> and </INS>.\n\nInstruction: {}",
                si.text
            );
            let (reply, usage) = llm.complete(&prompt)?;
            ctx.usage.merge(&usage);
            let text = super::parse_si(&reply, &super::MetaPromptConfig::default())?;
            if text.is_empty() {
                return Err(InstructorError::MarkerMissing);
            }
            child(si, text, operator, ctx.ids, ctx.iteration)
        }
        MutationOperator::Combine => {
            let llm = ctx
                .llm
                .ok_or(InstructorError::ProviderRequired("combine"))?;
            let partner_idx = tournament_select_index(
                ctx.population.len(),
                ctx.fitness,
                ctx.tournament_size.min(ctx.population.len().max(1)),
                ctx.rng,
                false,
            )?;
            let partner = &ctx.population[partner_idx];
            let prompt = format!(
                "Merge these two instructions into one concise instruction that keeps the useful parts of both. Wrap the merged instruction between <INS> and </INS>.\n\nInstruction A: {}\n\nInstruction B: {}",
                si.text, partner.text
            );
            let (reply, usage) = llm.complete(&prompt)?;
            ctx.usage.merge(&usage);
            let text = super::parse_si(&reply, &super::MetaPromptConfig::default())?;
            if text.is_empty() {
                return Err(InstructorError::MarkerMissing);
            }
            child(si, text, operator, ctx.ids, ctx.iteration)
        }
        MutationOperator::InjectDirective => {
            let haystack = si.text.to_lowercase();
            let absent: Vec<&String> = ctx
                .directive_library
                .iter()
                .filter(|phrase| !haystack.contains(&phrase.to_lowercase()))
                .collect();
            let text = if absent.is_empty() {
                si.text.clone()
            } else {
                let phrase = absent[ctx.rng.gen_range(0..absent.len())];
                format!("{} {}", si.text.trim_end(), directive_sentence(phrase))
            };
            child(si, text, operator, ctx.ids, ctx.iteration)
        }
        MutationOperator::DropSentence => {
            let sentences = split_sentences(&si.text);
            let text = if sentences.len() <= 1 {
                si.text.clone()
            } else {
                let drop = ctx.rng.gen_range(0..sentences.len());
                sentences
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != drop)
                    .map(|(_, s)| s.as_str())
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            child(si, text, operator, ctx.ids, ctx.iteration)
        }
    }
}

/// Outcome of readability filtering. When filtering would empty the list the
/// input is returned unchanged with `fallback` raised so parents stay alive.
#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub kept: Vec<SiCandidate>,
    pub fallback: bool,
}

fn passes_readability(text: &str, threshold: f64) -> bool {
    readability_stats(text).is_ok_and(|stats| stats.fre >= threshold)
}

/// Retains candidates whose raw FRE meets the threshold, preserving order.
pub fn readability_filter(candidates: Vec<SiCandidate>, threshold: f64) -> FilterOutcome {
    let kept: Vec<SiCandidate> = candidates
        .iter()
        .filter(|c| passes_readability(&c.text, threshold))
        .cloned()
        .collect();
    if kept.is_empty() && !candidates.is_empty() {
        FilterOutcome {
            kept: candidates,
            fallback: true,
        }
    } else {
        FilterOutcome {
            kept,
            fallback: false,
        }
    }
}

fn draw_operator(
    weights: &BTreeMap<String, f64>,
    rng: &mut ChaCha8Rng,
) -> Result<MutationOperator, InstructorError> {
    let mut operators = Vec::new();
    let mut mass = Vec::new();
    for (name, &weight) in weights {
        if weight < 0.0 {
            return Err(InstructorError::DomainError(format!(
                "operator weight for {name} is negative"
            )));
        }
        if weight > 0.0 {
            operators.push(MutationOperator::from_name(name)?);
            mass.push(weight);
        }
    }
    if operators.is_empty() {
        return Err(InstructorError::DomainError(
            "at least one operator weight must be positive".into(),
        ));
    }
    let dist = WeightedIndex::new(&mass)
        .map_err(|e| InstructorError::DomainError(format!("operator weights: {e}")))?;
    Ok(operators[dist.sample(rng)])
}

/// Shared state for one generation step.
pub struct EvolveCtx<'a> {
    pub llm: Option<&'a InstructorLlm<'a>>,
    pub rng: &'a mut ChaCha8Rng,
    pub ids: &'a mut CandidateIds,
    /// Iteration the children are created at.
    pub iteration: u32,
    pub usage: &'a mut UsageMeter,
    /// When false the readability filter is skipped (ablation hook).
    pub filter_enabled: bool,
}

/// Produces the next generation: `elite_count` best-by-fitness candidates are
/// copied unchanged (index tie-break), the rest are children from tournament
/// selection + a weighted-drawn operator. A failed LLM-backed mutation falls
/// back to inject_directive; a child failing the readability filter is
/// replaced by its selected parent. Output size always equals the input
/// population size.
pub fn evolve_step(
    population: &[SiCandidate],
    feedbacks: &[FeedbackSignal],
    cfg: &EvolutionConfig,
    ctx: &mut EvolveCtx,
) -> Result<Vec<SiCandidate>, InstructorError> {
    if population.len() != feedbacks.len() || population.len() != cfg.population_size {
        return Err(InstructorError::DomainError(format!(
            "population {} / feedback {} / configured size {} must agree",
            population.len(),
            feedbacks.len(),
            cfg.population_size
        )));
    }
    if cfg.elite_count >= cfg.population_size {
        return Err(InstructorError::DomainError(
            "elite_count must be smaller than population_size".into(),
        ));
    }
    let fitness = preference_adjusted_fitness(population, feedbacks);

    let mut order: Vec<usize> = (0..population.len()).collect();
    order.sort_by(|&a, &b| fitness[b].total_cmp(&fitness[a]).then(a.cmp(&b)));
    let mut next: Vec<SiCandidate> = order[..cfg.elite_count]
        .iter()
        .map(|&i| population[i].clone())
        .collect();

    while next.len() < cfg.population_size {
        let parent_idx = tournament_select_index(
            population.len(),
            &fitness,
            cfg.tournament_size.min(population.len()),
            ctx.rng,
            cfg.with_replacement,
        )?;
        let parent = &population[parent_idx];
        let operator = draw_operator(&cfg.operator_weights, ctx.rng)?;
        let mut mctx = MutationCtx {
            llm: ctx.llm,
            rng: ctx.rng,
            directive_library: &cfg.directive_library,
            population,
            fitness: &fitness,
            tournament_size: cfg.tournament_size.min(population.len()),
            ids: ctx.ids,
            iteration: ctx.iteration,
            usage: ctx.usage,
        };
        let mutated = match mutate(parent, operator, &mut mctx) {
            Ok(candidate) => Ok(candidate),
            Err(_) if operator.needs_provider() => {
                mutate(parent, MutationOperator::InjectDirective, &mut mctx)
            }
            Err(e) => Err(e),
        };
        let candidate = match mutated {
            Ok(candidate) => {
                if ctx.filter_enabled
                    && !passes_readability(&candidate.text, cfg.readability_threshold)
                {
                    parent.clone()
                } else {
                    candidate
                }
            }
            Err(_) => parent.clone(),
        };
        next.push(candidate);
    }
    Ok(next)
}
