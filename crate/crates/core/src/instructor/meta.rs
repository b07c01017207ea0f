//! OPRO-style meta-prompt construction, marker parsing, and LLM refinement.

use crate::model::{CandidateIds, FeedbackSignal, Origin, SiCandidate, UsageMeter};

use super::{HistoryEntry, InstructorError, InstructorLlm, MetaPromptConfig};

/// Renders the refinement meta-prompt: task description, the `top_k`
/// highest-scoring history entries in ascending score order (best last) with
/// critique lines, exemplars, and the closing directive.
pub fn build_meta_prompt(
    history: &[HistoryEntry],
    cfg: &MetaPromptConfig,
    exemplars: &[(String, String)],
) -> String {
    let mut prompt = String::new();
    prompt.push_str(&format!("Task description: {}\n\n", cfg.task_description));

    let mut order: Vec<usize> = (0..history.len()).collect();
    order.sort_by(|&a, &b| {
        history[a]
            .feedback
            .scalar
            .total_cmp(&history[b].feedback.scalar)
    });
    let selected = &order[order
        .len()
        .saturating_sub(cfg.top_k.max(1).min(order.len()))..];
    if !selected.is_empty() {
        prompt
            .push_str("Here are previous instructions with their scores, from worst to best:\n\n");
        for &i in selected {
            let entry = &history[i];
            prompt.push_str(&format!(
                "Instruction: {}\nScore: {:.3}\n",
                entry.candidate.text, entry.feedback.scalar
            ));
            if let Some(critique) = &entry.feedback.critique_text {
                prompt.push_str(&format!("Critique: {critique}\n"));
            }
            prompt.push('\n');
        }
    }

    let shown = exemplars.iter().take(cfg.exemplar_count);
    let mut first = true;
    for (input, expected) in shown {
        if first {
            prompt.push_str("Task examples:\n\n");
            first = false;
        }
        prompt.push_str(&format!("Input: {input}\nExpected output: {expected}\n\n"));
    }

    prompt.push_str(&format!(
        "Write one new instruction that achieves a higher score and remains clear and readable. Wrap it between {} and {}.",
        cfg.marker_open, cfg.marker_close
    ));
    prompt
}

/// Content of the first complete marker block, trimmed.
pub fn parse_si(completion: &str, cfg: &MetaPromptConfig) -> Result<String, InstructorError> {
    let start = completion
        .find(&cfg.marker_open)
        .ok_or(InstructorError::MarkerMissing)?;
    let body_start = start + cfg.marker_open.len();
    let end = completion[body_start..]
        .find(&cfg.marker_close)
        .ok_or(InstructorError::MarkerMissing)?;
    Ok(completion[body_start..body_start + end].trim().to_string())
}

/// All complete marker blocks, trimmed, empty blocks dropped.
pub fn parse_all_blocks(completion: &str, cfg: &MetaPromptConfig) -> Vec<String> {
    let mut blocks = Vec::new();
    let mut rest = completion;
    while let Some(start) = rest.find(&cfg.marker_open) {
        let body_start = start + cfg.marker_open.len();
        match rest[body_start..].find(&cfg.marker_close) {
            Some(end) => {
                let block = rest[body_start..body_start + end].trim();
                if !block.is_empty() {
                    blocks.push(block.to_string());
                }
                rest = &rest[body_start + end + cfg.marker_close.len()..];
            }
            None => break,
        }
    }
    blocks
}

fn best_history_entry(history: &[HistoryEntry]) -> &HistoryEntry {
    let mut best = 0usize;
    for i in 1..history.len() {
        if history[i].feedback.scalar > history[best].feedback.scalar {
            best = i;
        }
    }
    &history[best]
}

/// One LLM refinement step: builds the meta-prompt, asks the provider for a
/// new instruction, and extracts it from the markers. A reply without a
/// complete block is re-asked once with a format reminder. The new candidate
/// descends from the best history entry.
pub fn refine_llm(
    history: &[HistoryEntry],
    feedback: &FeedbackSignal,
    cfg: &MetaPromptConfig,
    exemplars: &[(String, String)],
    llm: &InstructorLlm,
    ids: &mut CandidateIds,
    iteration: u32,
) -> Result<(SiCandidate, UsageMeter), InstructorError> {
    if history.is_empty() {
        return Err(InstructorError::DomainError(
            "refine_llm needs a non-empty history".into(),
        ));
    }
    let mut prompt = build_meta_prompt(history, cfg, exemplars);
    if let Some(critique) = &feedback.critique_text {
        prompt.push_str(&format!("\n\nLatest feedback: {critique}"));
    }
    let mut usage = UsageMeter::default();

    let (reply, call_usage) = llm.complete(&prompt)?;
    usage.merge(&call_usage);
    let mut text = parse_si(&reply, cfg).ok().filter(|t| !t.is_empty());

    if text.is_none() {
        let retry_prompt = format!(
            "{prompt}\n\nRemember: wrap the new instruction between {} and {}.",
            cfg.marker_open, cfg.marker_close
        );
        let (reply, call_usage) = llm.complete(&retry_prompt)?;
        usage.merge(&call_usage);
        text = parse_si(&reply, cfg).ok().filter(|t| !t.is_empty());
    }

    let text = text.ok_or(InstructorError::MarkerMissing)?;
    let parent = best_history_entry(history);
    let candidate = SiCandidate::new(
        ids.next_id(),
        text,
        Some(parent.candidate.id.clone()),
        Origin::LlmRefined,
        iteration,
    )?;
    Ok((candidate, usage))
}
