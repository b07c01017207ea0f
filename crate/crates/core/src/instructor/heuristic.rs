//! Critique-driven rule editor: one fixed, idempotent edit per critique tag.

use std::collections::VecDeque;

use crate::eval::readability::split_sentences;
use crate::model::{CandidateIds, CritiqueTag, Origin, SiCandidate};

/// Task metadata the edit rules draw on.
#[derive(Debug, Clone, Default)]
pub struct HeuristicContext {
    pub max_sentences: Option<u64>,
    pub format_pattern: Option<String>,
}

const LONG_SENTENCE_WORDS: usize = 25;

const CONJUNCTIONS: [&str; 9] = [
    "and", "or", "but", "so", "because", "while", "then", "although", "however",
];

fn append_once(text: &str, sentence: &str) -> String {
    if text.contains(sentence) {
        text.to_string()
    } else {
        format!("{} {}", text.trim_end(), sentence)
    }
}

/// Best split position for an over-long sentence: the conjunction or
/// post-comma word nearest the midpoint. Returns the index of the first word
/// of the second half.
fn find_split_point(words: &[&str]) -> Option<usize> {
    let mid = words.len() / 2;
    let mut best: Option<usize> = None;
    for i in 1..words.len() {
        let after_comma = words[i - 1].ends_with(',');
        let cleaned: String = words[i]
            .trim_matches(|c: char| !c.is_alphanumeric())
            .to_lowercase();
        let at_conjunction = CONJUNCTIONS.contains(&cleaned.as_str());
        if after_comma || at_conjunction {
            let better = match best {
                None => true,
                Some(current) => {
                    i.abs_diff(mid) < current.abs_diff(mid)
                        || (i.abs_diff(mid) == current.abs_diff(mid) && i < current)
                }
            };
            if better {
                best = Some(i);
            }
        }
    }
    best
}

fn capitalize_first(words: &mut [String]) {
    if let Some(first) = words.first_mut() {
        let mut chars = first.chars();
        if let Some(c) = chars.next() {
            *first = c.to_uppercase().collect::<String>() + chars.as_str();
        }
    }
}

/// Splits every sentence longer than 25 words at the nearest
/// conjunction/comma to its midpoint, repeatedly until every sentence fits
/// or no split point exists. Idempotent.
pub fn split_long_sentences(text: &str) -> String {
    let mut queue: VecDeque<String> = split_sentences(text).into();
    if queue.is_empty() {
        return text.to_string();
    }
    let mut out: Vec<String> = Vec::new();
    while let Some(sentence) = queue.pop_front() {
        let words: Vec<&str> = sentence.split_whitespace().collect();
        if words.len() <= LONG_SENTENCE_WORDS {
            out.push(sentence);
            continue;
        }
        match find_split_point(&words) {
            Some(split) => {
                let mut first: Vec<String> = words[..split].iter().map(|w| w.to_string()).collect();
                if let Some(last) = first.last_mut() {
                    while last.ends_with(',') {
                        last.pop();
                    }
                }
                let mut first_text = first.join(" ");
                if !first_text.ends_with(['.', '!', '?']) {
                    first_text.push('.');
                }
                let mut second: Vec<String> =
                    words[split..].iter().map(|w| w.to_string()).collect();
                capitalize_first(&mut second);
                // re-check both halves
                queue.push_front(second.join(" "));
                queue.push_front(first_text);
            }
            None => out.push(sentence),
        }
    }
    out.join(" ")
}

/// Applies one fixed edit per critique tag, in tag declaration order:
/// LOW_ACCURACY appends a chain-of-thought sentence, TOO_VERBOSE a length
/// constraint, WRONG_FORMAT a format constraint, SI_UNREADABLE splits
/// over-long sentences. Already-present appended sentences are not
/// duplicated, so the edit is idempotent per tag set. Returns the input
/// candidate unchanged when no edit applies.
pub fn heuristic_edit(
    si: &SiCandidate,
    tags: &[CritiqueTag],
    ctx: &HeuristicContext,
    ids: &mut CandidateIds,
    iteration: u32,
) -> SiCandidate {
    let mut text = si.text.clone();
    for tag in CritiqueTag::ALL {
        if !tags.contains(&tag) {
            continue;
        }
        match tag {
            CritiqueTag::LowAccuracy => {
                text = append_once(&text, "Think step by step before answering.");
            }
            CritiqueTag::TooVerbose => {
                if let Some(n) = ctx.max_sentences {
                    text = append_once(
                        &text,
                        &format!("Limit your response to at most {n} sentences."),
                    );
                }
            }
            CritiqueTag::WrongFormat => {
                if let Some(pattern) = &ctx.format_pattern {
                    text =
                        append_once(&text, &format!("Respond exactly in the format: {pattern}."));
                }
            }
            CritiqueTag::SiUnreadable => {
                text = split_long_sentences(&text);
            }
        }
    }
    if text == si.text {
        return si.clone();
    }
    SiCandidate::new(
        ids.next_id(),
        text,
        Some(si.id.clone()),
        Origin::HeuristicEdit,
        iteration,
    )
    .expect("edited text is non-empty")
}
