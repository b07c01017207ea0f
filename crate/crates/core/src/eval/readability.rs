//! Formulaic readability: syllable counting, sentence segmentation, and the
//! Flesch Reading Ease / Flesch-Kincaid Grade Level scores.

use serde::{Deserialize, Serialize};

use super::MetricError;

/// Counts and formula values for one text. `fre` and `fk_grade` are exact
/// functions of the three counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadabilityStats {
    pub words: usize,
    pub sentences: usize,
    pub syllables: usize,
    pub fre: f64,
    pub fk_grade: f64,
}

fn is_vowel(c: char) -> bool {
    matches!(c, 'a' | 'e' | 'i' | 'o' | 'u' | 'y')
}

/// Heuristic syllable count: maximal vowel groups (a,e,i,o,u,y) after
/// lowercasing, minus one for a terminal silent "e" unless the word ends in
/// consonant + "le", floored at 1.
pub fn count_syllables(word: &str) -> Result<usize, MetricError> {
    if !word.chars().any(|c| c.is_alphabetic()) {
        return Err(MetricError::NoLetters);
    }
    let chars: Vec<char> = word.to_lowercase().chars().collect();
    let mut groups = 0usize;
    let mut in_group = false;
    for &c in &chars {
        if is_vowel(c) {
            if !in_group {
                groups += 1;
                in_group = true;
            }
        } else {
            in_group = false;
        }
    }
    if chars.last() == Some(&'e') {
        let n = chars.len();
        let consonant_le = n >= 3
            && chars[n - 2] == 'l'
            && chars[n - 3].is_alphabetic()
            && !is_vowel(chars[n - 3]);
        if !consonant_le && groups > 0 {
            groups -= 1;
        }
    }
    Ok(groups.max(1))
}

/// Splits text into sentences: maximal segments ending in '.', '!' or '?',
/// with a trailing unterminated segment counting as one sentence. Segments
/// without any alphanumeric content are dropped.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        current.push(c);
        if matches!(c, '.' | '!' | '?') {
            while let Some(&next) = chars.peek() {
                if matches!(next, '.' | '!' | '?') {
                    current.push(next);
                    chars.next();
                } else {
                    break;
                }
            }
            if current.chars().any(char::is_alphanumeric) {
                out.push(current.trim().to_string());
            }
            current.clear();
        }
    }
    if current.chars().any(char::is_alphanumeric) {
        out.push(current.trim().to_string());
    }
    out
}

/// Computes word, sentence, and syllable counts plus FRE and FKGL.
///
/// Words are whitespace tokens containing at least one letter or digit;
/// tokens with no letters count one syllable.
pub fn readability_stats(text: &str) -> Result<ReadabilityStats, MetricError> {
    if text.trim().is_empty() {
        return Err(MetricError::EmptyText);
    }
    let words: Vec<&str> = text
        .split_whitespace()
        .filter(|t| t.chars().any(char::is_alphanumeric))
        .collect();
    if words.is_empty() {
        return Err(MetricError::EmptyText);
    }
    let sentences = split_sentences(text).len().max(1);
    let mut syllables = 0usize;
    for token in &words {
        let core = token.trim_matches(|c: char| !c.is_alphanumeric());
        if core.chars().any(|c| c.is_alphabetic()) {
            syllables += count_syllables(core)?;
        } else {
            syllables += 1;
        }
    }
    let words_per_sentence = words.len() as f64 / sentences as f64;
    let syllables_per_word = syllables as f64 / words.len() as f64;
    let fre = 206.835 - 1.015 * words_per_sentence - 84.6 * syllables_per_word;
    let fk_grade = 0.39 * words_per_sentence + 11.8 * syllables_per_word - 15.59;
    Ok(ReadabilityStats {
        words: words.len(),
        sentences,
        syllables,
        fre,
        fk_grade,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn syllable_heuristic_cases() {
        assert_eq!(count_syllables("cat").unwrap(), 1);
        assert_eq!(count_syllables("make").unwrap(), 1);
        assert_eq!(count_syllables("table").unwrap(), 2);
        assert_eq!(count_syllables("the").unwrap(), 1);
        assert_eq!(count_syllables("apple").unwrap(), 2);
        assert_eq!(count_syllables("pale").unwrap(), 1);
        assert_eq!(count_syllables("readability").unwrap(), 5);
        assert_eq!(count_syllables("e").unwrap(), 1);
        assert!(count_syllables("1234").is_err());
    }

    #[test]
    fn sentence_segmentation() {
        assert_eq!(split_sentences("The cat sat on the mat.").len(), 1);
        assert_eq!(split_sentences("One. Two! Three?").len(), 3);
        assert_eq!(split_sentences("No terminator here").len(), 1);
        assert_eq!(split_sentences("Wait... really?").len(), 2);
        assert!(split_sentences("...").is_empty());
        assert_eq!(split_sentences("Tail. rest").len(), 2);
    }

    #[test]
    fn fre_and_fkgl_hand_values() {
        let stats = readability_stats("The cat sat on the mat.").unwrap();
        assert_eq!(stats.words, 6);
        assert_eq!(stats.sentences, 1);
        assert_eq!(stats.syllables, 6);
        assert!((stats.fre - 116.145).abs() < 1e-6, "fre {}", stats.fre);
        assert!(
            (stats.fk_grade - (-1.45)).abs() < 1e-6,
            "fk {}",
            stats.fk_grade
        );
    }

    #[test]
    fn single_word_text() {
        let stats = readability_stats("Cat.").unwrap();
        assert_eq!(stats.words, 1);
        assert_eq!(stats.sentences, 1);
        assert!((stats.fre - 121.22).abs() < 1e-6, "fre {}", stats.fre);
    }

    #[test]
    fn empty_and_wordless_text_error() {
        assert!(matches!(
            readability_stats("   "),
            Err(MetricError::EmptyText)
        ));
        assert!(matches!(
            readability_stats("?!"),
            Err(MetricError::EmptyText)
        ));
    }

    #[test]
    fn digit_tokens_count_one_syllable() {
        let stats = readability_stats("Add 42 now.").unwrap();
        assert_eq!(stats.words, 3);
        assert_eq!(stats.syllables, 3);
    }

    #[test]
    fn fre_decreases_with_syllable_density() {
        let simple = readability_stats("The cat sat.").unwrap();
        let dense = readability_stats("Felines recumbently repose.").unwrap();
        assert!(simple.fre > dense.fre);
    }

    #[test]
    fn formulas_hold_for_own_counts() {
        for text in [
            "The cat sat on the mat.",
            "Comprehension necessitates deliberate investigation. Proceed carefully!",
            "One two three. Four five.",
        ] {
            let s = readability_stats(text).unwrap();
            let wps = s.words as f64 / s.sentences as f64;
            let spw = s.syllables as f64 / s.words as f64;
            assert!((s.fre - (206.835 - 1.015 * wps - 84.6 * spw)).abs() < 1e-9);
            assert!((s.fk_grade - (0.39 * wps + 11.8 * spw - 15.59)).abs() < 1e-9);
        }
    }
}
