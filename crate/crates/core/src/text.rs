//! Shared text normalization.
//!
//! A single normalizer is used both for answer equivalence and for
//! content-word retrieval: lowercase, strip leading/trailing punctuation per
//! whitespace token, drop stop words and empty tokens. The result is a set.

use once_cell::sync::Lazy;
use std::collections::{BTreeSet, HashSet};

static STOP_WORDS: Lazy<HashSet<&'static str>> = Lazy::new(|| {
    include_str!("../assets/stopwords.txt")
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .collect()
});

/// Content-word set of a piece of text.
pub type ContentWords = BTreeSet<String>;

pub fn is_stop_word(word: &str) -> bool {
    STOP_WORDS.contains(word)
}

/// Number of entries in the bundled stop-word list.
pub fn stop_word_count() -> usize {
    STOP_WORDS.len()
}

/// Lowercases and strips punctuation from both ends of one token.
pub fn clean_token(token: &str) -> String {
    token
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase()
}

pub fn normalize(text: &str) -> ContentWords {
    text.split_whitespace()
        .map(clean_token)
        .filter(|t| !t.is_empty() && !is_stop_word(t))
        .collect()
}

/// Splits a paragraph into sentences after `.`, `!` or `?` followed by whitespace.
pub fn split_sentences(paragraph: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chars = paragraph.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            if let Some(&(j, next)) = chars.peek() {
                if next.is_whitespace() {
                    let s = paragraph[start..i + c.len_utf8()].trim();
                    if !s.is_empty() {
                        out.push(s);
                    }
                    start = j;
                }
            }
        }
    }
    let tail = paragraph[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(words: &[&str]) -> ContentWords {
        words.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize("The Cello."), set(&["cello"]));
        assert_eq!(normalize("in 1947"), set(&["1947"]));
        assert!(normalize("").is_empty());
        assert_eq!(normalize("Paris, France"), set(&["paris", "france"]));
    }

    #[test]
    fn stop_list_size_is_pinned() {
        assert_eq!(stop_word_count(), 151);
    }

    #[test]
    fn sentences() {
        assert_eq!(
            split_sentences("One here. Two there! Three?"),
            vec!["One here.", "Two there!", "Three?"]
        );
        assert_eq!(split_sentences("No. 5 is fine"), vec!["No.", "5 is fine"]);
        assert_eq!(split_sentences("  "), Vec::<&str>::new());
    }
}
