use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::QAItem;

/// Characters that mark a token as mathematical. ASCII `-` is handled
/// separately because it also joins ordinary words.
pub const OPERATORS: [char; 10] = ['+', '−', '×', '÷', '*', '/', '=', '<', '>', '%'];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComplexityFeatures {
    pub operator_density: f64,
    pub sentence_count: usize,
    pub delimiter_count: usize,
}

impl ComplexityFeatures {
    pub fn to_array(&self) -> [f64; 3] {
        [self.operator_density, self.sentence_count as f64, self.delimiter_count as f64]
    }
}

fn is_operator_token(tok: &str) -> bool {
    if tok.chars().any(|c| OPERATORS.contains(&c)) {
        return true;
    }
    tok.contains('-') && !tok.chars().any(char::is_alphabetic)
}

/// Fraction of whitespace-separated tokens containing an operator.
pub fn operator_density(text: &str) -> f64 {
    let mut total = 0usize;
    let mut ops = 0usize;
    for tok in text.split_whitespace() {
        total += 1;
        if is_operator_token(tok) {
            ops += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        ops as f64 / total as f64
    }
}

fn sentence_end() -> &'static Regex {
    static R: OnceLock<Regex> = OnceLock::new();
    R.get_or_init(|| Regex::new(r"[.?!]+(?:\s+|$)").unwrap())
}

fn delimiter() -> &'static Regex {
    static R: OnceLock<Regex> = OnceLock::new();
    R.get_or_init(|| Regex::new(r"(?i)\n|;|\bstep\s+\d+\s*:|\b(?:therefore|so)\b").unwrap())
}

/// Sentences delimited by runs of `.`, `?` or `!` followed by whitespace or
/// the end of the text. Trailing text without punctuation counts as one more.
pub fn sentence_count(text: &str) -> usize {
    sentence_end().split(text).filter(|s| !s.trim().is_empty()).count()
}

/// Newlines, semicolons, `Step k:` markers and the words "therefore"/"so".
pub fn delimiter_count(text: &str) -> usize {
    delimiter().find_iter(text).count()
}

/// Splits generated or gold reasoning text into trimmed, nonempty segments at
/// the step delimiters. The last segment is the final answer.
pub fn split_steps(text: &str) -> Vec<String> {
    delimiter().split(text).map(str::trim).filter(|s| !s.is_empty()).map(str::to_string).collect()
}

/// Operator density and sentence count of the question, delimiters in the
/// completion (rationale steps followed by the answer).
pub fn extract_features(item: &QAItem) -> ComplexityFeatures {
    ComplexityFeatures {
        operator_density: operator_density(&item.question),
        sentence_count: sentence_count(&item.question),
        delimiter_count: delimiter_count(&item.completion()),
    }
}
