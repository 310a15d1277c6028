use std::sync::OnceLock;

use regex::Regex;
use unicode_normalization::UnicodeNormalization;

use super::{QAItem, Stage};

/// Anything that can measure text length in tokens for the length filter.
pub trait TokenCount {
    fn count_tokens(&self, text: &str) -> usize;
}

/// Whitespace-separated words; used before a tokenizer has been trained.
#[derive(Clone, Copy, Debug, Default)]
pub struct WhitespaceCount;

impl TokenCount for WhitespaceCount {
    fn count_tokens(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RejectReason {
    InvalidUtf8,
    Malformed,
    Empty,
    TooLong,
}

impl RejectReason {
    pub fn code(self) -> &'static str {
        match self {
            RejectReason::InvalidUtf8 => "invalid_utf8",
            RejectReason::Malformed => "malformed",
            RejectReason::Empty => "empty",
            RejectReason::TooLong => "too_long",
        }
    }
}

/// An item as ingested, before any decoding.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawItem {
    pub id: String,
    pub question: Vec<u8>,
    pub answer: Vec<u8>,
    pub rationale: Option<Vec<String>>,
    pub stage: Option<Stage>,
}

impl RawItem {
    pub fn from_text(id: &str, question: &str, answer: &str) -> Self {
        RawItem {
            id: id.to_string(),
            question: question.as_bytes().to_vec(),
            answer: answer.as_bytes().to_vec(),
            ..RawItem::default()
        }
    }
}

fn patterns() -> &'static [Regex; 4] {
    static P: OnceLock<[Regex; 4]> = OnceLock::new();
    P.get_or_init(|| {
        [
            Regex::new(r"(?s)<!--.*?-->").unwrap(),
            // a tag name must follow '<' directly, so "5 < 10 > 3" survives
            Regex::new(r"</?[A-Za-z][A-Za-z0-9-]*(?:\s[^<>]*)?/?>").unwrap(),
            Regex::new(r"&(#[0-9]+|#[xX][0-9A-Fa-f]+|[A-Za-z][A-Za-z0-9]*);").unwrap(),
            Regex::new(r"[ \t\u{a0}]+").unwrap(),
        ]
    })
}

fn decode_entity(body: &str) -> String {
    let numeric = if let Some(hex) = body.strip_prefix("#x").or_else(|| body.strip_prefix("#X")) {
        u32::from_str_radix(hex, 16).ok()
    } else if let Some(dec) = body.strip_prefix('#') {
        dec.parse::<u32>().ok()
    } else {
        None
    };
    if let Some(cp) = numeric {
        return char::from_u32(cp).map(String::from).unwrap_or_default();
    }
    match body {
        "amp" => "&",
        "lt" => "<",
        "gt" => ">",
        "quot" => "\"",
        "apos" => "'",
        "nbsp" => " ",
        "times" => "×",
        "divide" => "÷",
        "minus" => "−",
        "ndash" => "–",
        "mdash" => "—",
        _ => "",
    }
    .to_string()
}

fn clean_once(s: &str) -> String {
    let [comments, tags, entities, spaces] = patterns();
    let s: String = s.nfkc().collect();
    let s = comments.replace_all(&s, "");
    let s = tags.replace_all(&s, "");
    let s = entities.replace_all(&s, |c: &regex::Captures<'_>| decode_entity(&c[1]));
    let lines: Vec<String> = s.split('\n').map(|line| spaces.replace_all(line, " ").trim().to_string()).collect();
    lines.join("\n").trim().to_string()
}

/// NFKC normalization, HTML comment/tag removal, entity decoding and
/// whitespace tidying, iterated to a fixed point so that cleaning is idempotent.
pub fn clean_text(s: &str) -> String {
    let mut cur = clean_once(s);
    for _ in 0..16 {
        let next = clean_once(&cur);
        if next == cur {
            break;
        }
        cur = next;
    }
    cur
}

/// Decodes and cleans one raw item, rejecting it when either side is empty or
/// longer than `max_tokens` after cleaning.
pub fn clean_item(raw: &RawItem, counter: &dyn TokenCount, max_tokens: usize) -> Result<QAItem, RejectReason> {
    let question = std::str::from_utf8(&raw.question).map_err(|_| RejectReason::InvalidUtf8)?;
    let answer = std::str::from_utf8(&raw.answer).map_err(|_| RejectReason::InvalidUtf8)?;
    let question = clean_text(question);
    let answer = clean_text(answer);
    if question.is_empty() || answer.is_empty() {
        return Err(RejectReason::Empty);
    }
    if counter.count_tokens(&question) > max_tokens || counter.count_tokens(&answer) > max_tokens {
        return Err(RejectReason::TooLong);
    }
    let rationale = raw
        .rationale
        .as_ref()
        .map(|steps| steps.iter().map(|s| clean_text(s)).filter(|s| !s.is_empty()).collect::<Vec<_>>());
    Ok(QAItem {
        id: raw.id.clone(),
        question,
        answer,
        rationale: rationale.filter(|r| !r.is_empty()),
        stage: raw.stage,
    })
}
