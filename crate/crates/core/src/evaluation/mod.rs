//! Exact-match success rate, aligned step rate and threshold crossings.

use serde::{Deserialize, Serialize};

use crate::corpus::{split_steps, QAItem, Tokenizer, EOS};
use crate::error::{Error, Result};
use crate::model::{generate_greedy, ModelParams};

/// Lowercase, drop ASCII punctuation, collapse whitespace runs, trim.
pub fn normalize_answer(s: &str) -> String {
    let kept: String = s.chars().filter(|c| !c.is_ascii_punctuation()).flat_map(char::to_lowercase).collect();
    kept.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn answers_match(pred: &str, gold: &str) -> bool {
    normalize_answer(pred) == normalize_answer(gold)
}

/// Fraction of predictions equal to their reference after normalization.
pub fn success_rate<P: AsRef<str>, G: AsRef<str>>(preds: &[P], golds: &[G]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::invalid(format!("{} predictions for {} references", preds.len(), golds.len())));
    }
    if preds.is_empty() {
        return Err(Error::invalid("success rate of an empty set"));
    }
    let hits = preds.iter().zip(golds).filter(|(p, g)| answers_match(p.as_ref(), g.as_ref())).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// Order-preserving matched steps over the gold length, steps compared
/// after normalization.
pub fn step_rate<P: AsRef<str>, G: AsRef<str>>(pred_steps: &[P], gold_steps: &[G]) -> Result<f64> {
    if gold_steps.is_empty() {
        return Err(Error::invalid("step rate needs at least one gold step"));
    }
    let p: Vec<String> = pred_steps.iter().map(|s| normalize_answer(s.as_ref())).collect();
    let g: Vec<String> = gold_steps.iter().map(|s| normalize_answer(s.as_ref())).collect();
    Ok(lcs_len(&p, &g) as f64 / g.len() as f64)
}

/// Reasoning steps and final answer of generated text: split at the step
/// delimiters, the last segment is the answer.
pub fn parse_output(text: &str) -> (Vec<String>, String) {
    let mut steps = split_steps(text);
    let answer = steps.pop().unwrap_or_default();
    (steps, answer)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemOutcome {
    pub id: String,
    pub predicted_answer: String,
    pub predicted_steps: Vec<String>,
    pub gold_answer: String,
    pub gold_steps: Vec<String>,
    pub correct: bool,
    /// `None` when the item has no gold rationale.
    pub step_score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub items: Vec<ItemOutcome>,
    pub success_rate: f64,
    /// Mean over items that carry gold steps; `None` if none do.
    pub step_rate: Option<f64>,
}

impl EvalOutcome {
    pub fn from_items(items: Vec<ItemOutcome>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::invalid("evaluation over no items"));
        }
        let success_rate = items.iter().filter(|i| i.correct).count() as f64 / items.len() as f64;
        let scores: Vec<f64> = items.iter().filter_map(|i| i.step_score).collect();
        let step_rate = (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64);
        Ok(EvalOutcome { items, success_rate, step_rate })
    }
}

/// Greedy-decodes every item and scores answers and steps.
pub fn evaluate(params: &ModelParams, tokenizer: &Tokenizer, items: &[QAItem], max_new: usize) -> Result<EvalOutcome> {
    let mut out = Vec::with_capacity(items.len());
    for item in items {
        let prompt = tokenizer.prompt_tokens(&item.question);
        let budget = max_new.min(params.config.max_seq_len.saturating_sub(prompt.len()));
        let generated = generate_greedy(params, &prompt, budget, EOS, tokenizer.vocab_size())?;
        let text = tokenizer.decode(&generated)?;
        let (steps, answer) = parse_output(&text);
        let gold_steps = item.gold_steps().to_vec();
        let step_score = if gold_steps.is_empty() { None } else { Some(step_rate(&steps, &gold_steps)?) };
        out.push(ItemOutcome {
            id: item.id.clone(),
            correct: answers_match(&answer, &item.answer),
            predicted_answer: answer,
            predicted_steps: steps,
            gold_answer: item.answer.clone(),
            gold_steps,
            step_score,
        });
    }
    EvalOutcome::from_items(out)
}

/// Trailing moving average over the last `window` points. Each mean is taken
/// as offsets from the window's first value, so constant runs stay exact.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..values.len())
        .map(|i| {
            let win = &values[(i + 1).saturating_sub(w)..=i];
            let base = win[0];
            base + win.iter().map(|v| v - base).sum::<f64>() / win.len() as f64
        })
        .collect()
}

/// First step whose smoothed value reaches `threshold`.
pub fn first_crossing(curve: &[(u64, f64)], threshold: f64, window: usize) -> Option<u64> {
    let values: Vec<f64> = curve.iter().map(|p| p.1).collect();
    smooth(&values, window).iter().zip(curve).find(|(v, _)| **v >= threshold).map(|(_, p)| p.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub threshold: f64,
    pub baseline: Option<u64>,
    pub curriculum: Option<u64>,
    /// `baseline / curriculum` updates, when both are reached.
    pub speedup: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub window: usize,
    pub rows: Vec<ThresholdRow>,
}

pub fn threshold_crossings(
    baseline: &[(u64, f64)],
    curriculum: &[(u64, f64)],
    thresholds: &[f64],
    window: usize,
) -> Result<ThresholdReport> {
    for curve in [baseline, curriculum] {
        if curve.windows(2).any(|w| w[0].0 > w[1].0) {
            return Err(Error::invalid("curve steps must be sorted"));
        }
    }
    let rows = thresholds
        .iter()
        .map(|&threshold| {
            let b = first_crossing(baseline, threshold, window);
            let c = first_crossing(curriculum, threshold, window);
            let speedup = match (b, c) {
                (Some(b), Some(c)) if c > 0 => Some(b as f64 / c as f64),
                _ => None,
            };
            ThresholdRow { threshold, baseline: b, curriculum: c, speedup }
        })
        .collect();
    Ok(ThresholdReport { window, rows })
}

/// Pointwise mean of curves sampled at the same steps (one per seed).
pub fn average_curves(curves: &[Vec<(u64, f64)>]) -> Result<Vec<(u64, f64)>> {
    let first = curves.first().ok_or_else(|| Error::invalid("no curves to average"))?;
    for c in curves {
        if c.len() != first.len() || c.iter().zip(first).any(|(a, b)| a.0 != b.0) {
            return Err(Error::invalid("curves are sampled at different steps"));
        }
    }
    Ok(first
        .iter()
        .enumerate()
        .map(|(i, &(step, _))| {
            let m = curves.iter().map(|c| c[i].1).sum::<f64>() / curves.len() as f64;
            (step, m)
        })
        .collect())
}

/// Mean of the last `k` values and how many were available.
pub fn tail_mean(values: &[f64], k: usize) -> Option<(f64, usize)> {
    let tail = &values[values.len().saturating_sub(k)..];
    (!tail.is_empty()).then(|| (tail.iter().sum::<f64>() / tail.len() as f64, tail.len()))
}
