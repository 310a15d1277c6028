use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::HeadId;
use crate::error::{Error, Result};
use crate::model::AttentionMaps;
use crate::rng::{self, streams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    Induction,
    Reasoning,
    PatternMatcher,
}

impl Archetype {
    pub const ALL: [Archetype; 3] = [Archetype::Induction, Archetype::Reasoning, Archetype::PatternMatcher];

    pub fn name(self) -> &'static str {
        match self {
            Archetype::Induction => "induction",
            Archetype::Reasoning => "reasoning",
            Archetype::PatternMatcher => "pattern_matcher",
        }
    }
}

impl fmt::Display for Archetype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Archetype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Archetype::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown archetype {s:?}")))
    }
}

/// `[bos, x1..xk, x1..xk]` with `k` distinct tokens drawn from `tokens`.
pub fn induction_probe(bos: usize, k: usize, tokens: Range<usize>, seed: u64) -> Result<Vec<usize>> {
    if k < 2 || tokens.len() < k {
        return Err(Error::invalid(format!("cannot draw {k} distinct tokens from {tokens:?}")));
    }
    let mut rng = rng::stream(seed, streams::PROBE_TOKENS);
    let first: Vec<usize> = index::sample(&mut rng, tokens.len(), k).into_iter().map(|i| tokens.start + i).collect();
    let mut out = Vec::with_capacity(2 * k + 1);
    out.push(bos);
    out.extend(&first);
    out.extend(&first);
    Ok(out)
}

fn repeat_len(tokens: &[usize]) -> Result<usize> {
    let bad = || Error::invalid("induction probe must be [bos, x1..xk, x1..xk] with distinct x");
    if tokens.len() < 5 || tokens.len().is_multiple_of(2) {
        return Err(bad());
    }
    let k = (tokens.len() - 1) / 2;
    let (first, second) = tokens[1..].split_at(k);
    let distinct: BTreeSet<usize> = first.iter().copied().collect();
    if first != second || distinct.len() != k {
        return Err(bad());
    }
    Ok(k)
}

/// Per-head (layer-major) mean attention from each second-copy position to
/// the token after that token's first occurrence.
pub fn induction_score(attn: &AttentionMaps, tokens: &[usize]) -> Result<Vec<f64>> {
    let k = repeat_len(tokens)?;
    if attn.seq_len != tokens.len() {
        return Err(Error::shape(
            "induction_score",
            format!("maps over {} positions, probe of {}", attn.seq_len, tokens.len()),
        ));
    }
    let mut out = Vec::with_capacity(attn.n_layers * attn.n_heads);
    for l in 0..attn.n_layers {
        for h in 0..attn.n_heads {
            let total: f64 = (0..k).map(|i| attn.get(l, h, k + 1 + i, i + 2)).sum();
            out.push(total / k as f64);
        }
    }
    Ok(out)
}

/// Heads whose induction score strictly exceeds `threshold`.
pub fn induction_heads(scores: &[f64], n_heads: usize, threshold: f64) -> BTreeSet<HeadId> {
    scores
        .iter()
        .enumerate()
        .filter(|&(_, &s)| s > threshold)
        .map(|(i, _)| HeadId::new(i / n_heads, i % n_heads))
        .collect()
}

/// Size of the running union of `sets`.
pub fn cumulative_distinct(sets: &[BTreeSet<HeadId>]) -> Vec<usize> {
    let mut seen = BTreeSet::new();
    sets.iter()
        .map(|s| {
            seen.extend(s.iter().copied());
            seen.len()
        })
        .collect()
}

/// Sum of the per-checkpoint cumulative counts.
pub fn emergence_auc(counts: &[usize]) -> Result<f64> {
    if counts.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("cumulative counts must be nondecreasing"));
    }
    Ok(counts.iter().map(|&c| c as f64).sum())
}

/// `(base − curriculum) / base × 100`; `None` when `base` is zero.
pub fn speedup_pct(auc_base: f64, auc_curriculum: f64) -> Option<f64> {
    (auc_base != 0.0).then(|| (auc_base - auc_curriculum) / auc_base * 100.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmergenceCurve {
    pub archetype: Archetype,
    pub steps: Vec<u64>,
    pub counts: Vec<usize>,
    pub auc: f64,
}

impl EmergenceCurve {
    pub fn new(archetype: Archetype, steps: Vec<u64>, counts: Vec<usize>) -> Result<Self> {
        if steps.len() != counts.len() {
            return Err(Error::invalid("emergence curve needs one count per checkpoint"));
        }
        let auc = emergence_auc(&counts)?;
        Ok(EmergenceCurve { archetype, steps, counts, auc })
    }

    pub fn from_sets(archetype: Archetype, steps: Vec<u64>, sets: &[BTreeSet<HeadId>]) -> Result<Self> {
        EmergenceCurve::new(archetype, steps, cumulative_distinct(sets))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn maps_for(tokens: &[usize], fill: impl Fn(usize, usize) -> f64) -> AttentionMaps {
        let t = tokens.len();
        let mut m = AttentionMaps::zeros(1, 1, t);
        let a = m.head_mut(0, 0);
        for q in 0..t {
            for key in 0..t {
                a[q * t + key] = fill(q, key);
            }
        }
        m
    }

    #[test]
    fn probe_shape_and_determinism() {
        let p = induction_probe(0, 6, 10..50, 3).unwrap();
        assert_eq!(p.len(), 13);
        assert_eq!(p[1..7], p[7..]);
        assert_eq!(p, induction_probe(0, 6, 10..50, 3).unwrap());
        assert!(p[1..].iter().all(|t| (10..50).contains(t)));
        assert!(induction_probe(0, 6, 10..14, 3).is_err());
    }

    #[test]
    fn perfect_induction_scores_one() {
        let tokens = induction_probe(0, 5, 3..40, 1).unwrap();
        let k = 5;
        let m = maps_for(&tokens, |q, key| if (q > k && key == q - k + 1) || (q <= k && key == q) { 1.0 } else { 0.0 });
        assert_eq!(induction_score(&m, &tokens).unwrap(), vec![1.0]);
    }

    #[test]
    fn uniform_attention_scores_reciprocal_length() {
        let tokens = induction_probe(0, 4, 3..40, 2).unwrap();
        let t = tokens.len();
        let m = maps_for(&tokens, |_, _| 1.0 / t as f64);
        assert!((induction_score(&m, &tokens).unwrap()[0] - 1.0 / t as f64).abs() < 1e-15);
    }

    #[test]
    fn unrepeated_probe_is_an_error() {
        let tokens = vec![0, 1, 2, 3, 4, 5];
        let m = maps_for(&tokens, |_, _| 0.0);
        assert!(induction_score(&m, &tokens).is_err());
        let tokens = vec![0, 1, 2, 3, 1, 2, 4];
        assert!(induction_score(&maps_for(&tokens, |_, _| 0.0), &tokens).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(emergence_auc(&[0, 1, 2]).unwrap(), 3.0);
        assert!(emergence_auc(&[2, 1]).is_err());
        assert_eq!(speedup_pct(0.0, 5.0), None);
        assert_eq!(speedup_pct(10.0, 10.0), Some(0.0));
        // (37870 − 37562) / 37870 · 100 = 308 / 378.7
        assert!((speedup_pct(37870.0, 37562.0).unwrap() - 308.0 / 378.7).abs() < 1e-12);
    }

    #[test]
    fn cumulative_counts_grow() {
        let a: BTreeSet<HeadId> = [HeadId::new(0, 0)].into();
        let b: BTreeSet<HeadId> = [HeadId::new(0, 1)].into();
        assert_eq!(cumulative_distinct(&[a.clone(), a.clone(), b, a]), vec![1, 1, 2, 2]);
        let curve = EmergenceCurve::new(Archetype::Reasoning, vec![0, 500, 1000], vec![0, 1, 2]).unwrap();
        assert_eq!(curve.auc, 3.0);
    }

    proptest! {
        #[test]
        fn scores_are_fractions(k in 2usize..8, seed in 0u64..50) {
            use rand::Rng;
            let tokens = induction_probe(0, k, 1..100, seed).unwrap();
            let t = tokens.len();
            let mut r = rng::stream(seed, 99);
            let mut m = AttentionMaps::zeros(1, 2, t);
            for h in 0..2 {
                let a = m.head_mut(0, h);
                for q in 0..t {
                    let row: Vec<f64> = (0..=q).map(|_| r.random::<f64>() + 1e-6).collect();
                    let s: f64 = row.iter().sum();
                    for (key, v) in row.into_iter().enumerate() {
                        a[q * t + key] = v / s;
                    }
                }
            }
            for s in induction_score(&m, &tokens).unwrap() {
                prop_assert!((0.0..=1.0).contains(&s));
            }
        }

        #[test]
        fn cumulative_is_nondecreasing(sets in proptest::collection::vec(proptest::collection::btree_set(0usize..6, 0..4), 0..10)) {
            let sets: Vec<BTreeSet<HeadId>> = sets.into_iter().map(|s| s.into_iter().map(|h| HeadId::new(0, h)).collect()).collect();
            let c = cumulative_distinct(&sets);
            prop_assert!(emergence_auc(&c).is_ok());
        }
    }
}
