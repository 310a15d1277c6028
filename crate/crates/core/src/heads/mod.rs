//! Gate-gradient saliency, the permuted-answer null, and bookkeeping over
//! specialized-head sets.

mod archetypes;
mod sets;

pub use archetypes::{
    cumulative_distinct, emergence_auc, induction_heads, induction_probe, induction_score, speedup_pct, Archetype,
    EmergenceCurve,
};
pub use sets::{
    layer_distribution, stage_counts, stage_retention, LayerDistribution, LayerGroups, Retention, StageCounts,
};

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{gate_gradients, LmExample, ModelParams};
use crate::rng::{self, streams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub fn new(layer: usize, head: usize) -> Self {
        HeadId { layer, head }
    }
}

impl std::fmt::Display for HeadId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "L{}H{}", self.layer, self.head)
    }
}

/// Per-head saliency `[L, H]`, layer-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub n_layers: usize,
    pub n_heads: usize,
    pub values: Vec<f64>,
    pub probe_id: String,
    pub step: u64,
}

impl SaliencyMap {
    pub fn get(&self, id: HeadId) -> f64 {
        self.values[id.layer * self.n_heads + id.head]
    }

    pub fn heads(&self) -> impl Iterator<Item = (HeadId, f64)> + '_ {
        self.values.iter().enumerate().map(|(i, &s)| (HeadId::new(i / self.n_heads, i % self.n_heads), s))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecializationRecord {
    pub step: u64,
    pub threshold: f64,
    pub live: BTreeSet<HeadId>,
}

/// Heads whose saliency strictly exceeds `threshold`.
pub fn detect(map: &SaliencyMap, threshold: f64) -> SpecializationRecord {
    SpecializationRecord {
        step: map.step,
        threshold,
        live: map.heads().filter(|&(_, s)| s > threshold).map(|(id, _)| id).collect(),
    }
}

fn gate_magnitudes(params: &ModelParams, ex: &LmExample) -> Result<Vec<f64>> {
    let (_, g) = gate_gradients(params, ex)?;
    if g.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("gate gradient".into()));
    }
    Ok(g.into_iter().map(f64::abs).collect())
}

/// `s[l,h]` = mean over probe items of `|dL/dg[l,h]|` with every gate at 1.
pub fn head_saliency(params: &ModelParams, probe: &[LmExample], probe_id: &str, step: u64) -> Result<SaliencyMap> {
    if probe.is_empty() {
        return Err(Error::invalid("saliency probe is empty"));
    }
    if !params.gates_are_identity() {
        return Err(Error::invalid("saliency requires every head gate at 1"));
    }
    let (l, h) = (params.config.n_layers, params.config.n_heads);
    let mut values = vec![0.0; l * h];
    for ex in probe {
        for (acc, g) in values.iter_mut().zip(gate_magnitudes(params, ex)?) {
            *acc += g;
        }
    }
    for v in &mut values {
        *v /= probe.len() as f64;
    }
    Ok(SaliencyMap { n_layers: l, n_heads: h, values, probe_id: probe_id.to_string(), step })
}

/// Copy of `ex` whose supervised tokens, excluding the final one, are shuffled
/// among themselves.
pub fn permute_answer(ex: &LmExample, rng: &mut impl rand::Rng) -> LmExample {
    let last = ex.tokens.len() - 1;
    let positions: Vec<usize> =
        ex.loss_mask.iter().enumerate().filter(|&(t, &m)| m && t + 1 < last).map(|(t, _)| t + 1).collect();
    let mut values: Vec<usize> = positions.iter().map(|&p| ex.tokens[p]).collect();
    values.shuffle(rng);
    let mut out = ex.clone();
    for (p, v) in positions.into_iter().zip(values) {
        out.tokens[p] = v;
    }
    out
}

/// Linear-interpolated percentile: sort ascending, rank `q/100 · (n − 1)`.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("percentile of an empty set"));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::invalid(format!("percentile {q} outside [0, 100]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Ok(sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo]))
}

pub const MIN_NULL_PROBES: usize = 20;

/// Pools every head's gate saliency over `n_null` answer-permuted probe items
/// (cycling through `probe`) and returns the pool.
pub fn null_pool(params: &ModelParams, probe: &[LmExample], n_null: usize, seed: u64) -> Result<Vec<f64>> {
    if n_null < MIN_NULL_PROBES {
        return Err(Error::invalid(format!("null needs at least {MIN_NULL_PROBES} probes, got {n_null}")));
    }
    if probe.is_empty() {
        return Err(Error::invalid("null probe is empty"));
    }
    if !params.gates_are_identity() {
        return Err(Error::invalid("saliency requires every head gate at 1"));
    }
    let mut rng = rng::stream(seed, streams::NULL_PROBES);
    let mut pool = Vec::with_capacity(n_null * params.gates.len());
    for i in 0..n_null {
        let permuted = permute_answer(&probe[i % probe.len()], &mut rng);
        pool.extend(gate_magnitudes(params, &permuted)?);
    }
    Ok(pool)
}

/// 95th percentile of [`null_pool`].
pub fn null_threshold(params: &ModelParams, probe: &[LmExample], n_null: usize, seed: u64) -> Result<f64> {
    percentile(&null_pool(params, probe, n_null, seed)?, 95.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, sequence_loss, ModelConfig};
    use proptest::prelude::*;

    fn model() -> ModelParams {
        init_params(&ModelConfig { n_layers: 2, n_heads: 2, d_model: 16, vocab_size: 30, max_seq_len: 16, seed: 11 })
            .unwrap()
    }

    fn probe() -> Vec<LmExample> {
        [vec![1, 5, 9, 2, 7, 7, 3, 4], vec![1, 8, 2, 2, 6, 11, 12, 4, 20]]
            .into_iter()
            .map(|tokens| {
                let loss_mask = (0..tokens.len() - 1).map(|t| t >= 3).collect();
                LmExample { tokens, loss_mask }
            })
            .collect()
    }

    #[test]
    fn empty_probe_is_an_error() {
        assert!(head_saliency(&model(), &[], "p", 0).is_err());
    }

    #[test]
    fn non_identity_gates_are_rejected() {
        let mut p = model();
        p.gates.data_mut()[1] = 0.5;
        assert!(head_saliency(&p, &probe(), "p", 0).is_err());
    }

    #[test]
    fn dead_path_head_has_zero_saliency() {
        let mut p = model();
        let d = p.config.d_model;
        let dh = p.config.head_dim();
        let w = p.blocks[1].w_out.data_mut();
        for r in dh..2 * dh {
            w[r * d..(r + 1) * d].fill(0.0);
        }
        let s = head_saliency(&p, &probe(), "p", 0).unwrap();
        assert_eq!(s.get(HeadId::new(1, 1)), 0.0);
        assert!(s.values.iter().filter(|&&v| v > 0.0).count() == 3);
    }

    #[test]
    fn duplicated_probe_gives_same_saliency() {
        let p = model();
        let once = head_saliency(&p, &probe(), "p", 0).unwrap();
        let twice_probe: Vec<LmExample> = probe().into_iter().chain(probe()).collect();
        let twice = head_saliency(&p, &twice_probe, "p", 0).unwrap();
        for (a, b) in once.values.iter().zip(&twice.values) {
            assert!((a - b).abs() <= 1e-15 * a.abs().max(1e-300));
        }
    }

    #[test]
    fn saliency_matches_gate_finite_differences() {
        let p = model();
        let items = probe();
        let s = head_saliency(&p, &items, "p", 0).unwrap();
        let step = 1e-5;
        for idx in 0..p.gates.len() {
            let mut fd = 0.0;
            for ex in &items {
                let mut up = p.clone();
                up.gates.data_mut()[idx] = 1.0 + step;
                let mut down = p.clone();
                down.gates.data_mut()[idx] = 1.0 - step;
                let diff = sequence_loss(&up, ex).unwrap() - sequence_loss(&down, ex).unwrap();
                fd += (diff / (2.0 * step)).abs();
            }
            fd /= items.len() as f64;
            let rel = (s.values[idx] - fd).abs() / fd.max(1e-12);
            assert!(rel < 1e-4, "head {idx}: analytic {} vs fd {fd}", s.values[idx]);
        }
    }

    #[test]
    fn percentile_of_one_to_hundred() {
        let pool: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!((percentile(&pool, 95.0).unwrap() - 95.05).abs() < 1e-12);
        assert_eq!(percentile(&pool, 0.0).unwrap(), 1.0);
        assert_eq!(percentile(&pool, 100.0).unwrap(), 100.0);
        assert_eq!(percentile(&[3.0], 95.0).unwrap(), 3.0);
    }

    #[test]
    fn zero_null_flags_every_nonzero_head() {
        let tau = percentile(&[0.0; 40], 95.0).unwrap();
        assert_eq!(tau, 0.0);
        let map = SaliencyMap { n_layers: 1, n_heads: 3, values: vec![0.0, 1e-9, 2.0], probe_id: "p".into(), step: 0 };
        let rec = detect(&map, tau);
        assert_eq!(rec.live, [HeadId::new(0, 1), HeadId::new(0, 2)].into_iter().collect());
    }

    #[test]
    fn null_threshold_is_seeded() {
        let p = model();
        let a = null_threshold(&p, &probe(), 20, 4).unwrap();
        let b = null_threshold(&p, &probe(), 20, 4).unwrap();
        assert_eq!(a, b);
        assert!(a > 0.0);
        assert!(null_threshold(&p, &probe(), 19, 4).is_err());
    }

    #[test]
    fn permutation_keeps_prompt_and_final_token() {
        let ex = &probe()[1];
        let mut rng = rng::stream(0, 0);
        let out = permute_answer(ex, &mut rng);
        assert_eq!(out.tokens[..4], ex.tokens[..4]);
        assert_eq!(out.tokens.last(), ex.tokens.last());
        let mut a = out.tokens.clone();
        let mut b = ex.tokens.clone();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn detect_is_the_strict_filter(values in proptest::collection::vec(0.0..1.0f64, 1..24), tau in 0.0..1.0f64) {
            let map = SaliencyMap { n_layers: 1, n_heads: values.len(), values: values.clone(), probe_id: "p".into(), step: 3 };
            let rec = detect(&map, tau);
            for (i, v) in values.iter().enumerate() {
                prop_assert_eq!(rec.live.contains(&HeadId::new(0, i)), *v > tau);
            }
            prop_assert_eq!(detect(&map, tau), rec);
        }

        #[test]
        fn percentile_lies_within_range(values in proptest::collection::vec(-10.0..10.0f64, 1..50), q in 0.0..=100.0f64) {
            let p = percentile(&values, q).unwrap();
            let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(p >= lo && p <= hi);
        }
    }
}
