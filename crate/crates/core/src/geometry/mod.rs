//! Attention-row statistics, layer-group comparison and the PCA structure score.

mod eigen;
mod pca;

pub use eigen::symmetric_eigenvalues;
pub use pca::{explained_variance_ratio, pca_structure_score, StructureScore};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::LayerGroups;
use crate::model::AttentionMaps;

fn check_row(row: &[f64]) -> Result<f64> {
    if row.is_empty() {
        return Err(Error::invalid("empty attention row"));
    }
    if let Some(x) = row.iter().find(|x| !(**x >= 0.0) || !x.is_finite()) {
        return Err(Error::invalid(format!("attention weight {x} is not a nonnegative number")));
    }
    let sum: f64 = row.iter().sum();
    if sum <= 0.0 {
        return Err(Error::invalid("attention row sums to zero"));
    }
    Ok(sum)
}

/// `G = 1 − (2/n) Σ_k (S_k − A_(k)/2) / Σ_j A_j` over the ascending sort,
/// with `S_k` the running sum.
pub fn gini(row: &[f64]) -> Result<f64> {
    let total = check_row(row)?;
    let mut sorted = row.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut running = 0.0;
    let mut acc = 0.0;
    for a in sorted {
        running += a;
        acc += running - a / 2.0;
    }
    Ok(1.0 - 2.0 / n * acc / total)
}

/// Shannon entropy in nats with `0 · ln 0 = 0`.
pub fn entropy(row: &[f64]) -> Result<f64> {
    check_row(row)?;
    Ok(-row.iter().filter(|&&a| a > 0.0).map(|&a| a * a.ln()).sum::<f64>())
}

fn check_square(a: &[f64], t: usize) -> Result<()> {
    if t == 0 || a.len() != t * t {
        return Err(Error::shape("attention", format!("{} values for a {t}x{t} map", a.len())));
    }
    Ok(())
}

/// Mass within `±window` of the diagonal, averaged over queries.
pub fn local_focus(a: &[f64], t: usize, window: usize) -> Result<f64> {
    check_square(a, t)?;
    let mut total = 0.0;
    for i in 0..t {
        let lo = i.saturating_sub(window);
        let hi = (i + window).min(t - 1);
        total += a[i * t + lo..=i * t + hi].iter().sum::<f64>();
    }
    Ok(total / t as f64)
}

/// `Σ_j |i − j| A_ij`, averaged over queries.
pub fn mean_distance(a: &[f64], t: usize) -> Result<f64> {
    check_square(a, t)?;
    let mut total = 0.0;
    for i in 0..t {
        for j in 0..t {
            total += i.abs_diff(j) as f64 * a[i * t + j];
        }
    }
    Ok(total / t as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionStats {
    pub gini: f64,
    pub entropy: f64,
    pub local_focus: f64,
    pub mean_distance: f64,
}

impl AttentionStats {
    pub const NAMES: [&'static str; 4] = ["gini", "entropy", "local_focus", "mean_distance"];

    pub fn to_array(self) -> [f64; 4] {
        [self.gini, self.entropy, self.local_focus, self.mean_distance]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        AttentionStats { gini: v[0], entropy: v[1], local_focus: v[2], mean_distance: v[3] }
    }

    /// Elementwise mean.
    pub fn mean(all: &[AttentionStats]) -> Option<AttentionStats> {
        if all.is_empty() {
            return None;
        }
        let mut acc = [0.0; 4];
        for s in all {
            for (a, x) in acc.iter_mut().zip(s.to_array()) {
                *a += x;
            }
        }
        Some(AttentionStats::from_array(acc.map(|a| a / all.len() as f64)))
    }
}

/// Statistics of one causal `[T, T]` map, averaged over query tokens. Gini
/// and entropy read each query's causal support (keys `0..=i`).
pub fn map_stats(a: &[f64], t: usize) -> Result<AttentionStats> {
    check_square(a, t)?;
    let mut g = 0.0;
    let mut h = 0.0;
    for i in 0..t {
        let row = &a[i * t..i * t + i + 1];
        g += gini(row)?;
        h += entropy(row)?;
    }
    Ok(AttentionStats {
        gini: g / t as f64,
        entropy: h / t as f64,
        local_focus: local_focus(a, t, 2)?,
        mean_distance: mean_distance(a, t)?,
    })
}

/// Per-head statistics `[layer][head]` averaged over tokens, then over prompts.
pub fn head_stats(maps: &[AttentionMaps]) -> Result<Vec<Vec<AttentionStats>>> {
    let first = maps.first().ok_or_else(|| Error::invalid("no attention maps"))?;
    let (l, h) = (first.n_layers, first.n_heads);
    let mut out = vec![vec![Vec::with_capacity(maps.len()); h]; l];
    for m in maps {
        if (m.n_layers, m.n_heads) != (l, h) {
            return Err(Error::shape("head_stats", "maps disagree on layer/head counts"));
        }
        for (layer, row) in out.iter_mut().enumerate() {
            for (head, acc) in row.iter_mut().enumerate() {
                acc.push(map_stats(m.head(layer, head), m.seq_len)?);
            }
        }
    }
    Ok(out
        .into_iter()
        .map(|row| row.into_iter().map(|v| AttentionStats::mean(&v).expect("at least one map")).collect())
        .collect())
}

/// Baseline against curriculum for one statistic in one layer group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupComparison {
    pub group: String,
    pub statistic: String,
    pub baseline: Option<f64>,
    pub curriculum: Option<f64>,
    pub delta: Option<f64>,
    pub ratio: Option<f64>,
    pub pct_change: Option<f64>,
}

fn group_mean(stats: &[Vec<AttentionStats>], layers: std::ops::Range<usize>) -> Option<AttentionStats> {
    let heads: Vec<AttentionStats> = layers.filter_map(|l| stats.get(l)).flat_map(|row| row.iter().copied()).collect();
    AttentionStats::mean(&heads)
}

/// Group means of each statistic with `Δ = curriculum − baseline`,
/// `ratio = curriculum / baseline` and the percentage change. Groups with no
/// analyzed heads produce empty cells.
pub fn aggregate_groups(
    baseline: &[Vec<AttentionStats>],
    curriculum: &[Vec<AttentionStats>],
    groups: &LayerGroups,
) -> Vec<GroupComparison> {
    let mut out = Vec::new();
    for (name, range) in &groups.groups {
        let b = group_mean(baseline, range.clone()).map(AttentionStats::to_array);
        let c = group_mean(curriculum, range.clone()).map(AttentionStats::to_array);
        for (k, stat) in AttentionStats::NAMES.iter().enumerate() {
            let bv = b.map(|v| v[k]);
            let cv = c.map(|v| v[k]);
            let (delta, ratio, pct) = match (bv, cv) {
                (Some(b), Some(c)) => (Some(c - b), crate::report::ratio(b, c), crate::report::pct_change(b, c)),
                _ => (None, None, None),
            };
            out.push(GroupComparison {
                group: name.clone(),
                statistic: stat.to_string(),
                baseline: bv,
                curriculum: cv,
                delta,
                ratio,
                pct_change: pct,
            });
        }
    }
    out
}
