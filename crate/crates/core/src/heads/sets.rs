use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{HeadId, SpecializationRecord};
use crate::error::{Error, Result};

/// Named layer ranges for grouped comparisons.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGroups {
    pub groups: Vec<(String, Range<usize>)>,
}

impl LayerGroups {
    /// Early 0–11, late 12–23.
    pub fn halves_24() -> Self {
        LayerGroups { groups: vec![("early".into(), 0..12), ("late".into(), 12..24)] }
    }

    /// Early 0–3, middle 4–11, late 12–23.
    pub fn blocks_24() -> Self {
        LayerGroups { groups: vec![("early".into(), 0..4), ("middle".into(), 4..12), ("late".into(), 12..24)] }
    }

    /// Halves of an `n_layers` model.
    pub fn scaled_halves(n_layers: usize) -> Self {
        let mid = n_layers / 2;
        LayerGroups { groups: vec![("early".into(), 0..mid), ("late".into(), mid..n_layers)] }
    }

    /// The 4/8/12 block split rescaled to `n_layers`, with at least one early layer.
    pub fn scaled_blocks(n_layers: usize) -> Self {
        let early = ((n_layers * 4 + 12) / 24).max(1).min(n_layers);
        let middle = ((n_layers * 12 + 12) / 24).clamp(early, n_layers);
        LayerGroups {
            groups: vec![
                ("early".into(), 0..early),
                ("middle".into(), early..middle),
                ("late".into(), middle..n_layers),
            ],
        }
    }

    pub fn get(&self, name: &str) -> Option<Range<usize>> {
        self.groups.iter().find(|(n, _)| n == name).map(|(_, r)| r.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDistribution {
    pub per_layer: Vec<usize>,
    pub early: usize,
    pub late: usize,
}

impl LayerDistribution {
    /// `early:late`, e.g. `439:0`.
    pub fn ratio_label(&self) -> String {
        format!("{}:{}", self.early, self.late)
    }

    pub fn ratio(&self) -> Option<f64> {
        (self.late > 0).then(|| self.early as f64 / self.late as f64)
    }
}

pub fn layer_distribution(
    record: &SpecializationRecord,
    n_layers: usize,
    early: Range<usize>,
    late: Range<usize>,
) -> Result<LayerDistribution> {
    if early.end > n_layers || late.end > n_layers {
        return Err(Error::invalid(format!("layer range beyond {n_layers} layers")));
    }
    let mut per_layer = vec![0; n_layers];
    for id in &record.live {
        if id.layer >= n_layers {
            return Err(Error::invalid(format!("head {id} beyond {n_layers} layers")));
        }
        per_layer[id.layer] += 1;
    }
    Ok(LayerDistribution { early: per_layer[early].iter().sum(), late: per_layer[late].iter().sum(), per_layer })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Retention {
    pub shared: usize,
    pub source_size: usize,
    pub pct: Option<f64>,
}

impl fmt::Display for Retention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.pct {
            Some(p) => write!(f, "{} / {} ({:.1}%)", self.shared, self.source_size, p),
            None => write!(f, "{} / {} (n/a)", self.shared, self.source_size),
        }
    }
}

/// Share of the source set still present in the destination set.
pub fn stage_retention(source: &BTreeSet<HeadId>, dest: &BTreeSet<HeadId>) -> Retention {
    let shared = source.intersection(dest).count();
    Retention {
        shared,
        source_size: source.len(),
        pct: (!source.is_empty()).then(|| shared as f64 / source.len() as f64 * 100.0),
    }
}

/// Live heads at the last checkpoint, the union of distinct heads, and the
/// count of `(head, checkpoint)` instances.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub live_last: usize,
    pub unique_union: usize,
    pub instance_count: usize,
}

pub fn stage_counts(records: &[SpecializationRecord]) -> Result<StageCounts> {
    let last = records.last().ok_or_else(|| Error::invalid("stage has no checkpoints"))?;
    let union: BTreeSet<HeadId> = records.iter().flat_map(|r| r.live.iter().copied()).collect();
    Ok(StageCounts {
        live_last: last.live.len(),
        unique_union: union.len(),
        instance_count: records.iter().map(|r| r.live.len()).sum(),
    })
}
