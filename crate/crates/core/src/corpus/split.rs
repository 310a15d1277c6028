use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{QAItem, Stage};
use crate::error::{Error, Result};
use crate::rng::{self, streams};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageSplit {
    pub train: Vec<QAItem>,
    pub val: Vec<QAItem>,
}

/// Train/validation partitions for each curriculum stage, indexed by
/// [`Stage::index`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub stages: [StageSplit; 4],
}

impl CorpusSplit {
    pub fn stage(&self, s: Stage) -> &StageSplit {
        &self.stages[s.index()]
    }

    /// Every training item, stage by stage.
    pub fn all_train(&self) -> Vec<QAItem> {
        self.stages.iter().flat_map(|s| s.train.iter().cloned()).collect()
    }

    pub fn all_val(&self) -> Vec<QAItem> {
        self.stages.iter().flat_map(|s| s.val.iter().cloned()).collect()
    }
}

/// Per-stage shuffle then hold out `round(n * val_frac)` items, at least one
/// and at most `n - 1`. Stages with no items stay empty.
pub fn stratified_split(items: &[QAItem], val_frac: f64, seed: u64) -> Result<CorpusSplit> {
    if !(0.0..1.0).contains(&val_frac) {
        return Err(Error::invalid(format!("validation fraction {val_frac} outside [0, 1)")));
    }
    let mut by_stage: [Vec<QAItem>; 4] = Default::default();
    for item in items {
        let stage = item.stage.ok_or_else(|| Error::invalid(format!("item {:?} has no stage label", item.id)))?;
        by_stage[stage.index()].push(item.clone());
    }
    let mut rng = rng::stream(seed, streams::SPLIT);
    let mut out = CorpusSplit::default();
    for (i, mut group) in by_stage.into_iter().enumerate() {
        let n = group.len();
        if n == 0 {
            continue;
        }
        if n < 2 {
            return Err(Error::invalid(format!(
                "stage {} has {n} item; at least 2 are needed to split",
                Stage::ALL[i]
            )));
        }
        group.shuffle(&mut rng);
        let n_val = ((n as f64 * val_frac).round() as usize).clamp(1, n - 1);
        let train = group.split_off(n_val);
        out.stages[i] = StageSplit { train, val: group };
    }
    Ok(out)
}
