//! Question/answer corpus: cleaning, complexity labelling, splitting,
//! synthetic generation and a byte-level BPE tokenizer.

mod classifier;
mod clean;
mod features;
mod jsonl;
mod split;
mod synthetic;
mod tokenizer;

pub use classifier::{train_complexity_classifier, ComplexityModel};
pub use clean::{clean_item, clean_text, RawItem, RejectReason, TokenCount, WhitespaceCount};
pub use features::{
    delimiter_count, extract_features, operator_density, sentence_count, split_steps, ComplexityFeatures, OPERATORS,
};
pub use jsonl::{read_items, read_raw_items, write_items, write_rejections, RawRecord};
pub use split::{stratified_split, CorpusSplit, StageSplit};
pub use synthetic::{generate_synthetic, tier1_comparison};
pub use tokenizer::{train_tokenizer, Tokenizer, BOS, EOS, FIRST_MERGE, SEP};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Curriculum tier, in order of increasing difficulty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Simple,
    Basic,
    Intermediate,
    Complex,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Simple, Stage::Basic, Stage::Intermediate, Stage::Complex];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Stage> {
        Stage::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Simple => "simple",
            Stage::Basic => "basic",
            Stage::Intermediate => "intermediate",
            Stage::Complex => "complex",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| Error::invalid(format!("unknown stage {s:?}")))
    }
}

/// One question/answer pair, optionally with gold reasoning steps and a tier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QAItem {
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub id: String,
    pub question: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<Stage>,
}

impl QAItem {
    pub fn gold_steps(&self) -> &[String] {
        self.rationale.as_deref().unwrap_or(&[])
    }

    /// The text a model is trained to produce: gold steps then the final
    /// answer, one per line.
    pub fn completion(&self) -> String {
        let mut out = String::new();
        for step in self.gold_steps() {
            out.push_str(step);
            out.push('\n');
        }
        out.push_str(&self.answer);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
            assert_eq!(Stage::from_index(s.index()), Some(s));
        }
        assert!("hard".parse::<Stage>().is_err());
    }

    #[test]
    fn completion_joins_steps_before_answer() {
        let item = QAItem {
            id: String::new(),
            question: "q".into(),
            answer: "14".into(),
            rationale: Some(vec!["4 × 2 = 8".into(), "6 + 8 = 14".into()]),
            stage: None,
        };
        assert_eq!(item.completion(), "4 × 2 = 8\n6 + 8 = 14\n14");
    }
}
