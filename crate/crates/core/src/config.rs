//! Run configuration, stored as TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::LayerGroups;
use crate::model::ModelConfig;
use crate::trainer::{OptimConfig, RunMode, RunPlan};

pub const RUN_DIR_ENV: &str = "COGNILAB_RUN_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: RunMode,
    pub base_lr: f64,
    pub stage_ratios: [f64; 4],
    pub baseline_lr: f64,
    pub checkpoint_every: u64,
    pub eval_every: u64,
    /// Validation items scored at each evaluation.
    pub eval_items: usize,
    pub max_new_tokens: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: RunMode::Curriculum,
            base_lr: 1e-4,
            stage_ratios: [1.0, 0.7, 0.5, 0.2],
            baseline_lr: 6e-5,
            checkpoint_every: 500,
            eval_every: 200,
            eval_items: 64,
            max_new_tokens: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// External JSONL file; the synthetic generator is used when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    pub items_per_tier: usize,
    pub val_frac: f64,
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { input: None, items_per_tier: 1000, val_frac: 0.1, max_tokens: 128, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupPreset {
    Halves,
    Blocks,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Validation items per saliency probe.
    pub probe_items: usize,
    pub n_null: usize,
    pub induction_len: usize,
    pub induction_threshold: f64,
    /// Validation prompts whose attention and hidden states are dumped.
    pub dump_prompts: usize,
    pub pca_samples: usize,
    pub pca_components: usize,
    pub smoothing_window: usize,
    pub thresholds: Vec<f64>,
    pub tail_checkpoints: usize,
    pub heads_groups: GroupPreset,
    pub attn_groups: GroupPreset,
    pub resamples: usize,
    /// Training seeds compared by the `stats` command.
    pub seeds: Vec<u64>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            probe_items: 16,
            n_null: 20,
            induction_len: 12,
            induction_threshold: 0.3,
            dump_prompts: 8,
            pca_samples: 1000,
            pca_components: 10,
            smoothing_window: 5,
            thresholds: vec![0.25, 0.5, 0.75],
            tail_checkpoints: 5,
            heads_groups: GroupPreset::Halves,
            attn_groups: GroupPreset::Blocks,
            resamples: 10_000,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

impl AnalysisConfig {
    pub fn groups(preset: GroupPreset, n_layers: usize) -> LayerGroups {
        match preset {
            GroupPreset::Halves => LayerGroups::scaled_halves(n_layers),
            GroupPreset::Blocks => LayerGroups::scaled_blocks(n_layers),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Output root; falls back to `$COGNILAB_RUN_DIR`, then `runs`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run_root: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Drives model initialization and batch order.
    pub seed: u64,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub analysis: AnalysisConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::desk()
    }
}

impl RunConfig {
    /// Laptop-scale defaults: the full pipeline for two modes runs in minutes.
    pub fn desk() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::default(),
            optim: OptimConfig { accum_steps: 2, micro_batch: 4, ..OptimConfig::default() },
            train: TrainConfig {
                base_lr: 2e-3,
                baseline_lr: 1.2e-3,
                checkpoint_every: 20,
                eval_every: 10,
                eval_items: 24,
                max_new_tokens: 48,
                ..TrainConfig::default()
            },
            data: DataConfig { items_per_tier: 400, ..DataConfig::default() },
            analysis: AnalysisConfig {
                probe_items: 8,
                dump_prompts: 6,
                pca_samples: 400,
                resamples: 10_000,
                ..AnalysisConfig::default()
            },
            paths: PathsConfig::default(),
        }
    }

    /// Seconds-scale configuration for tests and smoke runs.
    pub fn tiny() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig { n_layers: 2, n_heads: 2, d_model: 32, vocab_size: 320, max_seq_len: 128, seed: 0 },
            optim: OptimConfig { accum_steps: 2, micro_batch: 2, ..OptimConfig::default() },
            train: TrainConfig {
                base_lr: 3e-3,
                baseline_lr: 1.8e-3,
                checkpoint_every: 8,
                eval_every: 4,
                eval_items: 8,
                max_new_tokens: 32,
                ..TrainConfig::default()
            },
            data: DataConfig { items_per_tier: 24, ..DataConfig::default() },
            analysis: AnalysisConfig {
                probe_items: 4,
                induction_len: 6,
                dump_prompts: 3,
                pca_samples: 200,
                pca_components: 4,
                resamples: 2000,
                seeds: vec![0, 1],
                ..AnalysisConfig::default()
            },
            paths: PathsConfig::default(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(RunConfig::desk()),
            "tiny" => Ok(RunConfig::tiny()),
            _ => Err(Error::invalid(format!("unknown preset {name:?} (expected desk or tiny)"))),
        }
    }

    /// Parses `text` over the desk preset.
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        RunConfig::desk().overlay(text, path)
    }

    /// Keys present in `text` replace the matching keys of `self`, at any depth.
    pub fn overlay(&self, text: &str, path: &Path) -> Result<Self> {
        let parse = |e: toml::de::Error| Error::parse(path, e.message());
        let patch: toml::Table = toml::from_str(text).map_err(parse)?;
        let mut base: toml::Table = toml::from_str(&self.to_toml()).map_err(parse)?;
        merge(&mut base, patch);
        let cfg: RunConfig = base.try_into().map_err(parse)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::from_toml(&crate::io::read_string(path)?, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.model.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        if !(self.train.base_lr > 0.0) || !(self.train.baseline_lr > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if self.train.stage_ratios.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::invalid("stage ratios must be positive"));
        }
        if !(self.data.val_frac > 0.0 && self.data.val_frac < 1.0) {
            return Err(Error::invalid("val_frac must lie in (0, 1)"));
        }
        if self.data.items_per_tier < 2 {
            return Err(Error::invalid("items_per_tier must be >= 2"));
        }
        if self.model.vocab_size < crate::corpus::FIRST_MERGE {
            return Err(Error::invalid(format!(
                "vocab_size must be >= {} (bytes plus specials)",
                crate::corpus::FIRST_MERGE
            )));
        }
        if self.analysis.n_null < crate::heads::MIN_NULL_PROBES {
            return Err(Error::invalid(format!("n_null must be >= {}", crate::heads::MIN_NULL_PROBES)));
        }
        if self.analysis.probe_items == 0 || self.analysis.smoothing_window == 0 {
            return Err(Error::invalid("probe_items and smoothing_window must be >= 1"));
        }
        Ok(())
    }

    pub fn plan(&self, mode: RunMode) -> RunPlan {
        let mut plan = RunPlan::standard(
            mode,
            self.seed,
            self.optim.clone(),
            self.train.base_lr,
            self.train.stage_ratios,
            self.train.baseline_lr,
        );
        plan.checkpoint_every = self.train.checkpoint_every;
        plan.eval_every = self.train.eval_every;
        plan
    }

    /// `paths.run_root`, else `$COGNILAB_RUN_DIR`, else `runs`.
    pub fn run_root(&self) -> PathBuf {
        self.paths
            .run_root
            .clone()
            .or_else(|| std::env::var_os(RUN_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }
}

fn merge(base: &mut toml::Table, patch: toml::Table) {
    for (key, value) in patch {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(p)) => merge(b, p),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}
