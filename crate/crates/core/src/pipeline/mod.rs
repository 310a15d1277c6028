//! The end-to-end workflow behind each command-line subcommand. Every step
//! reads its inputs from and writes its outputs into the run root.

mod analysis;
mod data;
mod reporting;
mod train;

pub use analysis::{analyze_attn, analyze_heads, analyze_pca, CheckpointHeads, HeadsAnalysis};
pub use data::{clean, gen_data, label, split};
pub use reporting::{report, stats};
pub use train::{eval, train, RunDirSink};

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::corpus::{CorpusSplit, QAItem, Stage, Tokenizer};
use crate::error::{Error, Result};
use crate::io::{read_string, write_atomic};
use crate::report::Table;
use crate::trainer::RunMode;

/// Paths under the run root.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(cfg: &RunConfig) -> Self {
        Layout { root: cfg.run_root() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn raw(&self) -> PathBuf {
        self.data().join("raw.jsonl")
    }

    pub fn clean(&self) -> PathBuf {
        self.data().join("clean.jsonl")
    }

    pub fn rejections(&self) -> PathBuf {
        self.data().join("rejections.csv")
    }

    pub fn labeled(&self) -> PathBuf {
        self.data().join("labeled.jsonl")
    }

    pub fn classifier(&self) -> PathBuf {
        self.data().join("classifier.json")
    }

    pub fn split(&self) -> PathBuf {
        self.data().join("split.json")
    }

    pub fn tokenizer(&self) -> PathBuf {
        self.data().join("tokenizer.json")
    }

    pub fn run(&self, mode: RunMode, seed: u64) -> RunLayout {
        RunLayout { dir: self.root.join(format!("{}-s{seed}", mode.name())) }
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report")
    }
}

/// Paths inside one training run's directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunLayout {
    pub dir: PathBuf,
}

impl RunLayout {
    pub fn manifest(&self) -> PathBuf {
        self.dir.join("manifest.toml")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.dir.join("checkpoints")
    }

    pub fn checkpoint(&self, step: u64) -> PathBuf {
        self.checkpoints().join(format!("step_{step}"))
    }

    pub fn dumps(&self) -> PathBuf {
        self.dir.join("dumps")
    }

    pub fn dump(&self, step: u64) -> PathBuf {
        self.dumps().join(format!("step_{step}"))
    }

    pub fn metrics(&self) -> PathBuf {
        self.dir.join("logs").join("metrics.csv")
    }

    pub fn analysis(&self) -> PathBuf {
        self.dir.join("analysis")
    }

    pub fn exists(&self) -> bool {
        self.manifest().is_file()
    }

    /// Steps of the `step_<N>` subdirectories of `dir`, ascending.
    pub fn steps_in(dir: &Path) -> Result<Vec<u64>> {
        if !dir.is_dir() {
            return Ok(Vec::new());
        }
        let mut steps = Vec::new();
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let entry = entry.map_err(|e| Error::io(dir, e))?;
            if let Some(n) = entry.file_name().to_str().and_then(|s| s.strip_prefix("step_")) {
                if let Ok(step) = n.parse() {
                    steps.push(step);
                }
            }
        }
        steps.sort_unstable();
        Ok(steps)
    }

    pub fn checkpoint_steps(&self) -> Result<Vec<u64>> {
        RunLayout::steps_in(&self.checkpoints())
    }

    pub fn dump_steps(&self) -> Result<Vec<u64>> {
        RunLayout::steps_in(&self.dumps())
    }
}

/// Files in `dir` with extension `ext`, sorted by name.
fn files_with_extension(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().and_then(|e| e.to_str()) == Some(ext) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{} not found; run `{hint}` first", path.display())))
    }
}

pub fn load_split(layout: &Layout) -> Result<(CorpusSplit, Tokenizer)> {
    let split: CorpusSplit = read_json(&layout.split(), "split")?;
    let tp = layout.tokenizer();
    let tokenizer = Tokenizer::from_json(&read_string(&tp)?)?;
    Ok((split, tokenizer))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, hint: &str) -> Result<T> {
    require(path, hint)?;
    serde_json::from_str(&read_string(path)?).map_err(|e| Error::parse(path, e))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path, e))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Validation items taken round-robin across stages, at most `n`.
pub fn interleaved_val(split: &CorpusSplit, stages: &[Stage], n: usize) -> Vec<QAItem> {
    let lists: Vec<&[QAItem]> = stages.iter().map(|&s| split.stage(s).val.as_slice()).collect();
    let longest = lists.iter().map(|l| l.len()).max().unwrap_or(0);
    let mut out = Vec::new();
    'outer: for i in 0..longest {
        for l in &lists {
            if out.len() == n {
                break 'outer;
            }
            if let Some(item) = l.get(i) {
                out.push(item.clone());
            }
        }
    }
    out
}

/// `{}` for present values, empty for absent ones.
fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_cell(table: &Table, row: &[String], name: &str) -> Result<Option<f64>> {
    let col = table.column(name).ok_or_else(|| Error::invalid(format!("missing column {name}")))?;
    let s = row[col].trim();
    if s.is_empty() || s == "n/a" {
        return Ok(None);
    }
    s.parse().map(Some).map_err(|_| Error::invalid(format!("column {name}: {s:?} is not a number")))
}
