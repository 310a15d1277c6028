use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{files_with_extension, interleaved_val, load_split, read_json, write_json, Layout, RunLayout};
use crate::config::{AnalysisConfig, RunConfig};
use crate::corpus::{CorpusSplit, Stage, Tokenizer, BOS};
use crate::error::{Error, Result};
use crate::geometry::{head_stats, pca_structure_score, AttentionStats};
use crate::heads::{
    detect, head_saliency, induction_heads, induction_probe, induction_score, layer_distribution, null_threshold,
    stage_counts, stage_retention, Archetype, EmergenceCurve, HeadId, SpecializationRecord,
};
use crate::io::{load_checkpoint, load_dump, load_hidden};
use crate::model::{forward, LmExample, ModelParams};
use crate::report::Table;
use crate::trainer::RunMode;

/// Printable ASCII, the token range of the induction probe.
const PROBE_TOKENS: std::ops::Range<usize> = 32..127;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeads {
    pub step: u64,
    pub stage: Option<Stage>,
    pub threshold: f64,
    pub saliency: Vec<f64>,
    pub live: BTreeSet<HeadId>,
    pub archetypes: BTreeMap<Archetype, BTreeSet<HeadId>>,
}

impl CheckpointHeads {
    pub fn record(&self) -> SpecializationRecord {
        SpecializationRecord { step: self.step, threshold: self.threshold, live: self.live.clone() }
    }

    pub fn stage_label(&self) -> &'static str {
        self.stage.map_or("all", Stage::name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadsAnalysis {
    pub mode: RunMode,
    pub n_layers: usize,
    pub n_heads: usize,
    pub checkpoints: Vec<CheckpointHeads>,
}

impl HeadsAnalysis {
    pub fn path(run: &RunLayout) -> std::path::PathBuf {
        run.analysis().join("specialization.json")
    }

    pub fn load(run: &RunLayout) -> Result<Self> {
        read_json(&HeadsAnalysis::path(run), "analyze-heads")
    }

    /// Consecutive checkpoints that share a stage label.
    pub fn segments(&self) -> Vec<&[CheckpointHeads]> {
        self.checkpoints.chunk_by(|a, b| a.stage == b.stage).collect()
    }

    pub fn emergence(&self) -> Result<Vec<EmergenceCurve>> {
        let steps: Vec<u64> = self.checkpoints.iter().map(|c| c.step).collect();
        Archetype::ALL
            .iter()
            .map(|&a| {
                let sets: Vec<BTreeSet<HeadId>> =
                    self.checkpoints.iter().map(|c| c.archetypes.get(&a).cloned().unwrap_or_default()).collect();
                EmergenceCurve::from_sets(a, steps.clone(), &sets)
            })
            .collect()
    }
}

fn encode_probe(
    tokenizer: &Tokenizer,
    split: &CorpusSplit,
    stages: &[Stage],
    n: usize,
    max_len: usize,
) -> Vec<LmExample> {
    interleaved_val(split, stages, n).iter().filter_map(|i| tokenizer.encode_example(i, max_len).ok()).collect()
}

/// Live heads of `params` on `probe` against its own permutation null.
fn specialized(
    params: &ModelParams,
    probe: &[LmExample],
    id: &str,
    step: u64,
    a: &AnalysisConfig,
    seed: u64,
) -> Result<(Vec<f64>, f64, BTreeSet<HeadId>)> {
    let map = head_saliency(params, probe, id, step)?;
    let tau = null_threshold(params, probe, a.n_null.max(crate::heads::MIN_NULL_PROBES), seed)?;
    let live = detect(&map, tau).live;
    Ok((map.values, tau, live))
}

/// Saliency, null threshold and archetype sets at every checkpoint of a run.
pub fn analyze_heads(cfg: &RunConfig, mode: RunMode) -> Result<String> {
    let layout = Layout::new(cfg);
    let (split, tokenizer) = load_split(&layout)?;
    let run = layout.run(mode, cfg.seed);
    let steps = run.checkpoint_steps()?;
    if steps.is_empty() {
        return Err(Error::invalid(format!("no checkpoints in {}; run `train` first", run.dir.display())));
    }
    let a = &cfg.analysis;
    let max_len = cfg.model.max_seq_len;
    let main = encode_probe(&tokenizer, &split, &Stage::ALL, a.probe_items, max_len);
    if main.is_empty() {
        return Err(Error::invalid("no validation items fit the saliency probe"));
    }
    let reasoning = encode_probe(&tokenizer, &split, &[Stage::Basic, Stage::Intermediate], a.probe_items, max_len);
    let pattern = encode_probe(&tokenizer, &split, &[Stage::Simple], a.probe_items, max_len);
    let induction = induction_probe(BOS, a.induction_len, PROBE_TOKENS, cfg.seed)?;

    let mut checkpoints = Vec::with_capacity(steps.len());
    let (mut n_layers, mut n_heads) = (0, 0);
    for &step in &steps {
        let ckpt = load_checkpoint(&run.checkpoint(step))?;
        let params = &ckpt.params;
        (n_layers, n_heads) = (params.config.n_layers, params.config.n_heads);
        let (saliency, threshold, live) = specialized(params, &main, "validation", step, a, cfg.seed)?;

        let mut archetypes = BTreeMap::new();
        let (_, bundle) = forward(params, &induction, true)?;
        let scores = induction_score(&bundle.expect("capture requested").attention, &induction)?;
        archetypes.insert(Archetype::Induction, induction_heads(&scores, n_heads, a.induction_threshold));
        for (arch, probe) in [(Archetype::Reasoning, &reasoning), (Archetype::PatternMatcher, &pattern)] {
            let set = if probe.is_empty() {
                BTreeSet::new()
            } else {
                specialized(params, probe, arch.name(), step, a, cfg.seed)?.2
            };
            archetypes.insert(arch, set);
        }
        log::info!("{mode} step {step}: {} live heads, tau {threshold:.3e}", live.len());
        checkpoints.push(CheckpointHeads { step, stage: ckpt.manifest.stage, threshold, saliency, live, archetypes });
    }
    let analysis = HeadsAnalysis { mode, n_layers, n_heads, checkpoints };
    write_heads_tables(cfg, &run, &analysis)?;
    write_json(&HeadsAnalysis::path(&run), &analysis)?;
    Ok(format!(
        "{mode}: {} checkpoints, {} live heads at the last",
        analysis.checkpoints.len(),
        analysis.checkpoints.last().map_or(0, |c| c.live.len())
    ))
}

fn write_heads_tables(cfg: &RunConfig, run: &RunLayout, h: &HeadsAnalysis) -> Result<()> {
    let dir = run.analysis();
    for c in &h.checkpoints {
        let mut t = Table::new(&["layer", "head", "saliency", "threshold", "specialized"]);
        for (i, s) in c.saliency.iter().enumerate() {
            let id = HeadId::new(i / h.n_heads, i % h.n_heads);
            t.push(&[
                id.layer.to_string(),
                id.head.to_string(),
                s.to_string(),
                c.threshold.to_string(),
                c.live.contains(&id).to_string(),
            ])?;
        }
        t.write(&dir.join(format!("heads_{}.csv", c.step)))?;
    }

    let groups = AnalysisConfig::groups(cfg.analysis.heads_groups, h.n_layers);
    let early = groups.groups.first().map(|g| g.1.clone()).unwrap_or(0..0);
    let late = groups.groups.last().map(|g| g.1.clone()).unwrap_or(0..0);
    let mut headers: Vec<String> = ["step", "stage", "live", "early", "late", "early_late"].map(String::from).to_vec();
    headers.extend((0..h.n_layers).map(|l| format!("layer_{l}")));
    let mut layers = Table::new(&headers);
    for c in &h.checkpoints {
        let d = layer_distribution(&c.record(), h.n_layers, early.clone(), late.clone())?;
        let mut row = vec![
            c.step.to_string(),
            c.stage_label().to_string(),
            c.live.len().to_string(),
            d.early.to_string(),
            d.late.to_string(),
            d.ratio_label(),
        ];
        row.extend(d.per_layer.iter().map(|n| n.to_string()));
        layers.push(&row)?;
    }
    layers.write(&dir.join("layers.csv"))?;

    let segments = h.segments();
    let mut counts = Table::new(&["stage", "checkpoints", "live_last", "unique_union", "instance_count"]);
    for seg in &segments {
        let records: Vec<SpecializationRecord> = seg.iter().map(CheckpointHeads::record).collect();
        let c = stage_counts(&records)?;
        counts.push(&[
            seg[0].stage_label().to_string(),
            seg.len().to_string(),
            c.live_last.to_string(),
            c.unique_union.to_string(),
            c.instance_count.to_string(),
        ])?;
    }
    counts.write(&dir.join("stage_counts.csv"))?;

    let mut retention = Table::new(&["from", "to", "shared", "source_size", "pct", "display"]);
    for pair in segments.windows(2) {
        let (src, dst) = (pair[0].last().expect("nonempty"), pair[1].last().expect("nonempty"));
        let r = stage_retention(&src.live, &dst.live);
        retention.push(&[
            src.stage_label().to_string(),
            dst.stage_label().to_string(),
            r.shared.to_string(),
            r.source_size.to_string(),
            super::cell(r.pct),
            r.to_string(),
        ])?;
    }
    retention.write(&dir.join("retention.csv"))?;

    let curves = h.emergence()?;
    let mut emergence = Table::new(&["archetype", "step", "cumulative"]);
    let mut auc = Table::new(&["archetype", "auc", "final"]);
    for c in &curves {
        for (s, n) in c.steps.iter().zip(&c.counts) {
            emergence.push(&[c.archetype.name().to_string(), s.to_string(), n.to_string()])?;
        }
        auc.push(&[
            c.archetype.name().to_string(),
            c.auc.to_string(),
            c.counts.last().copied().unwrap_or(0).to_string(),
        ])?;
    }
    emergence.write(&dir.join("emergence.csv"))?;
    auc.write(&dir.join("emergence_auc.csv"))
}

/// Per-head attention statistics `[step][layer][head]` from the dumps.
pub(crate) fn attention_by_step(run: &RunLayout) -> Result<Vec<(u64, Vec<Vec<AttentionStats>>)>> {
    let mut out = Vec::new();
    for step in run.dump_steps()? {
        let files = files_with_extension(&run.dump(step), "attn")?;
        let maps = files.iter().map(|f| load_dump(f)).collect::<Result<Vec<_>>>()?;
        if maps.is_empty() {
            continue;
        }
        out.push((step, head_stats(&maps)?));
    }
    Ok(out)
}

/// Gini, entropy, local focus and mean distance per head at every dump.
pub fn analyze_attn(cfg: &RunConfig, mode: RunMode) -> Result<String> {
    let run = Layout::new(cfg).run(mode, cfg.seed);
    let by_step = attention_by_step(&run)?;
    if by_step.is_empty() {
        return Err(Error::invalid(format!("no attention dumps in {}; run `train` first", run.dir.display())));
    }
    let mut t = Table::new(&["step", "layer", "head", "gini", "entropy", "local_focus", "mean_distance"]);
    for (step, stats) in &by_step {
        for (l, row) in stats.iter().enumerate() {
            for (h, s) in row.iter().enumerate() {
                let mut cells = vec![step.to_string(), l.to_string(), h.to_string()];
                cells.extend(s.to_array().iter().map(|v| v.to_string()));
                t.push(&cells)?;
            }
        }
    }
    t.write(&run.analysis().join("attn_stats.csv"))?;
    Ok(format!("{mode}: attention statistics at {} checkpoints", by_step.len()))
}

/// Top-k explained variance of the hidden states at every dump.
pub fn analyze_pca(cfg: &RunConfig, mode: RunMode) -> Result<String> {
    let run = Layout::new(cfg).run(mode, cfg.seed);
    let mut scores = Vec::new();
    for step in run.dump_steps()? {
        let files = files_with_extension(&run.dump(step), "hid")?;
        let prompts = files.iter().map(|f| load_hidden(f)).collect::<Result<Vec<_>>>()?;
        if prompts.is_empty() {
            continue;
        }
        let a = &cfg.analysis;
        scores.push(pca_structure_score(&prompts, a.pca_samples, a.pca_components, cfg.seed, step)?);
    }
    let n_layers = scores
        .first()
        .map(|s| s.per_layer.len())
        .ok_or_else(|| Error::invalid(format!("no hidden-state dumps in {}; run `train` first", run.dir.display())))?;
    let mut headers: Vec<String> = vec!["step".into(), "score".into()];
    headers.extend((0..n_layers).map(|l| format!("layer_{l}")));
    let mut t = Table::new(&headers);
    for s in &scores {
        let mut row = vec![s.step.to_string(), s.score.to_string()];
        row.extend(s.per_layer.iter().map(|v| v.to_string()));
        t.push(&row)?;
    }
    t.write(&run.analysis().join("structure_score.csv"))?;
    Ok(format!(
        "{mode}: structure score {:.4} at step {}",
        scores.last().expect("nonempty").score,
        scores.last().expect("nonempty").step
    ))
}
