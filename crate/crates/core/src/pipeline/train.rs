use std::fs;

use serde::Serialize;

use super::{cell, interleaved_val, load_split, parse_cell, require, Layout, RunLayout};
use crate::config::RunConfig;
use crate::corpus::{Stage, Tokenizer};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, threshold_crossings};
use crate::io::{
    load_checkpoint, save_checkpoint, save_dump, save_hidden, write_atomic, CheckpointInfo, DumpMeta, RunLock,
};
use crate::model::{forward, init_params};
use crate::report::Table;
use crate::trainer::{run_plan, CheckpointEvent, EvalSpec, MetricRow, RunMode, RunSink};

const METRIC_COLUMNS: [&str; 6] = ["step", "stage", "lr", "loss", "success", "step_rate"];

/// Writes metrics, checkpoints and capture dumps into a run directory.
pub struct RunDirSink {
    pub run: RunLayout,
    pub mode: RunMode,
    pub seed: u64,
    pub dump_prompts: Vec<(String, Vec<usize>)>,
    pub tokenizer_hash: String,
    metrics: Table,
}

impl RunDirSink {
    pub fn new(
        run: RunLayout,
        mode: RunMode,
        seed: u64,
        dump_prompts: Vec<(String, Vec<usize>)>,
        tokenizer: &Tokenizer,
    ) -> Self {
        RunDirSink {
            run,
            mode,
            seed,
            dump_prompts,
            tokenizer_hash: tokenizer.hash(),
            metrics: Table::new(&METRIC_COLUMNS),
        }
    }

    pub fn flush(&self) -> Result<()> {
        self.metrics.write(&self.run.metrics())
    }
}

impl RunSink for RunDirSink {
    fn on_update(&mut self, row: &MetricRow) -> Result<()> {
        self.metrics.push(&[
            row.step.to_string(),
            row.stage.clone(),
            row.lr.to_string(),
            row.loss.to_string(),
            cell(row.success),
            cell(row.step_rate),
        ])
    }

    fn on_checkpoint(&mut self, event: &CheckpointEvent<'_>) -> Result<()> {
        save_checkpoint(
            &self.run.checkpoint(event.step),
            event.params,
            event.state,
            CheckpointInfo {
                step: event.step,
                mode: self.mode,
                stage: event.stage,
                stage_end: event.stage_end,
                seed: self.seed,
            },
        )?;
        let dir = self.run.dump(event.step);
        for (i, (id, tokens)) in self.dump_prompts.iter().enumerate() {
            let (_, bundle) = forward(event.params, tokens, true)?;
            let bundle = bundle.expect("capture requested");
            let meta =
                DumpMeta { prompt_id: id.clone(), step: event.step, tokenizer_hash: self.tokenizer_hash.clone() };
            save_dump(&dir.join(format!("prompt_{i:03}.attn")), &bundle.attention, &meta)?;
            save_hidden(&dir.join(format!("prompt_{i:03}.hid")), &bundle.hidden_states, &meta)?;
        }
        log::info!("checkpoint {} ({})", event.step, event.stage.map_or("all", Stage::name));
        self.flush()
    }
}

#[derive(Serialize)]
struct RunManifest {
    mode: RunMode,
    seed: u64,
    tokenizer_hash: String,
    config: RunConfig,
}

/// Trains one run of `mode` under the config seed into `<root>/<mode>-s<seed>`.
pub fn train(cfg: &RunConfig, mode: RunMode) -> Result<String> {
    let layout = Layout::new(cfg);
    let (split, tokenizer) = load_split(&layout)?;
    if tokenizer.vocab_size() > cfg.model.vocab_size {
        return Err(Error::invalid(format!(
            "tokenizer has {} ids but the model only {}",
            tokenizer.vocab_size(),
            cfg.model.vocab_size
        )));
    }
    let run = layout.run(mode, cfg.seed);
    let _lock = RunLock::acquire(&run.dir)?;
    for old in [run.checkpoints(), run.dumps(), run.dir.join("logs"), run.analysis()] {
        if old.exists() {
            fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
        }
    }
    let manifest = RunManifest {
        mode,
        seed: cfg.seed,
        tokenizer_hash: tokenizer.hash(),
        config: RunConfig { paths: Default::default(), ..cfg.clone() },
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::parse(run.manifest(), e))?;
    write_atomic(&run.manifest(), text.as_bytes())?;

    let eval_items = interleaved_val(&split, &Stage::ALL, cfg.train.eval_items);
    let dump_prompts = interleaved_val(&split, &Stage::ALL, cfg.analysis.dump_prompts)
        .into_iter()
        .map(|i| {
            let tokens = tokenizer.prompt_tokens(&i.question);
            (i.id, tokens)
        })
        .collect();
    let mut model_cfg = cfg.model.clone();
    model_cfg.seed = cfg.seed;
    let params = init_params(&model_cfg)?;
    let mut sink = RunDirSink::new(run.clone(), mode, cfg.seed, dump_prompts, &tokenizer);
    let eval = EvalSpec { items: &eval_items, max_new: cfg.train.max_new_tokens };
    let outcome = run_plan(&cfg.plan(mode), params, &split, &tokenizer, Some(&eval), &mut sink)?;
    sink.flush()?;
    let last = outcome.metrics.last().expect("at least one update");
    Ok(format!(
        "{mode}: {} updates, final loss {:.4}, success {}",
        outcome.total_updates,
        last.loss,
        last.success.map_or("n/a".into(), |s| format!("{s:.3}"))
    ))
}

type Curve = Vec<(u64, f64)>;

/// `(step, success)` points of a run's evaluation log, and the full rows.
pub(crate) fn read_metrics(run: &RunLayout) -> Result<(Curve, Curve, Curve)> {
    require(&run.metrics(), "train")?;
    let t = Table::read(&run.metrics())?;
    let mut success = Vec::new();
    let mut step_rate = Vec::new();
    let mut loss = Vec::new();
    for row in &t.rows {
        let step = parse_cell(&t, row, "step")?.unwrap_or_default() as u64;
        if let Some(l) = parse_cell(&t, row, "loss")? {
            loss.push((step, l));
        }
        if let Some(s) = parse_cell(&t, row, "success")? {
            success.push((step, s));
        }
        if let Some(s) = parse_cell(&t, row, "step_rate")? {
            step_rate.push((step, s));
        }
    }
    Ok((success, step_rate, loss))
}

pub(crate) fn thresholds_table(cfg: &RunConfig, baseline: &RunLayout, other: &RunLayout) -> Result<Table> {
    let (b, _, _) = read_metrics(baseline)?;
    let (c, _, _) = read_metrics(other)?;
    let report = threshold_crossings(&b, &c, &cfg.analysis.thresholds, cfg.analysis.smoothing_window)?;
    let mut t = Table::new(&["threshold", "baseline_updates", "curriculum_updates", "speedup"]);
    for r in report.rows {
        let fmt = |v: Option<u64>| v.map_or("unreached".to_string(), |x| x.to_string());
        t.push(&[
            r.threshold.to_string(),
            fmt(r.baseline),
            fmt(r.curriculum),
            r.speedup.map_or("n/a".into(), |s| format!("{s:.2}")),
        ])?;
    }
    Ok(t)
}

/// Scores the final checkpoint on every validation item.
pub fn eval(cfg: &RunConfig, mode: RunMode) -> Result<String> {
    let layout = Layout::new(cfg);
    let (split, tokenizer) = load_split(&layout)?;
    let run = layout.run(mode, cfg.seed);
    let step = *run
        .checkpoint_steps()?
        .last()
        .ok_or_else(|| Error::invalid(format!("no checkpoints in {}; run `train` first", run.dir.display())))?;
    let ckpt = load_checkpoint(&run.checkpoint(step))?;

    let mut items_table = Table::new(&["id", "stage", "correct", "step_score", "predicted_answer", "gold_answer"]);
    let mut summary = Table::new(&["stage", "items", "success_rate", "step_rate"]);
    let mut all = Vec::new();
    for s in Stage::ALL {
        let val = &split.stage(s).val;
        if val.is_empty() {
            summary.push(&[s.name(), "0", "n/a", "n/a"])?;
            continue;
        }
        let out = evaluate(&ckpt.params, &tokenizer, val, cfg.train.max_new_tokens)?;
        for it in &out.items {
            items_table.push(&[
                it.id.clone(),
                s.name().to_string(),
                it.correct.to_string(),
                cell(it.step_score),
                it.predicted_answer.clone(),
                it.gold_answer.clone(),
            ])?;
        }
        summary.push(&[
            s.name().to_string(),
            val.len().to_string(),
            format!("{:.4}", out.success_rate),
            out.step_rate.map_or("n/a".into(), |r| format!("{r:.4}")),
        ])?;
        all.extend(out.items);
    }
    let overall = crate::evaluation::EvalOutcome::from_items(all)?;
    summary.push(&[
        "all".to_string(),
        overall.items.len().to_string(),
        format!("{:.4}", overall.success_rate),
        overall.step_rate.map_or("n/a".into(), |r| format!("{r:.4}")),
    ])?;
    items_table.write(&run.dir.join("eval_report.csv"))?;
    summary.write(&run.dir.join("eval_summary.csv"))?;

    let baseline = layout.run(RunMode::Baseline, cfg.seed);
    if mode != RunMode::Baseline && baseline.metrics().is_file() {
        thresholds_table(cfg, &baseline, &run)?.write(&run.dir.join("thresholds.csv"))?;
    }
    Ok(format!("{mode} step {step}: success {:.3} over {} items", overall.success_rate, overall.items.len()))
}
