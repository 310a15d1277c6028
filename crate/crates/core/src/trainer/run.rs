use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{adamw_step, clip_global_norm, lr_at, GradAccumulator, OptimConfig, OptimState};
use crate::corpus::{CorpusSplit, QAItem, Stage, Tokenizer};
use crate::error::{Error, Result};
use crate::evaluation::evaluate;
use crate::model::{loss_and_grads, LmExample, ModelParams};
use crate::rng::{self, streams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Curriculum,
    Baseline,
    Shuffled,
    ResetAtBoundaries,
}

impl RunMode {
    pub const ALL: [RunMode; 4] =
        [RunMode::Curriculum, RunMode::Baseline, RunMode::Shuffled, RunMode::ResetAtBoundaries];

    pub fn name(self) -> &'static str {
        match self {
            RunMode::Curriculum => "curriculum",
            RunMode::Baseline => "baseline",
            RunMode::Shuffled => "shuffled",
            RunMode::ResetAtBoundaries => "reset_at_boundaries",
        }
    }
}

impl fmt::Display for RunMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "reset" {
            return Ok(RunMode::ResetAtBoundaries);
        }
        RunMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown run mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub stage: Stage,
    pub peak_lr: f64,
    pub epochs: usize,
    pub micro_batch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunPlan {
    pub mode: RunMode,
    pub seed: u64,
    pub optim: OptimConfig,
    /// Stages in curriculum order; shuffled mode permutes them.
    pub stages: Vec<StageSpec>,
    pub baseline_lr: f64,
    pub checkpoint_every: u64,
    pub eval_every: u64,
}

impl RunPlan {
    /// The four stages at `base_lr * ratio`, one epoch each, with the last
    /// stage at half the micro-batch.
    pub fn standard(
        mode: RunMode,
        seed: u64,
        optim: OptimConfig,
        base_lr: f64,
        ratios: [f64; 4],
        baseline_lr: f64,
    ) -> Self {
        let stages = Stage::ALL
            .iter()
            .zip(ratios)
            .map(|(&stage, r)| StageSpec {
                stage,
                peak_lr: base_lr * r,
                epochs: 1,
                micro_batch: if stage == Stage::Complex { (optim.micro_batch / 2).max(1) } else { optim.micro_batch },
            })
            .collect();
        RunPlan { mode, seed, optim, stages, baseline_lr, checkpoint_every: 500, eval_every: 200 }
    }

    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        if self.stages.is_empty() {
            return Err(Error::invalid("plan has no stages"));
        }
        for s in &self.stages {
            if !(s.peak_lr > 0.0) || s.epochs == 0 || s.micro_batch == 0 {
                return Err(Error::invalid(format!(
                    "stage {} needs peak_lr > 0, epochs and micro_batch >= 1",
                    s.stage
                )));
            }
        }
        if self.mode == RunMode::Baseline && !(self.baseline_lr > 0.0) {
            return Err(Error::invalid("baseline learning rate must be positive"));
        }
        if self.checkpoint_every == 0 || self.eval_every == 0 {
            return Err(Error::invalid("cadences must be >= 1"));
        }
        Ok(())
    }

    /// Stage visiting order: as given, or a seeded non-identity permutation
    /// in shuffled mode.
    pub fn stage_order(&self) -> Vec<StageSpec> {
        let mut order = self.stages.clone();
        if self.mode == RunMode::Shuffled && order.len() > 1 {
            let mut rng = rng::stream(self.seed, streams::STAGE_ORDER);
            while order == self.stages {
                order.shuffle(&mut rng);
            }
        }
        order
    }
}

/// Position of an item in a [`CorpusSplit`] training partition.
pub type ItemRef = (Stage, usize);

#[derive(Clone, Debug, PartialEq)]
pub struct PlannedUpdate {
    pub lr: f64,
    pub batch: Vec<ItemRef>,
}

/// A run of updates under one schedule: a curriculum stage, or the whole
/// baseline run (`stage == None`).
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub stage: Option<Stage>,
    pub updates: Vec<PlannedUpdate>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpdatePlan {
    pub segments: Vec<Segment>,
}

impl UpdatePlan {
    pub fn total_updates(&self) -> usize {
        self.segments.iter().map(|s| s.updates.len()).sum()
    }

    /// Every item visit, sorted, for multiset comparisons.
    pub fn visits(&self) -> Vec<ItemRef> {
        let mut v: Vec<ItemRef> =
            self.segments.iter().flat_map(|s| s.updates.iter().flat_map(|u| u.batch.iter().copied())).collect();
        v.sort();
        v
    }
}

fn stage_updates(n_items: usize, spec: &StageSpec, optim: &OptimConfig) -> usize {
    spec.epochs * n_items.div_ceil(optim.effective_batch(spec.micro_batch))
}

/// Cosine rates for the `n` updates of one segment. Warmup is capped at a
/// quarter of the segment and update `i` uses schedule step `i + 1` of
/// `n + 1`, so neither the first nor the last update runs at rate 0.
fn segment_rates(n: usize, warmup: usize, peak: f64) -> Result<Vec<f64>> {
    let w = warmup.min(n / 4);
    (0..n).map(|i| lr_at(i + 1, w, n + 1, peak)).collect()
}

fn epoch_batches(pool: &[ItemRef], batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<ItemRef>> {
    let mut order = pool.to_vec();
    order.shuffle(rng);
    order.chunks(batch).map(<[ItemRef]>::to_vec).collect()
}

/// Lays out every update of a run ahead of time. Curriculum-style modes get
/// one segment per stage; the baseline cycles through the aggregated
/// training set at a constant rate until it has made as many updates as the
/// curriculum would.
pub fn plan_updates(plan: &RunPlan, split: &CorpusSplit) -> Result<UpdatePlan> {
    plan.validate()?;
    for s in &plan.stages {
        if split.stage(s.stage).train.is_empty() {
            return Err(Error::invalid(format!("stage {} has an empty training partition", s.stage)));
        }
    }
    let mut rng = rng::stream(plan.seed, streams::BATCHES);
    let pool_of = |s: Stage| -> Vec<ItemRef> { (0..split.stage(s).train.len()).map(|i| (s, i)).collect() };

    if plan.mode == RunMode::Baseline {
        let total: usize =
            plan.stages.iter().map(|s| stage_updates(split.stage(s.stage).train.len(), s, &plan.optim)).sum();
        let pool: Vec<ItemRef> = plan.stages.iter().flat_map(|s| pool_of(s.stage)).collect();
        let batch = plan.optim.effective_batch(plan.optim.micro_batch);
        let mut updates = Vec::with_capacity(total);
        while updates.len() < total {
            for b in epoch_batches(&pool, batch, &mut rng) {
                if updates.len() == total {
                    break;
                }
                updates.push(PlannedUpdate { lr: plan.baseline_lr, batch: b });
            }
        }
        return Ok(UpdatePlan { segments: vec![Segment { stage: None, updates }] });
    }

    let mut segments = Vec::new();
    for spec in plan.stage_order() {
        let pool = pool_of(spec.stage);
        let batch = plan.optim.effective_batch(spec.micro_batch);
        let mut batches = Vec::new();
        for _ in 0..spec.epochs {
            batches.extend(epoch_batches(&pool, batch, &mut rng));
        }
        let rates = segment_rates(batches.len(), plan.optim.warmup, spec.peak_lr)?;
        segments.push(Segment {
            stage: Some(spec.stage),
            updates: rates.into_iter().zip(batches).map(|(lr, batch)| PlannedUpdate { lr, batch }).collect(),
        });
    }
    Ok(UpdatePlan { segments })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: u64,
    pub stage: String,
    pub lr: f64,
    pub loss: f64,
    pub success: Option<f64>,
    pub step_rate: Option<f64>,
}

pub struct CheckpointEvent<'a> {
    pub step: u64,
    pub stage: Option<Stage>,
    pub stage_end: bool,
    pub params: &'a ModelParams,
    pub state: &'a OptimState,
}

/// Receives training progress; the run-directory writer implements it.
pub trait RunSink {
    fn on_update(&mut self, row: &MetricRow) -> Result<()>;
    fn on_checkpoint(&mut self, event: &CheckpointEvent<'_>) -> Result<()>;
}

pub struct NullSink;

impl RunSink for NullSink {
    fn on_update(&mut self, _row: &MetricRow) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _event: &CheckpointEvent<'_>) -> Result<()> {
        Ok(())
    }
}

pub struct EvalSpec<'a> {
    pub items: &'a [QAItem],
    pub max_new: usize,
}

/// Optimizer state observed at a segment boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct Boundary {
    pub step: u64,
    pub t_before: u64,
    pub t_after: u64,
    pub moments_zeroed: bool,
}

pub struct RunOutcome {
    pub params: ModelParams,
    pub state: OptimState,
    pub total_updates: u64,
    pub stage_order: Vec<Option<Stage>>,
    pub metrics: Vec<MetricRow>,
    pub boundaries: Vec<Boundary>,
}

/// Mean loss over the batch, gradients averaged, clipped, then one AdamW step.
fn apply_update(
    params: &mut ModelParams,
    state: &mut OptimState,
    batch: &[&LmExample],
    lr: f64,
    optim: &OptimConfig,
) -> Result<f64> {
    let sizes: Vec<usize> = params.trainable().iter().map(|t| t.len()).collect();
    let mut acc = GradAccumulator::zeros(&sizes);
    let w = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for ex in batch {
        let (l, g) = loss_and_grads(params, ex)?;
        loss += w * l;
        acc.add(&g, w);
    }
    clip_global_norm(&mut acc.grads, optim.clip_norm);
    adamw_step(&mut params.trainable_mut(), &acc.grads, state, lr, optim)?;
    Ok(loss)
}

fn encode_all(split: &CorpusSplit, tokenizer: &Tokenizer, max_len: usize) -> Result<[Vec<LmExample>; 4]> {
    let mut out: [Vec<LmExample>; 4] = Default::default();
    for s in Stage::ALL {
        for item in &split.stage(s).train {
            let ex = tokenizer
                .encode_example(item, max_len)
                .map_err(|e| Error::invalid(format!("item {:?}: {e}", item.id)))?;
            out[s.index()].push(ex);
        }
    }
    Ok(out)
}

/// Executes a plan from `params`, reporting to `sink`. Evaluation runs every
/// `eval_every` updates and after the last one; checkpoints every
/// `checkpoint_every` updates and at the end of every segment.
pub fn run_plan(
    plan: &RunPlan,
    mut params: ModelParams,
    split: &CorpusSplit,
    tokenizer: &Tokenizer,
    eval: Option<&EvalSpec<'_>>,
    sink: &mut dyn RunSink,
) -> Result<RunOutcome> {
    let updates = plan_updates(plan, split)?;
    let examples = encode_all(split, tokenizer, params.config.max_seq_len)?;
    let mut state = OptimState::for_params(&params.trainable());
    let total = updates.total_updates() as u64;
    let mut step = 0u64;
    let mut metrics = Vec::new();
    let mut boundaries = Vec::new();

    for (si, seg) in updates.segments.iter().enumerate() {
        if si > 0 {
            let t_before = state.t;
            if plan.mode == RunMode::ResetAtBoundaries {
                state.reset();
            }
            boundaries.push(Boundary { step, t_before, t_after: state.t, moments_zeroed: state.is_zero() });
        }
        let label = seg.stage.map_or("all", Stage::name).to_string();
        for (ui, up) in seg.updates.iter().enumerate() {
            let batch: Vec<&LmExample> = up.batch.iter().map(|&(s, i)| &examples[s.index()][i]).collect();
            let loss = apply_update(&mut params, &mut state, &batch, up.lr, &plan.optim)?;
            step += 1;
            let mut row = MetricRow { step, stage: label.clone(), lr: up.lr, loss, success: None, step_rate: None };
            if let Some(ev) = eval {
                if step.is_multiple_of(plan.eval_every) || step == total {
                    let out = evaluate(&params, tokenizer, ev.items, ev.max_new)?;
                    row.success = Some(out.success_rate);
                    row.step_rate = out.step_rate;
                }
            }
            log::debug!("step {step} stage {label} lr {:.3e} loss {loss:.4}", up.lr);
            sink.on_update(&row)?;
            metrics.push(row);
            let stage_end = ui + 1 == seg.updates.len();
            if step.is_multiple_of(plan.checkpoint_every) || stage_end {
                sink.on_checkpoint(&CheckpointEvent {
                    step,
                    stage: seg.stage,
                    stage_end,
                    params: &params,
                    state: &state,
                })?;
            }
        }
    }
    Ok(RunOutcome {
        params,
        state,
        total_updates: step,
        stage_order: updates.segments.iter().map(|s| s.stage).collect(),
        metrics,
        boundaries,
    })
}

/// Trains on one partition for `spec.epochs` epochs under a single cosine
/// schedule. Returns the per-update losses.
pub fn run_stage(
    params: &mut ModelParams,
    state: &mut OptimState,
    spec: &StageSpec,
    examples: &[LmExample],
    optim: &OptimConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(Error::invalid(format!("stage {} has no examples", spec.stage)));
    }
    let pool: Vec<ItemRef> = (0..examples.len()).map(|i| (spec.stage, i)).collect();
    let mut rng = rng::stream(seed, streams::BATCHES);
    let mut batches = Vec::new();
    for _ in 0..spec.epochs {
        batches.extend(epoch_batches(&pool, optim.effective_batch(spec.micro_batch), &mut rng));
    }
    let rates = segment_rates(batches.len(), optim.warmup, spec.peak_lr)?;
    let mut losses = Vec::with_capacity(batches.len());
    for (lr, b) in rates.into_iter().zip(batches) {
        let batch: Vec<&LmExample> = b.iter().map(|&(_, i)| &examples[i]).collect();
        losses.push(apply_update(params, state, &batch, lr, optim)?);
    }
    Ok(losses)
}
