//! AdamW training over curriculum stages, the constant-rate baseline and the
//! two ablations.

mod optim;
mod run;

pub use optim::{adamw_step, clip_global_norm, global_norm, lr_at, GradAccumulator, OptimConfig, OptimState};
pub use run::{
    plan_updates, run_plan, run_stage, Boundary, CheckpointEvent, EvalSpec, ItemRef, MetricRow, NullSink,
    PlannedUpdate, RunMode, RunOutcome, RunPlan, RunSink, Segment, StageSpec, UpdatePlan,
};
