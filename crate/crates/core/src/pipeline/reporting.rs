use std::collections::BTreeMap;

use super::analysis::{attention_by_step, HeadsAnalysis};
use super::train::{read_metrics, thresholds_table};
use super::{cell, parse_cell, Layout, RunLayout};
use crate::config::{AnalysisConfig, RunConfig};
use crate::error::{Error, Result};
use crate::evaluation::{first_crossing, tail_mean};
use crate::geometry::{aggregate_groups, AttentionStats};
use crate::heads::{layer_distribution, speedup_pct, stage_counts, stage_retention, Archetype, SpecializationRecord};
use crate::io::write_atomic;
use crate::report::{bar_chart, fmt_opt, fmt_pct, line_chart, Series, Table};
use crate::stats::{paired_permutation_test, paired_t_test, StatTestResult, TestMethod};
use crate::trainer::RunMode;

struct RunMetrics {
    success: Vec<(u64, f64)>,
    step_rate: Vec<(u64, f64)>,
    loss: Vec<(u64, f64)>,
}

fn load_metrics(run: &RunLayout) -> Result<Option<RunMetrics>> {
    if !run.metrics().is_file() {
        return Ok(None);
    }
    let (success, step_rate, loss) = read_metrics(run)?;
    Ok(Some(RunMetrics { success, step_rate, loss }))
}

fn values(curve: &[(u64, f64)]) -> Vec<f64> {
    curve.iter().map(|p| p.1).collect()
}

fn method_name(r: &StatTestResult) -> String {
    match &r.method {
        TestMethod::PermutationExhaustive { patterns } => format!("exhaustive ({patterns})"),
        TestMethod::PermutationMonteCarlo { resamples } => format!("monte carlo ({resamples})"),
        TestMethod::TTest { df } => format!("t (df {df})"),
    }
}

/// Paired tests of curriculum against every other mode across the configured
/// seeds, on tail success and updates to the first threshold.
pub fn stats(cfg: &RunConfig) -> Result<String> {
    let layout = Layout::new(cfg);
    let a = &cfg.analysis;
    let threshold = a.thresholds.first().copied().unwrap_or(0.25);
    let crossing_name = format!("updates_to_{threshold}");

    let mut per_seed = Table::new(&["seed", "mode", "tail_success", crossing_name.as_str()]);
    let mut metric: BTreeMap<(RunMode, u64), (Option<f64>, Option<f64>)> = BTreeMap::new();
    for &seed in &a.seeds {
        for mode in RunMode::ALL {
            let Some(m) = load_metrics(&layout.run(mode, seed))? else {
                continue;
            };
            let tail = tail_mean(&values(&m.success), a.tail_checkpoints).map(|t| t.0);
            let cross = first_crossing(&m.success, threshold, a.smoothing_window).map(|s| s as f64);
            per_seed.push(&[seed.to_string(), mode.to_string(), cell(tail), cell(cross)])?;
            metric.insert((mode, seed), (tail, cross));
        }
    }
    if metric.is_empty() {
        return Err(Error::invalid(format!("no trained runs for seeds {:?} under {}", a.seeds, layout.root.display())));
    }

    let mut table = Table::new(&[
        "comparison",
        "metric",
        "pairs",
        "mean_curriculum",
        "mean_other",
        "permutation_p",
        "permutation_method",
        "t",
        "t_p",
    ]);
    let mut tested = 0;
    for other in [RunMode::Baseline, RunMode::Shuffled, RunMode::ResetAtBoundaries] {
        for (name, pick) in [("tail_success", 0usize), (crossing_name.as_str(), 1usize)] {
            let mut c = Vec::new();
            let mut o = Vec::new();
            for &seed in &a.seeds {
                let get = |mode| metric.get(&(mode, seed)).and_then(|m| if pick == 0 { m.0 } else { m.1 });
                if let (Some(x), Some(y)) = (get(RunMode::Curriculum), get(other)) {
                    c.push(x);
                    o.push(y);
                }
            }
            let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
            let perm = paired_permutation_test(&c, &o, a.resamples, cfg.seed).ok();
            let t = paired_t_test(&c, &o).ok();
            tested += usize::from(perm.is_some());
            table.push(&[
                format!("curriculum_vs_{other}"),
                name.to_string(),
                c.len().to_string(),
                fmt_opt(mean(&c), 4),
                fmt_opt(mean(&o), 4),
                fmt_opt(perm.as_ref().map(|r| r.p_value), 4),
                perm.as_ref().map_or("n/a".into(), method_name),
                fmt_opt(t.as_ref().map(|r| r.statistic), 3),
                fmt_opt(t.as_ref().map(|r| r.p_value), 4),
            ])?;
        }
    }
    let dir = layout.report();
    per_seed.write(&dir.join("seed_metrics.csv"))?;
    table.write(&dir.join("stats.csv"))?;
    Ok(format!("{tested} paired comparisons over {} runs", metric.len()))
}

fn structure_curve(run: &RunLayout) -> Result<Option<Vec<(u64, f64)>>> {
    let path = run.analysis().join("structure_score.csv");
    if !path.is_file() {
        return Ok(None);
    }
    let t = Table::read(&path)?;
    let mut out = Vec::new();
    for row in &t.rows {
        let step = parse_cell(&t, row, "step")?.unwrap_or_default() as u64;
        if let Some(s) = parse_cell(&t, row, "score")? {
            out.push((step, s));
        }
    }
    Ok(Some(out))
}

fn series(label: &str, curve: &[(u64, f64)]) -> Series {
    Series { label: label.to_string(), points: curve.iter().map(|&(s, v)| (s as f64, v)).collect() }
}

struct Report {
    dir: std::path::PathBuf,
    written: Vec<String>,
    skipped: Vec<String>,
}

impl Report {
    fn table(&mut self, name: &str, t: &Table) -> Result<()> {
        t.write(&self.dir.join(format!("{name}.csv")))?;
        self.written.push(format!("{name}.csv"));
        Ok(())
    }

    fn figure(&mut self, name: &str, svg: &str) -> Result<()> {
        write_atomic(&self.dir.join(format!("{name}.svg")), svg.as_bytes())?;
        self.written.push(format!("{name}.svg"));
        Ok(())
    }

    fn skip(&mut self, name: &str, why: &str) {
        self.skipped.push(format!("{name} ({why})"));
    }
}

/// Tables and figures comparing the runs of the configured seed.
pub fn report(cfg: &RunConfig) -> Result<String> {
    let layout = Layout::new(cfg);
    let runs: Vec<(RunMode, RunLayout)> =
        RunMode::ALL.into_iter().map(|m| (m, layout.run(m, cfg.seed))).filter(|(_, r)| r.metrics().is_file()).collect();
    if runs.is_empty() {
        return Err(Error::invalid(format!(
            "no trained runs for seed {} under {}; run `train` first",
            cfg.seed,
            layout.root.display()
        )));
    }
    let find = |mode: RunMode| runs.iter().find(|(m, _)| *m == mode).map(|(_, r)| r);
    let mut rep = Report { dir: layout.report(), written: Vec::new(), skipped: Vec::new() };
    let a = &cfg.analysis;

    let mut behaviour =
        Table::new(&["mode", "updates", "final_loss", "final_success", "tail_success", "final_step_rate"]);
    let mut success_series = Vec::new();
    let mut loss_series = Vec::new();
    for (mode, run) in &runs {
        let m = load_metrics(run)?.expect("filtered on metrics");
        behaviour.push(&[
            mode.to_string(),
            m.loss.last().map_or(0, |p| p.0).to_string(),
            fmt_opt(m.loss.last().map(|p| p.1), 4),
            fmt_opt(m.success.last().map(|p| p.1), 4),
            fmt_opt(tail_mean(&values(&m.success), a.tail_checkpoints).map(|t| t.0), 4),
            fmt_opt(m.step_rate.last().map(|p| p.1), 4),
        ])?;
        success_series.push(series(mode.name(), &m.success));
        loss_series.push(series(mode.name(), &m.loss));
    }
    rep.table("behaviour", &behaviour)?;
    rep.figure("success", &line_chart("Validation success", "update", "success rate", &success_series))?;
    rep.figure("loss", &line_chart("Training loss", "update", "loss", &loss_series))?;

    match (find(RunMode::Baseline), find(RunMode::Curriculum)) {
        (Some(b), Some(c)) => {
            let t = thresholds_table(cfg, b, c)?;
            rep.table("thresholds", &t)?;
        }
        _ => rep.skip("thresholds", "needs baseline and curriculum runs"),
    }

    let heads: Vec<(RunMode, HeadsAnalysis)> = runs
        .iter()
        .filter(|(_, r)| HeadsAnalysis::path(r).is_file())
        .map(|(m, r)| HeadsAnalysis::load(r).map(|h| (*m, h)))
        .collect::<Result<_>>()?;
    if heads.is_empty() {
        rep.skip("head tables", "run `analyze-heads` first");
    } else {
        heads_tables(cfg, &heads, &mut rep)?;
    }

    let attn: Vec<(RunMode, u64, Vec<Vec<AttentionStats>>)> = runs
        .iter()
        .filter_map(|(m, r)| match attention_by_step(r) {
            Ok(mut v) => v.pop().map(|(s, st)| Ok((*m, s, st))),
            Err(e) => Some(Err(e)),
        })
        .collect::<Result<_>>()?;
    let base = attn.iter().find(|x| x.0 == RunMode::Baseline);
    let curr = attn.iter().find(|x| x.0 == RunMode::Curriculum);
    if let (Some(b), Some(c)) = (base, curr) {
        let n_layers = b.2.len();
        let groups = AnalysisConfig::groups(a.attn_groups, n_layers);
        let rows = aggregate_groups(&b.2, &c.2, &groups);
        let mut t = Table::new(&["group", "statistic", "baseline", "curriculum", "delta", "ratio", "pct_change"]);
        for r in &rows {
            t.push(&[
                r.group.clone(),
                r.statistic.clone(),
                fmt_opt(r.baseline, 4),
                fmt_opt(r.curriculum, 4),
                fmt_pct(r.delta, 4),
                fmt_opt(r.ratio, 4),
                fmt_pct(r.pct_change, 1),
            ])?;
        }
        rep.table("attention_groups", &t)?;
        let shown: Vec<_> = rows.iter().filter(|r| r.statistic == "gini" || r.statistic == "entropy").collect();
        let cats: Vec<String> = shown.iter().map(|r| format!("{} {}", r.group, r.statistic)).collect();
        let bars = vec![
            ("baseline".to_string(), shown.iter().map(|r| r.baseline.unwrap_or(0.0)).collect()),
            ("curriculum".to_string(), shown.iter().map(|r| r.curriculum.unwrap_or(0.0)).collect()),
        ];
        rep.figure("attention", &bar_chart("Attention concentration by layer group", "value", &cats, &bars))?;
    } else {
        rep.skip("attention_groups", "needs baseline and curriculum dumps");
    }

    let mut structure = Table::new(&["mode", "step", "score"]);
    let mut structure_series = Vec::new();
    let mut curves = BTreeMap::new();
    for (mode, run) in &runs {
        if let Some(curve) = structure_curve(run)? {
            for (s, v) in &curve {
                structure.push(&[mode.to_string(), s.to_string(), v.to_string()])?;
            }
            structure_series.push(series(mode.name(), &curve));
            curves.insert(*mode, curve);
        }
    }
    if curves.is_empty() {
        rep.skip("structure", "run `analyze-pca` first");
    } else {
        rep.table("structure", &structure)?;
        rep.figure(
            "structure",
            &line_chart("Representation structure", "update", "top-k variance", &structure_series),
        )?;
        if let (Some(b), Some(c)) = (curves.get(&RunMode::Baseline), curves.get(&RunMode::Curriculum)) {
            let common: BTreeMap<u64, f64> = b.iter().copied().collect();
            let (cs, bs): (Vec<f64>, Vec<f64>) =
                c.iter().filter_map(|(s, v)| common.get(s).map(|bv| (*v, *bv))).unzip();
            let t = paired_t_test(&cs, &bs).ok();
            let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
            let mut tt = Table::new(&["pairs", "mean_baseline", "mean_curriculum", "t", "p"]);
            tt.push(&[
                cs.len().to_string(),
                fmt_opt(mean(&bs), 4),
                fmt_opt(mean(&cs), 4),
                fmt_opt(t.as_ref().map(|r| r.statistic), 3),
                fmt_opt(t.as_ref().map(|r| r.p_value), 4),
            ])?;
            rep.table("structure_test", &tt)?;
        }
    }

    let mut summary = format!("wrote {} files to {}", rep.written.len(), rep.dir.display());
    if !rep.skipped.is_empty() {
        summary.push_str(&format!("; skipped {}", rep.skipped.join(", ")));
    }
    Ok(summary)
}

fn heads_tables(cfg: &RunConfig, heads: &[(RunMode, HeadsAnalysis)], rep: &mut Report) -> Result<()> {
    let mut specialized = Table::new(&[
        "mode",
        "checkpoints",
        "live_final",
        "early",
        "late",
        "early_late",
        "threshold_final",
        "mean_live",
    ]);
    let mut counts = Table::new(&["mode", "stage", "checkpoints", "live_last", "unique_union", "instance_count"]);
    let mut retention = Table::new(&["mode", "from", "to", "retained", "pct"]);
    for (mode, h) in heads {
        let Some(last) = h.checkpoints.last() else {
            continue;
        };
        let groups = AnalysisConfig::groups(cfg.analysis.heads_groups, h.n_layers);
        let early = groups.groups.first().map(|g| g.1.clone()).unwrap_or(0..0);
        let late = groups.groups.last().map(|g| g.1.clone()).unwrap_or(0..0);
        let d = layer_distribution(&last.record(), h.n_layers, early, late)?;
        let mean_live = h.checkpoints.iter().map(|c| c.live.len()).sum::<usize>() as f64 / h.checkpoints.len() as f64;
        specialized.push(&[
            mode.to_string(),
            h.checkpoints.len().to_string(),
            last.live.len().to_string(),
            d.early.to_string(),
            d.late.to_string(),
            d.ratio_label(),
            format!("{:.4e}", last.threshold),
            format!("{mean_live:.2}"),
        ])?;
        let segments = h.segments();
        for seg in &segments {
            let records: Vec<SpecializationRecord> = seg.iter().map(|c| c.record()).collect();
            let c = stage_counts(&records)?;
            counts.push(&[
                mode.to_string(),
                seg[0].stage_label().to_string(),
                seg.len().to_string(),
                c.live_last.to_string(),
                c.unique_union.to_string(),
                c.instance_count.to_string(),
            ])?;
        }
        for pair in segments.windows(2) {
            let (src, dst) = (pair[0].last().expect("nonempty"), pair[1].last().expect("nonempty"));
            let r = stage_retention(&src.live, &dst.live);
            retention.push(&[
                mode.to_string(),
                src.stage_label().to_string(),
                dst.stage_label().to_string(),
                r.to_string(),
                fmt_opt(r.pct, 1),
            ])?;
        }
    }
    rep.table("specialized_heads", &specialized)?;
    rep.table("stage_counts", &counts)?;
    rep.table("retention", &retention)?;

    let curves: BTreeMap<RunMode, _> =
        heads.iter().map(|(m, h)| h.emergence().map(|c| (*m, c))).collect::<Result<_>>()?;
    let mut emergence_series = Vec::new();
    for (mode, cs) in &curves {
        for c in cs {
            emergence_series.push(Series {
                label: format!("{mode} {}", c.archetype.name()),
                points: c.steps.iter().zip(&c.counts).map(|(&s, &n)| (s as f64, n as f64)).collect(),
            });
        }
    }
    rep.figure("emergence", &line_chart("Head emergence", "update", "distinct heads", &emergence_series))?;
    if let (Some(b), Some(c)) = (curves.get(&RunMode::Baseline), curves.get(&RunMode::Curriculum)) {
        let mut t = Table::new(&[
            "archetype",
            "baseline_auc",
            "curriculum_auc",
            "speedup_pct",
            "baseline_final",
            "curriculum_final",
        ]);
        for arch in Archetype::ALL {
            let bc = b.iter().find(|x| x.archetype == arch).expect("every archetype");
            let cc = c.iter().find(|x| x.archetype == arch).expect("every archetype");
            t.push(&[
                arch.name().to_string(),
                bc.auc.to_string(),
                cc.auc.to_string(),
                fmt_pct(speedup_pct(bc.auc, cc.auc), 1),
                bc.counts.last().copied().unwrap_or(0).to_string(),
                cc.counts.last().copied().unwrap_or(0).to_string(),
            ])?;
        }
        rep.table("emergence", &t)?;
    } else {
        rep.skip("emergence", "needs baseline and curriculum head analyses");
    }
    Ok(())
}
