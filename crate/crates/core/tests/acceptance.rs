//! Acceptance suite: one PASS/FAIL line per criterion. Criterion 11 is
//! reported but does not gate the exit status.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use cognilab::config::RunConfig;
use cognilab::corpus::{generate_synthetic, stratified_split, train_tokenizer, QAItem, Stage, Tokenizer};
use cognilab::error::Error;
use cognilab::evaluation::{evaluate, first_crossing, step_rate};
use cognilab::geometry::{entropy, gini, local_focus, mean_distance, pca_structure_score};
use cognilab::heads::{head_saliency, speedup_pct, stage_retention, HeadId};
use cognilab::io::{
    load_checkpoint, load_dump, load_dump_meta, load_hidden, save_checkpoint, save_dump, save_hidden, CheckpointInfo,
    DumpMeta, HEADER_LEN,
};
use cognilab::model::{forward, init_params, loss_and_grads, sequence_loss, LmExample, ModelConfig, ModelParams};
use cognilab::pipeline::{self, interleaved_val, load_split, Layout};
use cognilab::report::{fmt_pct, pct_change};
use cognilab::stats::{paired_permutation_test, paired_permutation_test_sampled, paired_t_test};
use cognilab::tensor::Tensor;
use cognilab::trainer::{adamw_step, plan_updates, run_plan, EvalSpec, NullSink, OptimConfig, OptimState, RunMode};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Default)]
struct Check {
    failures: Vec<String>,
    notes: Vec<String>,
}

impl Check {
    fn expect(&mut self, ok: bool, what: impl Into<String>) {
        let what = what.into();
        if ok {
            self.notes.push(what);
        } else {
            self.failures.push(what);
        }
    }

    fn note(&mut self, what: impl Into<String>) {
        self.notes.push(what.into());
    }

    fn within(&mut self, start: Instant, limit: Duration) {
        let took = start.elapsed();
        self.expect(took < limit, format!("runtime {:.2?} (limit {:.0?})", took, limit));
    }
}

type Outcome = Result<Check, Error>;
type Crossing = (Option<u64>, u64);
type Criterion = (&'static str, bool, Box<dyn Fn() -> Outcome>);

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn heads(n: usize) -> impl Iterator<Item = HeadId> {
    (0..n).map(|i| HeadId::new(i / 12, i % 12))
}

fn report_math() -> Outcome {
    let start = Instant::now();
    let mut c = Check::default();
    for (base, curr, printed) in [(37870.0, 37562.0, 0.8), (4381.0, 12668.0, -189.1), (13021.0, 19137.0, -47.0)] {
        let got = speedup_pct(base, curr).expect("nonzero area");
        c.expect(
            (got - printed).abs() <= 0.05,
            format!("speed-up {base}->{curr} = {got:+.3}% vs {printed:+.1}% (±0.05)"),
        );
    }
    let source: BTreeSet<HeadId> = heads(378).collect();
    let dest: BTreeSet<HeadId> = heads(374).collect();
    let r = stage_retention(&source, &dest).to_string();
    c.expect(r == "374 / 378 (98.9%)", format!("retention {r}"));
    let shift = fmt_pct(pct_change(0.32, 0.21), 1);
    c.expect(shift == "-31.8", format!("0.32->0.21 = {shift}% vs -31.8%"));
    let ent = fmt_pct(pct_change(1.054, 1.076), 2);
    c.expect(ent == "+2.04", format!("1.054->1.076 = {ent}% vs +2.04%"));
    c.within(start, Duration::from_secs(1));
    Ok(c)
}

fn analytic_metrics() -> Outcome {
    let start = Instant::now();
    let mut c = Check::default();
    let mut worst: f64 = 0.0;
    for n in [1usize, 2, 3, 7, 16, 64, 129] {
        let uniform = vec![1.0 / n as f64; n];
        let mut one_hot = vec![0.0; n];
        one_hot[n / 2] = 1.0;
        worst = worst.max(gini(&uniform)?.abs());
        worst = worst.max((gini(&one_hot)? - (n as f64 - 1.0) / n as f64).abs());
        worst = worst.max(entropy(&one_hot)?.abs());
        worst = worst.max((entropy(&uniform)? - (n as f64).ln()).abs());
        let mut identity = vec![0.0; n * n];
        for i in 0..n {
            identity[i * n + i] = 1.0;
        }
        worst = worst.max((local_focus(&identity, n, 2)? - 1.0).abs());
        worst = worst.max(mean_distance(&identity, n)?.abs());
    }
    c.expect(worst <= 1e-12, format!("max deviation {worst:.2e} over n in 1..=129"));
    c.within(start, Duration::from_secs(1));
    Ok(c)
}

fn basic_example(tok: &Tokenizer, max_len: usize, i: usize) -> cognilab::Result<LmExample> {
    let items = generate_synthetic(Stage::Basic, i + 1, 11);
    tok.encode_example(&items[i], max_len)
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut c = Check::default();
    let cfg = ModelConfig { n_layers: 2, seed: 5, ..ModelConfig::default() };
    let params = init_params(&cfg)?;
    let tok = Tokenizer::bytes_only();
    let ex = basic_example(&tok, cfg.max_seq_len, 0)?;
    let (_, grads) = loss_and_grads(&params, &ex)?;
    let names = params.trainable_names();

    let mut pick = rng(3);
    let mut coords = Vec::new();
    let mut flat = Vec::new();
    for (ti, g) in grads.iter().enumerate() {
        let live: Vec<usize> = (0..g.len()).filter(|&i| g[i].abs() > 1e-5).collect();
        if live.is_empty() {
            flat.push(names[ti].clone());
            continue;
        }
        let top = *live.iter().max_by(|&&a, &&b| g[a].abs().total_cmp(&g[b].abs())).expect("nonempty");
        coords.push((ti, top));
        let rest: Vec<usize> = live.into_iter().filter(|&i| i != top).collect();
        coords.extend(rest.choose_multiple(&mut pick, 2).map(|&i| (ti, i)));
    }
    let key_bias = names
        .iter()
        .zip(&grads)
        .filter(|(n, _)| n.ends_with("b_key"))
        .flat_map(|(_, g)| g.iter())
        .fold(0.0f64, |m, x| m.max(x.abs()));
    c.note(format!("no live gradient in {flat:?}; max |dL/db_key| {key_bias:.1e}"));

    let h = 1e-5;
    let mut worst = (0.0, String::new());
    for &(ti, i) in &coords {
        let mut p = params.clone();
        let original = p.trainable()[ti].data()[i];
        p.trainable_mut()[ti].data_mut()[i] = original + h;
        let up = sequence_loss(&p, &ex)?;
        p.trainable_mut()[ti].data_mut()[i] = original - h;
        let down = sequence_loss(&p, &ex)?;
        let numeric = (up - down) / (2.0 * h);
        let e = rel_err(grads[ti][i], numeric);
        if e > worst.0 {
            worst = (e, format!("{}[{i}]", names[ti]));
        }
    }
    c.expect(coords.len() >= 50, format!("{} coordinates over {} tensors", coords.len(), names.len()));
    c.expect(worst.0 < 1e-4, format!("max relative error {:.2e} at {}", worst.0, worst.1));
    c.within(start, Duration::from_secs(30));
    Ok(c)
}

fn gate_fd(params: &ModelParams, probe: &[LmExample], idx: usize, h: f64) -> cognilab::Result<f64> {
    let mut total = 0.0;
    for ex in probe {
        let mut p = params.clone();
        p.gates.data_mut()[idx] = 1.0 + h;
        let up = sequence_loss(&p, ex)?;
        p.gates.data_mut()[idx] = 1.0 - h;
        let down = sequence_loss(&p, ex)?;
        total += ((up - down) / (2.0 * h)).abs();
    }
    Ok(total / probe.len() as f64)
}

fn saliency_oracle() -> Outcome {
    let mut c = Check::default();
    let cfg = ModelConfig { n_layers: 2, n_heads: 4, d_model: 64, vocab_size: 320, max_seq_len: 128, seed: 9 };
    let mut params = init_params(&cfg)?;
    let tok = Tokenizer::bytes_only();
    let probe: Vec<LmExample> = (0..3).map(|i| basic_example(&tok, cfg.max_seq_len, i)).collect::<Result<_, _>>()?;

    let map = head_saliency(&params, &probe, "oracle", 0)?;
    let mut worst: f64 = 0.0;
    for idx in 0..cfg.n_layers * cfg.n_heads {
        worst = worst.max(rel_err(map.values[idx], gate_fd(&params, &probe, idx, 1e-5)?));
    }
    c.expect(worst < 1e-4, format!("max relative error vs gate differences {worst:.2e}"));

    let dh = cfg.d_model / cfg.n_heads;
    let d = cfg.d_model;
    params.blocks[1].w_out.data_mut()[dh * d..2 * dh * d].fill(0.0);
    let dead = head_saliency(&params, &probe, "oracle", 0)?.get(HeadId::new(1, 1));
    c.expect(dead == 0.0, format!("dead-path head (1,1) saliency {dead:e}"));
    Ok(c)
}

fn half_gamma(m: u32) -> f64 {
    match m {
        1 => std::f64::consts::PI.sqrt(),
        2 => 1.0,
        _ => (m as f64 / 2.0 - 1.0) * half_gamma(m - 2),
    }
}

/// Two-sided Student t tail by Simpson's rule on the density.
fn t_tail_quadrature(t: f64, df: u32) -> f64 {
    let nu = df as f64;
    let norm = half_gamma(df + 1) / ((nu * std::f64::consts::PI).sqrt() * half_gamma(df));
    let pdf = |x: f64| norm * (1.0 + x * x / nu).powf(-(nu + 1.0) / 2.0);
    let steps = 200_000;
    let h = t.abs() / steps as f64;
    let mut s = pdf(0.0) + pdf(t.abs());
    for i in 1..steps {
        s += pdf(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    1.0 - 2.0 * s * h / 3.0
}

fn statistics_oracles() -> Outcome {
    let mut c = Check::default();
    let mut r = rng(21);
    let zeros = vec![0.0; 10];

    let mut worst: f64 = 0.0;
    for shift in [0.0, 0.3, 0.6, 1.0] {
        let a: Vec<f64> = normals(&mut r, 10).into_iter().map(|x| x + shift).collect();
        let exact = paired_permutation_test(&a, &zeros, 0, 0)?.p_value;
        let sampled = paired_permutation_test_sampled(&a, &zeros, 20_000, 4)?.p_value;
        worst = worst.max((exact - sampled).abs());
    }
    c.expect(worst <= 0.02, format!("exhaustive vs Monte Carlo max |Δp| {worst:.4} at n=10"));

    let p = paired_permutation_test(&[1.0, 1.0, 1.0], &[0.0; 3], 0, 0)?.p_value;
    c.expect(p == 0.25, format!("d=[1,1,1] exhaustive p = {p}"));

    let mut worst: f64 = 0.0;
    for n in [3usize, 5, 8, 12, 20, 31] {
        for shift in [0.0, 0.4, 1.5] {
            let a: Vec<f64> = normals(&mut r, n).into_iter().map(|x| x + shift).collect();
            let b = normals(&mut r, n);
            let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
            let mean = d.iter().sum::<f64>() / n as f64;
            let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let t = mean / (var / n as f64).sqrt();
            let got = paired_t_test(&a, &b)?.p_value;
            worst = worst.max((got - t_tail_quadrature(t, n as u32 - 1)).abs());
        }
    }
    c.expect(worst <= 1e-6, format!("t-test vs quadrature max |Δp| {worst:.2e}"));

    let trials = 10_000;
    let (mut perm_rejects, mut t_rejects) = (0usize, 0usize);
    for _ in 0..trials {
        let a = normals(&mut r, 10);
        let b = normals(&mut r, 10);
        perm_rejects += usize::from(paired_permutation_test(&a, &b, 0, 0)?.p_value <= 0.05);
        t_rejects += usize::from(paired_t_test(&a, &b)?.p_value <= 0.05);
    }
    for (name, k) in [("permutation", perm_rejects), ("t-test", t_rejects)] {
        let rate = k as f64 / trials as f64;
        c.expect((rate - 0.05).abs() <= 0.01, format!("{name} null rejection rate {rate:.4}"));
    }
    Ok(c)
}

fn svd_oracle(layer: &Tensor, k: usize) -> f64 {
    let (n, d) = (layer.shape()[0], layer.shape()[1]);
    let mut x = nalgebra::DMatrix::from_row_slice(n, d, layer.data());
    for j in 0..d {
        let mean = x.column(j).mean();
        x.column_mut(j).add_scalar_mut(-mean);
    }
    let mut var: Vec<f64> = x.singular_values().iter().map(|s| s * s).collect();
    var.sort_by(|a, b| b.total_cmp(a));
    var.iter().take(k).sum::<f64>() / var.iter().sum::<f64>()
}

fn random_layer(r: &mut ChaCha8Rng, n: usize, d: usize, rank: Option<usize>) -> Tensor {
    let data = match rank {
        None => (0..n * d)
            .map(|i| r.sample::<f64, _>(StandardNormal) * (1.0 + (i % d) as f64).recip().sqrt() * 3.0)
            .collect(),
        Some(k) => {
            let z = normals(r, n * k);
            let w = normals(r, k * d);
            let offset = normals(r, d);
            (0..n * d)
                .map(|i| {
                    let (row, col) = (i / d, i % d);
                    offset[col] + (0..k).map(|j| z[row * k + j] * w[j * d + col]).sum::<f64>()
                })
                .collect()
        }
    };
    Tensor::new(vec![n, d], data).expect("shape matches")
}

fn pca_oracle() -> Outcome {
    let mut c = Check::default();
    let mut r = rng(33);
    let layers = vec![random_layer(&mut r, 200, 64, None), random_layer(&mut r, 200, 64, Some(20))];
    let got = pca_structure_score(std::slice::from_ref(&layers), 200, 10, 0, 0)?.score;
    let want = layers.iter().map(|l| svd_oracle(l, 10)).sum::<f64>() / layers.len() as f64;
    c.expect((got - want).abs() <= 1e-6, format!("score {got:.9} vs SVD {want:.9}"));

    for rank in [1usize, 3, 10] {
        let layer = random_layer(&mut r, 200, 64, Some(rank));
        let s = pca_structure_score(&[vec![layer]], 200, 10, 0, 0)?.score;
        c.expect(s == 1.0, format!("rank {rank} scores {s}"));
    }
    Ok(c)
}

fn all_lists(alphabet: &[&'static str], max_len: usize) -> Vec<Vec<&'static str>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for l in &frontier {
            for &s in alphabet {
                let mut m: Vec<&str> = l.clone();
                m.push(s);
                next.push(m);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

fn is_subsequence(needle: &[&str], hay: &[&str]) -> bool {
    let mut it = hay.iter();
    needle.iter().all(|x| it.any(|y| y == x))
}

fn brute_step_rate(pred: &[&str], gold: &[&str]) -> f64 {
    let mut best = 0;
    for mask in 0u32..1 << pred.len() {
        let sub: Vec<&str> = (0..pred.len()).filter(|i| mask >> i & 1 == 1).map(|i| pred[i]).collect();
        if sub.len() > best && is_subsequence(&sub, gold) {
            best = sub.len();
        }
    }
    best as f64 / gold.len() as f64
}

fn step_rate_oracle() -> Outcome {
    let mut c = Check::default();
    let lists = all_lists(&["a + b = 4", "c = 7", "x - 2 = 5"], 6);
    let mut pairs = 0usize;
    let mut mismatches = 0usize;
    for gold in lists.iter().filter(|g| !g.is_empty()) {
        for pred in &lists {
            pairs += 1;
            if step_rate(pred, gold)? != brute_step_rate(pred, gold) {
                mismatches += 1;
            }
        }
    }
    c.expect(mismatches == 0, format!("{mismatches} mismatches over {pairs} pairs"));
    Ok(c)
}

fn config_in(root: &Path, mut cfg: RunConfig) -> RunConfig {
    cfg.paths.run_root = Some(root.to_path_buf());
    cfg
}

fn prepare_data(cfg: &RunConfig) -> cognilab::Result<()> {
    pipeline::gen_data(cfg)?;
    pipeline::clean(cfg)?;
    pipeline::label(cfg)?;
    pipeline::split(cfg)?;
    Ok(())
}

fn run_modes(cfg: &RunConfig, modes: &[RunMode]) -> cognilab::Result<()> {
    for &mode in modes {
        pipeline::train(cfg, mode)?;
        pipeline::eval(cfg, mode)?;
        pipeline::analyze_heads(cfg, mode)?;
        pipeline::analyze_attn(cfg, mode)?;
        pipeline::analyze_pca(cfg, mode)?;
    }
    Ok(())
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).expect("readable dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism_and_parity() -> Outcome {
    let mut c = Check::default();
    let modes = [RunMode::Curriculum, RunMode::Baseline];
    let dirs = [tempfile::tempdir().expect("tempdir"), tempfile::tempdir().expect("tempdir")];
    for d in &dirs {
        let cfg = config_in(d.path(), RunConfig::tiny());
        prepare_data(&cfg)?;
        run_modes(&cfg, &modes)?;
    }
    let (a, b) = (dirs[0].path(), dirs[1].path());
    let files = files_under(a);
    let differing: Vec<_> = files.iter().filter(|f| fs::read(a.join(f)).ok() != fs::read(b.join(f)).ok()).collect();
    c.expect(files == files_under(b), "both roots hold the same file set");
    let checkpoints = files.iter().filter(|f| f.to_string_lossy().contains("checkpoints")).count();
    c.expect(
        differing.is_empty() && checkpoints > 0,
        format!(
            "{} files ({checkpoints} under checkpoints) identical across roots; differing: {differing:?}",
            files.len()
        ),
    );

    for cfg in [RunConfig::tiny(), RunConfig::desk()] {
        let mut items = Vec::new();
        for s in Stage::ALL {
            items.extend(generate_synthetic(s, cfg.data.items_per_tier, cfg.data.seed));
        }
        let split = stratified_split(&items, cfg.data.val_frac, cfg.data.seed)?;
        let counts: Vec<usize> =
            [RunMode::Curriculum, RunMode::Baseline, RunMode::Shuffled, RunMode::ResetAtBoundaries]
                .iter()
                .map(|&m| plan_updates(&cfg.plan(m), &split).map(|p| p.total_updates()))
                .collect::<Result<_, _>>()?;
        c.expect(counts.iter().all(|&n| n == counts[0]), format!("{} items: updates per mode {counts:?}", items.len()));
    }

    let cfg = config_in(a, RunConfig::tiny());
    let (split, tok) = load_split(&Layout::new(&cfg))?;
    for mode in [RunMode::Curriculum, RunMode::ResetAtBoundaries] {
        let out = run_plan(&cfg.plan(mode), init_params(&cfg.model)?, &split, &tok, None, &mut NullSink)?;
        let ok = !out.boundaries.is_empty()
            && out.boundaries.iter().all(|b| match mode {
                RunMode::Curriculum => b.t_after == b.t_before && b.t_before == b.step && !b.moments_zeroed,
                _ => b.t_after == 0 && b.moments_zeroed,
            });
        c.expect(ok, format!("{mode}: {:?}", out.boundaries));
    }
    Ok(c)
}

fn overfit() -> Outcome {
    let mut c = Check::default();
    let items = generate_synthetic(Stage::Simple, 32, 17);
    let texts: Vec<String> = items.iter().map(|i| format!("{}\n{}", i.question, i.completion())).collect();
    let cfg = ModelConfig { seed: 1, ..ModelConfig::default() };
    let tok = train_tokenizer(&texts, cfg.vocab_size)?;
    let examples: Vec<LmExample> =
        items.iter().map(|i| tok.encode_example(i, cfg.max_seq_len)).collect::<Result<_, _>>()?;
    let mut params = init_params(&cfg)?;
    let optim = OptimConfig { weight_decay: 0.0, ..OptimConfig::default() };
    let mut state = OptimState::for_params(&params.trainable());
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut r = rng(2);
    let (batch, warmup, peak) = (8, 20, 2e-3);
    let mut updates = 0;
    let mut loss = f64::INFINITY;
    let mut success = 0.0;
    let mut first_low = None;
    'train: while updates < 2000 {
        order.shuffle(&mut r);
        for chunk in order.chunks(batch) {
            let mut sum: Option<Vec<Vec<f64>>> = None;
            for &i in chunk {
                let (_, g) = loss_and_grads(&params, &examples[i])?;
                match &mut sum {
                    None => sum = Some(g),
                    Some(s) => s.iter_mut().zip(&g).for_each(|(a, b)| a.iter_mut().zip(b).for_each(|(x, y)| *x += y)),
                }
            }
            let mut grads = sum.expect("nonempty batch");
            grads.iter_mut().flatten().for_each(|x| *x /= chunk.len() as f64);
            cognilab::trainer::clip_global_norm(&mut grads, optim.clip_norm);
            let lr = peak * ((updates + 1) as f64 / warmup as f64).min(1.0);
            adamw_step(&mut params.trainable_mut(), &grads, &mut state, lr, &optim)?;
            updates += 1;
            if updates % 20 != 0 {
                continue;
            }
            loss = examples.iter().map(|e| sequence_loss(&params, e)).sum::<cognilab::Result<f64>>()? / 32.0;
            if loss < 0.1 {
                first_low.get_or_insert(updates);
                success = evaluate(&params, &tok, &items, 32)?.success_rate;
                if success >= 0.95 {
                    break 'train;
                }
            }
            if updates >= 2000 {
                break 'train;
            }
        }
    }
    c.expect(
        loss < 0.1,
        format!("mean loss {loss:.4} after {updates} updates (limit 2000), first below 0.1 at {first_low:?}"),
    );
    c.expect(success >= 0.95, format!("greedy success {success:.3} on the 32 items"));
    Ok(c)
}

fn end_to_end(root: &Path) -> Outcome {
    let start = Instant::now();
    let mut c = Check::default();
    let mut cfg = config_in(root, RunConfig::desk());
    cfg.analysis.seeds = vec![0];
    prepare_data(&cfg)?;
    run_modes(&cfg, &[RunMode::Curriculum, RunMode::Baseline])?;
    pipeline::stats(&cfg)?;
    c.note(pipeline::report(&cfg)?);
    let figures =
        files_under(&Layout::new(&cfg).report()).iter().filter(|f| f.extension().is_some_and(|e| e == "svg")).count();
    c.expect(figures > 0, format!("{figures} figures in the report"));
    c.within(start, Duration::from_secs(15 * 60));
    Ok(c)
}

fn sample_maps(seed: u64) -> cognilab::Result<(ModelParams, Vec<usize>)> {
    let cfg = ModelConfig { seed, ..RunConfig::tiny().model };
    let tokens: Vec<usize> = (0..20).map(|i| 40 + (i * 7) % 60).collect();
    Ok((init_params(&cfg)?, tokens))
}

fn format_round_trips() -> Outcome {
    let mut c = Check::default();
    let dir = tempfile::tempdir().expect("tempdir");
    let d = dir.path();
    let (params, tokens) = sample_maps(4)?;
    let (_, bundle) = forward(&params, &tokens, true)?;
    let bundle = bundle.expect("capture requested");
    let meta = DumpMeta { prompt_id: "p0".into(), step: 12, tokenizer_hash: "abc".into() };

    let (attn, attn2) = (d.join("a.attn"), d.join("b.attn"));
    save_dump(&attn, &bundle.attention, &meta)?;
    save_dump(&attn2, &load_dump(&attn)?, &load_dump_meta(&attn)?)?;
    c.expect(fs::read(&attn).ok() == fs::read(&attn2).ok(), "attention dump re-saves byte-identically");
    let (hid, hid2) = (d.join("a.hid"), d.join("b.hid"));
    save_hidden(&hid, &bundle.hidden_states, &meta)?;
    save_hidden(&hid2, &load_hidden(&hid)?, &meta)?;
    c.expect(fs::read(&hid).ok() == fs::read(&hid2).ok(), "hidden dump re-saves byte-identically");

    let (ck1, ck2) = (d.join("ck1"), d.join("ck2"));
    let mut state = OptimState::for_params(&params.trainable());
    state.t = 7;
    for (i, m) in state.m.iter_mut().enumerate() {
        m.iter_mut().enumerate().for_each(|(j, x)| *x = (i * 31 + j) as f64 * 1e-3);
    }
    let info =
        CheckpointInfo { step: 7, mode: RunMode::Curriculum, stage: Some(Stage::Basic), stage_end: true, seed: 4 };
    save_checkpoint(&ck1, &params, &state, info)?;
    let loaded = load_checkpoint(&ck1)?;
    c.expect(loaded.params == params && loaded.state == state, "checkpoint loads the saved values");
    save_checkpoint(&ck2, &loaded.params, &loaded.state, info)?;
    for f in ["manifest.toml", "params.bin", "optim.bin"] {
        c.expect(fs::read(ck1.join(f)).ok() == fs::read(ck2.join(f)).ok(), format!("{f} re-saves byte-identically"));
    }

    let bytes = fs::read(&attn).expect("dump written");
    let bad = |name: &str, edit: &dyn Fn(&mut Vec<u8>)| -> PathBuf {
        let p = d.join(format!("{name}.attn"));
        let mut b = bytes.clone();
        edit(&mut b);
        fs::write(&p, b).expect("write malformed dump");
        fs::copy(attn.with_extension("toml"), p.with_extension("toml")).expect("copy sidecar");
        p
    };
    let magic = load_dump(&bad("magic", &|b| b[0] ^= 0xff));
    c.expect(matches!(magic, Err(Error::BadMagic { .. })), format!("bad magic -> {magic:?}"));
    let short = load_dump(&bad("short", &|b| b.truncate(b.len() - 4)));
    c.expect(matches!(short, Err(Error::SizeMismatch { .. })), format!("truncation -> {short:?}"));
    let skew = load_dump(&bad("skew", &|b| b[HEADER_LEN..HEADER_LEN + 4].copy_from_slice(&0.5f32.to_le_bytes())));
    c.expect(matches!(skew, Err(Error::NotStochastic { .. })), format!("non-stochastic row -> {skew:?}"));
    Ok(c)
}

/// Updates until smoothed success first reaches 0.25, per seed, for the
/// curriculum and shuffled orders.
fn direction(root: &Path) -> Outcome {
    let mut c = Check::default();
    let base = config_in(root, RunConfig::desk());
    let layout = Layout::new(&base);
    if !layout.split().is_file() {
        prepare_data(&base)?;
    }
    let (split, tok) = load_split(&layout)?;
    let items: Vec<QAItem> = interleaved_val(&split, &Stage::ALL, base.train.eval_items);
    let eval = EvalSpec { items: &items, max_new: base.train.max_new_tokens };
    let threshold = 0.25;
    let mut rows = Vec::new();
    for seed in 0..5u64 {
        let cfg = base.clone().with_seed(seed);
        let mut crossing = Vec::new();
        for mode in [RunMode::Curriculum, RunMode::Shuffled] {
            let out = run_plan(&cfg.plan(mode), init_params(&cfg.model)?, &split, &tok, Some(&eval), &mut NullSink)?;
            let curve: Vec<(u64, f64)> = out.metrics.iter().filter_map(|m| m.success.map(|s| (m.step, s))).collect();
            crossing.push((first_crossing(&curve, threshold, base.analysis.smoothing_window), out.total_updates));
        }
        rows.push((crossing[0], crossing[1]));
    }
    let censored = |(x, total): (Option<u64>, u64)| x.unwrap_or(total + 1) as f64;
    let cur: Vec<f64> = rows.iter().map(|r| censored(r.0)).collect();
    let shf: Vec<f64> = rows.iter().map(|r| censored(r.1)).collect();
    let reached = |pick: fn(&(Crossing, Crossing)) -> Option<u64>| rows.iter().filter(|r| pick(r).is_some()).count();
    let no_later = cur.iter().zip(&shf).filter(|(a, b)| a <= b).count();
    let informative = rows.iter().filter(|r| r.0 .0.is_some() || r.1 .0.is_some()).count();
    let p = paired_permutation_test(&cur, &shf, 0, 0)?.p_value;
    c.note(format!(
        "curriculum reached {threshold} in {}/5 seeds, shuffled in {}/5",
        reached(|r| r.0 .0),
        reached(|r| r.1 .0)
    ));
    c.note(format!("curriculum updates {cur:?} vs shuffled {shf:?} (unreached = total + 1)"));
    c.expect(informative > 0, format!("{informative}/5 seeds where either order reached {threshold}"));
    c.expect(no_later == 5, format!("curriculum no later in {no_later}/5 seeds, permutation p = {p:.4}"));
    Ok(c)
}

fn main() -> ExitCode {
    let e2e_root = tempfile::tempdir().expect("tempdir");
    let root = e2e_root.path().to_path_buf();
    let criteria: Vec<Criterion> = vec![
        ("1 report math", true, Box::new(report_math)),
        ("2 analytic metrics", true, Box::new(analytic_metrics)),
        ("3 gradient fidelity", true, Box::new(gradient_fidelity)),
        ("4 saliency oracle", true, Box::new(saliency_oracle)),
        ("5 statistics oracles", true, Box::new(statistics_oracles)),
        ("6 PCA oracle", true, Box::new(pca_oracle)),
        ("7 step-rate oracle", true, Box::new(step_rate_oracle)),
        ("8 determinism and parity", true, Box::new(determinism_and_parity)),
        ("9a overfit", true, Box::new(overfit)),
        (
            "9b end-to-end",
            true,
            Box::new({
                let root = root.clone();
                move || end_to_end(&root)
            }),
        ),
        ("10 format round trips", true, Box::new(format_round_trips)),
        ("11 direction (non-gating)", false, Box::new(move || direction(&root))),
    ];
    let only = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut gating_failures = 0;
    for (name, gating, run) in criteria {
        if only.as_deref().is_some_and(|o| !name.starts_with(o)) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match run() {
            Ok(c) => (c.failures.is_empty(), [c.failures, c.notes].concat().join("; ")),
            Err(e) => (false, format!("error: {e}")),
        };
        println!("{} criterion {name} [{:.1?}]: {detail}", if pass { "PASS" } else { "FAIL" }, start.elapsed());
        gating_failures += usize::from(gating && !pass);
    }
    if gating_failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
