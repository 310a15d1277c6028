use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cognilab::config::RunConfig;
use cognilab::pipeline;
use cognilab::trainer::RunMode;

/// Curriculum training and attention-head analysis for small transformers.
#[derive(Parser, Debug)]
#[command(name = "cognilab", version)]
struct Cli {
    /// TOML file whose keys override the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Built-in configuration: desk or tiny.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,

    /// Overrides the configured training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the run root.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ModeArg {
    /// curriculum, baseline, shuffled or reset_at_boundaries; defaults to train.mode.
    #[arg(long)]
    mode: Option<RunMode>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic four-tier corpus.
    GenData,
    /// Normalize the corpus and log rejected items.
    Clean,
    /// Assign curriculum stages with the complexity classifier.
    Label,
    /// Train the tokenizer and split every stage into train and validation.
    Split,
    /// Train one run.
    Train(ModeArg),
    /// Score a run's last checkpoint on the validation set.
    Eval(ModeArg),
    /// Saliency, specialization and archetype analysis over checkpoints.
    AnalyzeHeads(ModeArg),
    /// Attention-map statistics over the dumps.
    AnalyzeAttn(ModeArg),
    /// Hidden-state structure score over the dumps.
    AnalyzePca(ModeArg),
    /// Paired significance tests across seeds.
    Stats,
    /// Comparison tables and figures.
    Report,
}

fn config(cli: &Cli) -> cognilab::Result<RunConfig> {
    let mut cfg = RunConfig::preset(&cli.preset)?;
    if let Some(path) = &cli.config {
        cfg = cfg.overlay(&cognilab::io::read_string(path)?, path)?;
    }
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(dir) = &cli.run_dir {
        cfg.paths.run_root = Some(dir.clone());
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> cognilab::Result<String> {
    let cfg = config(cli)?;
    let mode = |m: &ModeArg| m.mode.unwrap_or(cfg.train.mode);
    match &cli.command {
        Command::GenData => pipeline::gen_data(&cfg),
        Command::Clean => pipeline::clean(&cfg),
        Command::Label => pipeline::label(&cfg),
        Command::Split => pipeline::split(&cfg),
        Command::Train(m) => pipeline::train(&cfg, mode(m)),
        Command::Eval(m) => pipeline::eval(&cfg, mode(m)),
        Command::AnalyzeHeads(m) => pipeline::analyze_heads(&cfg, mode(m)),
        Command::AnalyzeAttn(m) => pipeline::analyze_attn(&cfg, mode(m)),
        Command::AnalyzePca(m) => pipeline::analyze_pca(&cfg, mode(m)),
        Command::Stats => pipeline::stats(&cfg),
        Command::Report => pipeline::report(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("cognilab: {e}");
            ExitCode::FAILURE
        }
    }
}
