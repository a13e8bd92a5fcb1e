//! Command-line orchestration of the kgsel pipeline.

pub mod config;
pub mod manifest;
pub mod stages;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

use config::RunConfig;
use stages::{Runner, Stage, SweepKind};

#[derive(Parser, Debug)]
#[command(name = "kgsel", version, about = "Knowledge-graph candidate selection: KGE, policy, GRPO, probes, SMI")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct GlobalArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides run.out).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Base seed; every stage seed is derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Fixed-order reductions for bit-identical reruns.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Worker threads.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Rerun stages even when their outputs are current.
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Load or generate the dataset into the run directory.
    Ingest,
    /// Train the KGE retriever and report its link prediction and classification.
    TrainKge,
    /// Build training and held-out candidate-selection instances.
    BuildInstances,
    /// Supervised fine-tuning of the selection policy; writes the error set.
    Sft,
    /// GRPO on the SFT error set.
    Grpo,
    /// Extract policy hidden states for balanced train/valid/test triples.
    ExtractReps,
    /// Fit the PReLU probe on extracted states.
    TrainProbe,
    /// Retrieve-then-rerank link prediction.
    EvalLp,
    /// Probe triple classification.
    EvalTc,
    /// Task-adaptive mutual information of the probe projections.
    Smi,
    /// Probe accuracy per policy layer.
    LayerSweep,
    /// Seen/unseen strata under entity-disjoint splits.
    Inductive,
    /// Sweep the number of options, the retrieval size, or the negative tier.
    Sweep {
        #[arg(value_enum)]
        what: SweepArg,
    },
    /// Configuration utilities.
    Config {
        #[command(subcommand)]
        action: ConfigAction,
    },
    /// Every pipeline stage in order.
    Run,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum SweepArg {
    #[value(name = "k", alias = "K")]
    K,
    #[value(name = "n")]
    N,
    #[value(name = "tier")]
    Tier,
}

#[derive(Subcommand, Debug, Clone)]
pub enum ConfigAction {
    /// Print every key with its default and meaning.
    Reference,
    /// Print the effective configuration after file, flags and environment.
    Show,
}

/// Resolves the configuration from file, environment and flags.
pub fn resolve_config(g: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(g.config.as_deref())?;
    if let Some(out) = &g.out {
        cfg.run.out = out.clone();
    }
    if let Some(seed) = g.seed {
        cfg.reseed(seed);
    }
    if g.deterministic {
        cfg.run.deterministic = true;
    }
    if let Some(j) = g.jobs {
        cfg.run.jobs = j;
    }
    Ok(cfg)
}

fn stage_of(cmd: &Command) -> Option<Stage> {
    Some(match cmd {
        Command::Ingest => Stage::Ingest,
        Command::TrainKge => Stage::TrainKge,
        Command::BuildInstances => Stage::BuildInstances,
        Command::Sft => Stage::Sft,
        Command::Grpo => Stage::Grpo,
        Command::ExtractReps => Stage::ExtractReps,
        Command::TrainProbe => Stage::TrainProbe,
        Command::EvalLp => Stage::EvalLp,
        Command::EvalTc => Stage::EvalTc,
        Command::Smi => Stage::Smi,
        Command::LayerSweep => Stage::LayerSweep,
        Command::Inductive => Stage::Inductive,
        Command::Sweep { what } => Stage::Sweep(match what {
            SweepArg::K => SweepKind::K,
            SweepArg::N => SweepKind::N,
            SweepArg::Tier => SweepKind::Tier,
        }),
        Command::Config { .. } | Command::Run => return None,
    })
}

pub fn execute(cli: &Cli) -> Result<()> {
    if let Command::Config { action: ConfigAction::Reference } = cli.command {
        print!("{}", config::REFERENCE);
        return Ok(());
    }
    let cfg = resolve_config(&cli.global)?;
    if let Command::Config { action: ConfigAction::Show } = cli.command {
        print!("{}", toml::to_string(&cfg)?);
        return Ok(());
    }
    cfg.validate()?;
    if cfg.run.jobs > 0 {
        kgsel::par::init_threads(cfg.run.jobs);
    }
    let mut runner = Runner::new(cfg, cli.global.force)?;
    match stage_of(&cli.command) {
        Some(stage) => {
            let outcome = runner.run(stage)?;
            println!("{}: {:?}", stage.name(), outcome);
        }
        None => {
            for (stage, outcome) in runner.run_pipeline()? {
                println!("{}: {:?}", stage.name(), outcome);
            }
        }
    }
    Ok(())
}
