use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use hqgae_cli::commands::{cmd_embed, cmd_eval, cmd_gen_sbm, cmd_train};
use hqgae_cli::config::{Overrides, RunConfig, SweepKind, Task};
use hqgae_cli::sweep::cmd_ablate;

#[derive(Parser, Debug)]
#[command(name = "hqgae", version, about = "Train and evaluate a hierarchical quantized graph autoencoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for model initialisation, sampling and probes
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Graph directory (meta.json, edges.tsv, features.tsv, labels.tsv)
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write model.ckpt and metrics.jsonl
    Train,
    /// Score a checkpoint on a downstream task
    Eval {
        #[arg(long, value_enum)]
        task: Option<Task>,
        /// Checkpoint to load (default: OUT/model.ckpt)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Export embeddings.tsv from a checkpoint
    Embed {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run an ablation sweep and write sweep.csv
    Ablate {
        #[arg(long, value_enum)]
        sweep: Option<SweepKind>,
        /// Grid points trained concurrently
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Write a stochastic block model graph to OUT
    GenSbm,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let mut o = Overrides {
        seed: cli.common.seed,
        out: cli.common.out.clone(),
        dataset: cli.common.dataset.clone(),
        ..Default::default()
    };
    match &cli.command {
        Command::Eval { task, .. } => o.task = *task,
        Command::Ablate { sweep, jobs } => {
            o.sweep = *sweep;
            o.jobs = *jobs;
        }
        _ => {}
    }
    cfg.apply(&o);
    match cli.command {
        Command::Train => cmd_train(&cfg),
        Command::Eval { checkpoint, .. } => {
            let r = cmd_eval(&cfg, checkpoint.as_deref())?;
            println!("{}", serde_json::to_string(&r)?);
            Ok(())
        }
        Command::Embed { checkpoint } => {
            let path = cmd_embed(&cfg, checkpoint.as_deref())?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Ablate { .. } => cmd_ablate(&cfg).map(|_| ()),
        Command::GenSbm => cmd_gen_sbm(&cfg),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            std::process::exit(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(hqgae_cli::exit_code(&e));
    }
}
