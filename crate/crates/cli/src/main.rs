use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use lpd::commands::{self, TrainOptions};
use lpd::config::RunConfig;

/// Few-shot relation extraction with label prompt dropout on synthetic data.
#[derive(Parser)]
#[command(name = "lpd", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config value, e.g. `--set train.alpha_train=0.4`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the knowledge graph, splits, corpora and vocabulary.
    Generate,
    /// Contrastive pre-training on the leakage-filtered corpus.
    Pretrain,
    /// Episodic training with label prompt dropout.
    Train {
        /// Initialise from this checkpoint (usually the pre-trained model).
        #[arg(long)]
        init: Option<PathBuf>,
        /// Continue an interrupted run from its saved state.
        #[arg(long, conflicts_with = "init")]
        resume: bool,
        /// Record every sampled episode and its prompt decisions.
        #[arg(long)]
        dump_episodes: bool,
    },
    /// N-way K-shot evaluation on the held-out relations.
    Evaluate {
        /// Checkpoint to evaluate; defaults to the trained model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the ablation table over the configured seeds.
    Ablate,
    /// 2-D projection of the two most confused evaluation relations.
    Project {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let base = match &common.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
        None => RunConfig::default(),
    };
    Ok(base.with_overrides(&common.overrides)?)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    if cli.common.print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    match cli.command {
        Command::Generate => {
            let m = commands::cmd_generate(&cfg)?;
            println!(
                "wrote {} ({} train / {} eval instances)",
                cfg.data_dir().display(),
                m.labels["train_instances"],
                m.labels["eval_instances"]
            );
        }
        Command::Pretrain => {
            let m = commands::cmd_pretrain(&cfg)?;
            println!(
                "wrote {} ({}, {} instances after filtering)",
                cfg.pretrain_dir().join("model.ckpt").display(),
                m.labels["variant"],
                m.labels["corpus_instances"]
            );
        }
        Command::Train {
            init,
            resume,
            dump_episodes,
        } => {
            let opts = TrainOptions {
                init,
                resume,
                dump_episodes,
            };
            let m = commands::cmd_train(&cfg, &opts)?;
            println!(
                "wrote {} after {} steps (final loss {})",
                cfg.train_dir().join("model.ckpt").display(),
                m.labels["steps"],
                m.labels["final_loss"]
            );
        }
        Command::Evaluate { checkpoint } => {
            let report = commands::cmd_evaluate(&cfg, checkpoint.as_deref())?;
            println!("{}", report.summary_line());
        }
        Command::Ablate => {
            for row in commands::cmd_ablate(&cfg)? {
                println!("{} {:.4} +/- {:.4} {}", row.row, row.mean, row.std, row.name);
            }
        }
        Command::Project { checkpoint } => {
            let s = commands::cmd_project(&cfg, checkpoint.as_deref())?;
            println!(
                "relations {} and {}: centroid distance {:.4}, mean spread {:.4}",
                s.relations.0, s.relations.1, s.support_centroid_distance, s.support_mean_spread
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
