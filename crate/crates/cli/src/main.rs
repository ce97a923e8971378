use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use domain_adapt::adapt::MethodVariant;
use domain_adapt_cli::{commands, ExperimentConfig};

#[derive(Parser)]
#[command(name = "domain-adapt", version, about = "Self-training domain adaptation experiments")]
struct Cli {
    #[arg(long, global = true, default_value = "experiment.toml")]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Count repeated detections of one box as false positives.
    #[arg(long, global = true)]
    voc_strict: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the detection and classification datasets
    GenData,
    /// Train the source detector
    TrainSource,
    /// Adapt the source detector to the target domain with one method
    Adapt {
        /// Defaults to the method in the config.
        #[arg(long)]
        method: Option<MethodVariant>,
    },
    /// Run all five methods and summarize them
    Compare,
    /// Run the classification experiment
    Classify,
    /// Evaluate a detector on the target eval split
    Eval {
        /// Defaults to the source model.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = ExperimentConfig::load(&cli.config)?.with_overrides(cli.seed, cli.out, cli.voc_strict);
    match cli.command {
        Command::GenData => commands::gen_data(&cfg)?,
        Command::TrainSource => {
            let best = commands::train_source_cmd(&cfg)?;
            println!("source eval: p {:.4} r {:.4} f1 {:.4}", best.precision, best.recall, best.f1);
        }
        Command::Adapt { method } => {
            let s = commands::adapt_cmd(&cfg, method)?;
            println!("{}", serde_json::to_string(&s)?);
        }
        Command::Compare => print!("{}", commands::summary_csv(&commands::compare_cmd(&cfg)?)),
        Command::Classify => {
            let r = commands::classify_cmd(&cfg)?;
            println!(
                "source_only {:.4} unsupervised {:.4} supervised {:.4}",
                r.source_only, r.unsupervised, r.supervised
            );
        }
        Command::Eval { weights } => {
            let s = commands::eval_cmd(&cfg, weights.as_deref())?;
            println!("{}", serde_json::to_string(&s)?);
        }
    }
    Ok(())
}
