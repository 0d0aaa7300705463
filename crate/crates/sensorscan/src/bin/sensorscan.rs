//! Command-line front end for the fault detection and diagnosis pipeline.
//!
//! One invocation runs exactly one stage (or one composite command) against
//! the working directory named in the JSON config. Exit codes: 0 on success,
//! 1 for internal errors (I/O, serialization), 2 for invalid input (bad
//! config, bad data, incompatible artifacts), 3 when a prerequisite stage
//! has not been run yet.

use clap::{Args, Parser, Subcommand};
use sensorscan::eval::render_report;
use sensorscan::pipeline::{self, PipelineConfig};
use sensorscan::{util, Error, Result};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "sensorscan",
    version,
    about = "Unsupervised fault detection and diagnosis on multivariate sensor runs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Pipeline configuration file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Cap the number of worker threads (≥ 1).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Also score a classical baseline on the same splits.
    #[arg(long, value_parser = ["pca-kmeans"])]
    baseline: Option<String>,
    /// Run the whole pipeline under N consecutive seeds and report
    /// mean ± std instead of a single evaluation.
    #[arg(long)]
    seeds: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic runs and prepare the train/test dataset.
    Synth(CommonArgs),
    /// Ingest runs from the configured Run-CSV file and prepare the dataset.
    Ingest(CommonArgs),
    /// Pretrain the feature extractor with the self-supervised tasks.
    Pretrain(CommonArgs),
    /// Embed training windows and mine nearest neighbors.
    Mine(CommonArgs),
    /// Train the clustering head on the mined neighbors.
    Cluster(CommonArgs),
    /// Match clusters to process states using the training labels.
    Match(CommonArgs),
    /// Fine-tune the pretrained extractor on a few labeled runs.
    Finetune(CommonArgs),
    /// Score the clustered model on the test split and write reports.
    Evaluate(EvaluateArgs),
    /// Run the pipeline once per variant along the configured ablation axis.
    Ablate(CommonArgs),
    /// Re-render the stored evaluation report.
    Report(CommonArgs),
}

fn load(args: &CommonArgs) -> Result<PipelineConfig> {
    if let Some(jobs) = args.jobs {
        if jobs == 0 {
            return Err(Error::Validation("--jobs must be ≥ 1".into()));
        }
        util::set_jobs(jobs);
    }
    let mut cfg = pipeline::load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => pipeline::cmd_synth(&load(&a)?),
        Command::Ingest(a) => pipeline::cmd_ingest(&load(&a)?),
        Command::Pretrain(a) => pipeline::cmd_pretrain(&load(&a)?),
        Command::Mine(a) => pipeline::cmd_mine(&load(&a)?),
        Command::Cluster(a) => pipeline::cmd_cluster(&load(&a)?),
        Command::Match(a) => pipeline::cmd_match(&load(&a)?),
        Command::Finetune(a) => pipeline::cmd_finetune(&load(&a)?),
        Command::Evaluate(a) => {
            let cfg = load(&a.common)?;
            let baseline = a.baseline.is_some();
            match a.seeds {
                Some(n) => print!("{}", pipeline::evaluate_seeds(&cfg, n, baseline)?),
                None => {
                    let reports = pipeline::cmd_evaluate(&cfg, baseline)?;
                    print!("{}", render_report(&reports.unsupervised));
                    if reports.baseline.is_some() {
                        println!("\nbaseline report: {}",
                            cfg.workdir.join(pipeline::REPORT_BASELINE_TEXT_FILE).display());
                    }
                    if reports.finetuned.is_some() {
                        println!("\nfine-tuned report: {}",
                            cfg.workdir.join(pipeline::REPORT_FINETUNED_TEXT_FILE).display());
                    }
                }
            }
            Ok(())
        }
        Command::Ablate(a) => {
            print!("{}", pipeline::cmd_ablate(&load(&a)?)?);
            Ok(())
        }
        Command::Report(a) => {
            print!("{}", pipeline::cmd_report(&load(&a)?)?);
            Ok(())
        }
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::MissingArtifact(_) => 3,
        Error::Parse { .. }
        | Error::Validation(_)
        | Error::ShapeMismatch(_)
        | Error::IncompatibleArtifact(_) => 2,
        Error::Io { .. } | Error::Json(_) => 1,
    }
}

fn main() {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => {}
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(exit_code(&err));
        }
    }
}
