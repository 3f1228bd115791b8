use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use ntklab_cli::config::{self, Experiment, ExperimentConfig};

#[derive(Parser)]
#[command(name = "ntklab", version, about = "Run ntklab experiments from JSON configs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Experiment config (JSON).
    config: PathBuf,
    /// Override a config key, e.g. `--set train.beta=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = config::parse_override)]
    overrides: Vec<(String, String)>,
    /// Output directory; defaults to the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment named in the config.
    Run(RunArgs),
    /// Validate the config, print it resolved, and run the loss-assumption
    /// audit described by its `audit` section.
    Audit(RunArgs),
}

fn execute(args: RunArgs, audit: bool) -> Result<bool> {
    let mut cfg = ExperimentConfig::load(&args.config, &args.overrides)?;
    if audit {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        cfg.experiment = Experiment::AssumptionAudit;
        cfg.validate()?;
    }
    let out = args.out.unwrap_or_else(|| cfg.output_dir());
    let summary = ntklab_cli::run(&cfg, &out)?;
    for a in &summary.assertions {
        println!("{}", a.line());
    }
    for n in &summary.notes {
        println!("note: {n}");
    }
    println!("{}: {} -> {}", summary.experiment, if summary.passed { "PASS" } else { "FAIL" }, out.display());
    Ok(summary.passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => execute(a, false),
        Command::Audit(a) => execute(a, true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
