//! Config-driven runner for the `ntklab` experiments.
//!
//! A run reads one JSON [`config::ExperimentConfig`], writes CSV and JSON
//! artifacts into its output directory and finishes with `summary.json`, the
//! pass/fail record of the experiment's assertions.

pub mod config;
pub mod experiments;
pub mod inputs;
pub mod report;

use std::path::Path;

use anyhow::Result;
use serde::Serialize;

use config::ExperimentConfig;
use report::{Outcome, RunDir, Summary};

/// Seed and platform record written next to every run.
#[derive(Debug, Serialize)]
struct Environment {
    package: &'static str,
    version: &'static str,
    os: &'static str,
    arch: &'static str,
    experiment: &'static str,
    seeds: Vec<u64>,
    ensemble_seed: u64,
}

impl Environment {
    fn capture(cfg: &ExperimentConfig) -> Self {
        Self {
            package: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            os: std::env::consts::OS,
            arch: std::env::consts::ARCH,
            experiment: cfg.experiment.name(),
            seeds: cfg.seeds.clone(),
            ensemble_seed: cfg.ensemble.seed,
        }
    }
}

/// Runs one experiment into `out_dir` and returns its summary.
pub fn run(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Summary> {
    cfg.validate()?;
    let mut dir = RunDir::create(out_dir)?;
    dir.write_json("config.resolved.json", cfg)?;
    dir.write_json("environment.json", &Environment::capture(cfg))?;
    let mut outcome = Outcome::default();
    experiments::run(cfg, &mut dir, &mut outcome)?;
    let mut files = dir.files().to_vec();
    files.push("summary.json".into());
    let summary = Summary {
        experiment: cfg.experiment.name().into(),
        passed: outcome.passed(),
        assertions: outcome.assertions,
        metrics: outcome.metrics,
        notes: outcome.notes,
        files,
    };
    dir.write_json("summary.json", &summary)?;
    Ok(summary)
}
