//! Toy ensemble: an ensemble of trained finite networks next to the
//! infinite-width ensemble obtained by pushing prior draws through `Φ⁻¹`.

use anyhow::{ensure, Result};
use nalgebra::DVector;
use ntklab::ensemble::{self, EnsembleSetup, EnsembleSummary, MapAnchor};
use ntklab::kernel::assemble_pack;
use ntklab::train::{train_flow, TrainProblem};
use ntklab::{par, stats, LossKind, LossSpec, NetSnapshot};

use super::{arch, completed_assertion, monotone_assertion, probabilities, spread, train_options};
use crate::config::ExperimentConfig;
use crate::inputs;
use crate::report::{Assertion, Outcome, RunDir};

/// Largest tolerated share of draws whose Newton solve failed.
pub const MAX_FAILURE_RATE: f64 = 0.01;

const QUANTILES: [f64; 3] = [0.05, 0.5, 0.95];

/// Writes per-(point, class) quantile bands of the class probabilities.
fn write_bands(dir: &mut RunDir, name: &str, kind: LossKind, test: &[DVector<f64>], outputs: &[DVector<f64>], k: usize) -> Result<()> {
    let mut w = dir.csv(name)?;
    w.write_record(["point", "x", "class", "mean", "q05", "q50", "q95"])?;
    let probs: Vec<Vec<Vec<f64>>> = outputs
        .iter()
        .map(|o| o.as_slice().chunks(k).map(|z| probabilities(kind, z)).collect())
        .collect();
    for (i, x) in test.iter().enumerate() {
        let classes = probs.first().map_or(0, |p| p[i].len());
        for c in 0..classes {
            let vals: Vec<f64> = probs.iter().map(|p| p[i][c]).collect();
            let mut row = vec![i.to_string(), x[0].to_string(), c.to_string(), stats::mean(&vals).to_string()];
            row.extend(QUANTILES.iter().map(|&q| stats::quantile(&vals, q).to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn run(cfg: &ExperimentConfig, dir: &mut RunDir, out: &mut Outcome) -> Result<()> {
    let inp = inputs::load(&cfg.data)?;
    ensure!(!inp.test.is_empty(), "empty test grid");
    if let Some(note) = &inp.substitution {
        out.notes.push(note.clone());
    }
    let spec = LossSpec::new(cfg.loss.kind, inp.targets(cfg.loss.smoothing)?)?;
    let k = spec.k();
    let arch = arch(cfg, inp.dim(), k, cfg.arch.width);
    let opts = train_options(&cfg.train);
    let problem = TrainProblem {
        spec: spec.clone(),
        train: inp.train.clone(),
        test: inp.test.clone(),
        probe: spread(&inp.test, 3),
        beta: cfg.train.beta,
        eta0: cfg.train.eta0,
    };

    let runs = par::map(&cfg.seeds, |_, &seed| -> Result<_> {
        let net = NetSnapshot::init(&arch, seed)?;
        Ok(train_flow(&net, &problem, &opts)?.trace)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let finite: Vec<DVector<f64>> = runs.iter().map(|t| t.test_outputs.last().expect("recorded").clone()).collect();
    write_bands(dir, "bands_finite.csv", spec.kind, &inp.test, &finite, k)?;

    let all: Vec<DVector<f64>> = inp.train.iter().chain(&inp.test).cloned().collect();
    let pack = assemble_pack(&arch, &all)?;
    let setup = EnsembleSetup::from_pack(&pack, inp.train.len(), spec.clone(), cfg.train.beta, cfg.train.eta0)?;
    let draws = ensemble::run_ensemble(&setup, cfg.ensemble.samples, cfg.ensemble.seed)?;
    let limit: Vec<DVector<f64>> = draws.predictions.iter().map(|(_, p)| p.clone()).collect();
    write_bands(dir, "bands_limit.csv", spec.kind, &inp.test, &limit, k)?;

    let anchor = MapAnchor::new(&setup.problem)?;
    let summary = EnsembleSummary::build(&setup, &anchor, &draws)?;
    dir.write_json("ensemble_summary.json", &summary.scalars())?;
    summary.write_csv(&draws, dir.file("ensemble_summary.csv")?)?;

    let traces: Vec<_> = runs.iter().collect();
    out.check(Assertion::below(
        "ensemble_failure_rate",
        draws.failure_rate(),
        MAX_FAILURE_RATE,
        format!("{} of {} draws failed", draws.failures.len(), cfg.ensemble.samples),
    ));
    out.check(monotone_assertion("finite_loss_monotone", &traces));
    out.check(completed_assertion("finite_runs_completed", &traces));
    out.check(Assertion::holds(
        "band_grids_match",
        finite.len() == cfg.seeds.len() && limit.iter().chain(&finite).all(|o| o.len() == inp.test.len() * k),
        format!("{} test points in both band files", inp.test.len()),
    ));
    out.metric("trace_sigma_ens", summary.scalars().trace_sigma_ens);
    out.metric("trace_sample_cov", summary.scalars().trace_cov_test);
    out.metric("ensemble_failures", draws.failures.len());
    Ok(())
}
