//! One module per experiment. Each `run` reads a validated config, writes
//! its CSV/JSON files into the run directory and returns its assertions.

pub mod audit;
pub mod brier;
pub mod ensemble_laplace;
pub mod prepost;
pub mod toy;
pub mod tracking;
pub mod width_sweep;

use nalgebra::DVector;
use ntklab::loss::{self, LossKind};
use ntklab::ode::OdeOptions;
use ntklab::stats;
use ntklab::train::{TrainOptions, TrainTrace, LOSS_INCREASE_TOL};
use ntklab::ArchSpec;

use crate::config::{ExperimentConfig, TrainConfig};
use crate::report::{Assertion, Outcome, RunDir};

pub fn arch(cfg: &ExperimentConfig, input_dim: usize, output_dim: usize, width: usize) -> ArchSpec {
    let a = &cfg.arch;
    ArchSpec::uniform(a.depth, width, input_dim, output_dim, a.sigma_w, a.sigma_b)
}

/// Log-spaced record times from `t_first` to `t_end`.
pub fn train_options(t: &TrainConfig) -> TrainOptions {
    TrainOptions {
        ode: OdeOptions {
            rtol: t.rtol,
            atol: t.atol,
            ..OdeOptions::default()
        },
        ..TrainOptions::geometric(t.t_first, t.t_end, t.records)
    }
}

/// `count` points spread evenly over `points` (first and last included).
pub fn spread(points: &[DVector<f64>], count: usize) -> Vec<DVector<f64>> {
    let m = points.len();
    match (m, count) {
        (0, _) | (_, 0) => Vec::new(),
        _ if count >= m => points.to_vec(),
        (_, 1) => vec![points[m / 2].clone()],
        _ => (0..count).map(|j| points[j * (m - 1) / (count - 1)].clone()).collect(),
    }
}

/// Class probabilities of one output vector; MSE outputs are returned as is.
/// Reference-class kinds list the reference class first.
pub fn probabilities(kind: LossKind, z: &[f64]) -> Vec<f64> {
    match kind {
        LossKind::Mse => z.to_vec(),
        LossKind::Ce => loss::softmax(z),
        LossKind::CeRef | LossKind::BrierRef => {
            let (p, p0) = loss::softmax_ref(z);
            std::iter::once(p0).chain(p).collect()
        }
    }
}

/// Median of `f` over runs.
pub fn median_of<T>(runs: &[T], f: impl Fn(&T) -> f64) -> f64 {
    stats::median(&runs.iter().map(f).collect::<Vec<_>>())
}

/// Monotone decrease of the training loss over all runs.
pub fn monotone_assertion(name: &str, traces: &[&TrainTrace]) -> Assertion {
    let worst = traces.iter().map(|t| t.max_loss_increase).fold(f64::NEG_INFINITY, f64::max);
    Assertion::at_most(
        name,
        worst,
        LOSS_INCREASE_TOL,
        format!("largest per-step increase of the regularized loss over {} runs", traces.len()),
    )
}

pub fn completed_assertion(name: &str, traces: &[&TrainTrace]) -> Assertion {
    let bad = traces.iter().filter(|t| t.status != ntklab::ode::OdeStatus::Completed).count();
    Assertion::holds(name, bad == 0, format!("{bad} of {} runs ended before t_end", traces.len()))
}

/// Writes one trace in the standard per-run schema under `traces/`.
pub fn write_trace(dir: &mut RunDir, name: &str, trace: &TrainTrace) -> anyhow::Result<()> {
    let file = dir.file(&format!("traces/{name}.csv"))?;
    trace.write_csv(file)?;
    Ok(())
}

pub fn run(cfg: &ExperimentConfig, dir: &mut RunDir, out: &mut Outcome) -> anyhow::Result<()> {
    use crate::config::Experiment::*;
    match cfg.experiment {
        ToyEnsemble => toy::run(cfg, dir, out),
        NtkPrepost => prepost::run(cfg, dir, out),
        NtkTracking => tracking::run(cfg, dir, out),
        WidthSweep => width_sweep::run(cfg, dir, out),
        EnsembleVsLaplace => ensemble_laplace::run(cfg, dir, out),
        BrierCounterexample => brier::run(cfg, dir, out),
        AssumptionAudit => audit::run(cfg, dir, out),
    }
}
