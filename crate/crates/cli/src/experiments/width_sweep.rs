//! Width sweep: linearization gap, Hessian operator norm and Jacobian norm
//! as the hidden width grows.

use anyhow::Result;
use ntklab::train::{train_flow, TrainProblem, TrainTrace};
use ntklab::{par, LossSpec, NetSnapshot};

use super::{arch, completed_assertion, median_of, monotone_assertion, spread, train_options};
use crate::config::ExperimentConfig;
use crate::inputs;
use crate::report::{Assertion, Outcome, RunDir};

/// Power iterations of the Hessian probe.
pub const HESSIAN_ITERS: usize = 40;
/// Minimum median ratio `gap(n)/gap(4n)`, also used for the Hessian probe.
pub const MIN_RATIO: f64 = 1.5;
/// Largest tolerated spread (max/min of medians) of the Jacobian norm.
pub const MAX_JACOBIAN_SPREAD: f64 = 1.5;

pub struct SweepRun {
    pub width: usize,
    pub seed: u64,
    pub trace: TrainTrace,
    pub hessian: f64,
    pub hessian_converged: bool,
    pub jacobian_norm: f64,
}

impl SweepRun {
    pub fn gap(&self) -> f64 {
        self.trace.max_lin_gap()
    }

    /// Whether the centered gap stays below the plain one at every record.
    pub fn centered_contracts(&self) -> bool {
        self.trace.centered_gap.iter().zip(&self.trace.lin_gap).all(|(c, g)| *c <= *g * (1.0 + 1e-12))
    }
}

pub fn train_all(cfg: &ExperimentConfig) -> Result<Vec<SweepRun>> {
    let inp = inputs::load(&cfg.data)?;
    let spec = LossSpec::new(cfg.loss.kind, inp.targets(cfg.loss.smoothing)?)?;
    let test = if inp.test.is_empty() { inp.train.clone() } else { inp.test.clone() };
    let problem = TrainProblem {
        spec: spec.clone(),
        train: inp.train.clone(),
        probe: spread(&test, 1),
        test,
        beta: cfg.train.beta,
        eta0: cfg.train.eta0,
    };
    let x = problem.probe[0].clone();
    let opts = train_options(&cfg.train);
    let jobs: Vec<(usize, u64)> = cfg.widths.iter().flat_map(|&w| cfg.seeds.iter().map(move |&s| (w, s))).collect();
    par::map(&jobs, |_, &(width, seed)| -> Result<SweepRun> {
        let net = NetSnapshot::init(&arch(cfg, inp.dim(), spec.k(), width), seed)?;
        let h = net.hessian_opnorm_probe(&x, HESSIAN_ITERS, seed)?;
        Ok(SweepRun {
            width,
            seed,
            hessian: h.estimate,
            hessian_converged: h.converged,
            jacobian_norm: net.jacobian_norm(&x)?,
            trace: train_flow(&net, &problem, &opts)?.trace,
        })
    })
    .into_iter()
    .collect()
}

/// Median over seeds of `f(n)/f(4n)` for seeds present at both widths.
pub fn median_ratio(runs: &[SweepRun], n: usize, f: impl Fn(&SweepRun) -> f64) -> f64 {
    let ratios: Vec<f64> = runs
        .iter()
        .filter(|r| r.width == n)
        .filter_map(|a| runs.iter().find(|b| b.width == 4 * n && b.seed == a.seed).map(|b| f(a) / f(b)))
        .collect();
    ntklab::stats::median(&ratios)
}

pub fn run(cfg: &ExperimentConfig, dir: &mut RunDir, out: &mut Outcome) -> Result<()> {
    let runs = train_all(cfg)?;
    let mut w = dir.csv("width_sweep.csv")?;
    w.write_record([
        "width",
        "seed",
        "sup_lin_gap",
        "sup_centered_gap",
        "hessian_probe",
        "hessian_converged",
        "jacobian_norm",
        "max_loss_increase",
    ])?;
    for r in &runs {
        w.serialize((
            r.width,
            r.seed,
            r.gap(),
            r.trace.max_centered_gap(),
            r.hessian,
            r.hessian_converged,
            r.jacobian_norm,
            r.trace.max_loss_increase,
        ))?;
    }
    w.flush()?;
    let mut w = dir.csv("width_sweep_gaps.csv")?;
    w.write_record(["width", "seed", "t", "lin_gap", "centered_gap"])?;
    for r in &runs {
        for ((t, g), c) in r.trace.times.iter().zip(&r.trace.lin_gap).zip(&r.trace.centered_gap) {
            w.serialize((r.width, r.seed, t, g, c))?;
        }
    }
    w.flush()?;

    let mut widths = cfg.widths.clone();
    widths.sort_unstable();
    widths.dedup();
    let at = |w: usize| runs.iter().filter(|r| r.width == w).collect::<Vec<_>>();
    for &n in widths.iter().filter(|&&n| widths.contains(&(4 * n))) {
        let ratio = median_ratio(&runs, n, SweepRun::gap);
        out.check(Assertion::at_least(
            format!("gap_ratio_w{n}_w{}", 4 * n),
            ratio,
            MIN_RATIO,
            "median over seeds of sup-gap(n) / sup-gap(4n)",
        ));
        let ratio = median_ratio(&runs, n, |r| r.hessian);
        out.check(Assertion::at_least(
            format!("hessian_ratio_w{n}_w{}", 4 * n),
            ratio,
            MIN_RATIO,
            "median over seeds of Hessian probe(n) / probe(4n)",
        ));
    }
    let hess: Vec<f64> = widths.iter().map(|&w| median_of(&at(w), |r| r.hessian)).collect();
    let jac: Vec<f64> = widths.iter().map(|&w| median_of(&at(w), |r| r.jacobian_norm)).collect();
    out.metric("widths", &widths);
    out.metric("median_hessian_probe", &hess);
    out.metric("median_jacobian_norm", &jac);
    out.metric("median_sup_gap", widths.iter().map(|&w| median_of(&at(w), |r| r.gap())).collect::<Vec<_>>());
    out.check(Assertion::holds(
        "hessian_probe_decreasing",
        hess.windows(2).all(|p| p[1] < p[0]),
        format!("medians {hess:?}"),
    ));
    let spread = jac.iter().copied().fold(0.0, f64::max) / jac.iter().copied().fold(f64::INFINITY, f64::min);
    out.check(Assertion::at_most("jacobian_norm_bounded", spread, MAX_JACOBIAN_SPREAD, "max/min of median Jacobian norms"));
    out.check(Assertion::holds(
        "centered_gap_contracts",
        runs.iter().all(SweepRun::centered_contracts),
        "centered gap ≤ uncentered gap at every record of every run",
    ));
    let traces: Vec<_> = runs.iter().map(|r| &r.trace).collect();
    out.check(monotone_assertion("loss_monotone", &traces));
    out.check(completed_assertion("runs_completed", &traces));
    Ok(())
}
