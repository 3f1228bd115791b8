//! Empirical NTK at a few probe inputs during training on a two-class
//! problem, for one-hot targets, smoothed targets and regularized training.

use anyhow::{ensure, Result};
use ntklab::train::{train_flow, TrainProblem, TrainTrace};
use ntklab::{par, LossKind, LossSpec, NetSnapshot, TargetSet};

use super::{arch, completed_assertion, median_of, monotone_assertion, train_options, write_trace};
use crate::config::{ExperimentConfig, TrainConfig};
use crate::inputs::{self, Inputs};
use crate::report::{Assertion, Outcome, RunDir};

/// The three training regimes compared, in decreasing expected drift.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    OneHot,
    Smoothed,
    Regularized,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::OneHot, Regime::Smoothed, Regime::Regularized];

    pub fn name(self) -> &'static str {
        match self {
            Regime::OneHot => "one_hot",
            Regime::Smoothed => "smoothed",
            Regime::Regularized => "regularized",
        }
    }

    /// Label smoothing and β of this regime.
    pub fn setting(self, cfg: &ExperimentConfig) -> (f64, f64) {
        match self {
            Regime::OneHot => (0.0, 0.0),
            Regime::Smoothed => (cfg.tracking.smoothing, 0.0),
            Regime::Regularized => (0.0, cfg.tracking.beta_reg),
        }
    }
}

pub struct TrackingRun {
    pub width: usize,
    pub seed: u64,
    pub regime: Regime,
    pub trace: TrainTrace,
}

fn problem(cfg: &ExperimentConfig, inp: &Inputs, regime: Regime) -> Result<TrainProblem> {
    let labels = inp.labels.as_ref().ok_or_else(|| anyhow::anyhow!("NTK tracking needs labelled data"))?;
    let (eps, beta) = regime.setting(cfg);
    let probe: Vec<_> = inp.test.iter().take(cfg.tracking.probes).cloned().collect();
    Ok(TrainProblem {
        spec: LossSpec::new(LossKind::CeRef, TargetSet::smoothed(labels, 2, eps)?)?,
        train: inp.train.clone(),
        test: probe.clone(),
        probe,
        beta,
        eta0: cfg.train.eta0,
    })
}

/// Loads the data and trains all (width, seed, regime) combinations.
pub fn train_all(cfg: &ExperimentConfig) -> Result<(Inputs, Vec<TrackingRun>)> {
    let inp = inputs::load(&cfg.data)?;
    ensure!(inp.classes == 2, "NTK tracking needs a two-class problem, got {} classes", inp.classes);
    ensure!(
        inp.test.len() >= cfg.tracking.probes,
        "{} probe points requested but only {} held-out points",
        cfg.tracking.probes,
        inp.test.len()
    );
    let problems: Vec<TrainProblem> = Regime::ALL.iter().map(|&r| problem(cfg, &inp, r)).collect::<Result<_>>()?;
    let opts = train_options(&cfg.train);
    let jobs: Vec<(usize, u64, usize)> = cfg
        .widths
        .iter()
        .flat_map(|&w| cfg.seeds.iter().flat_map(move |&s| (0..3).map(move |r| (w, s, r))))
        .collect();
    let runs = par::map(&jobs, |_, &(width, seed, r)| -> Result<TrackingRun> {
        let net = NetSnapshot::init(&arch(cfg, inp.dim(), 1, width), seed)?;
        Ok(TrackingRun {
            width,
            seed,
            regime: Regime::ALL[r],
            trace: train_flow(&net, &problems[r], &opts)?.trace,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok((inp, runs))
}

/// One-hot runs at `width` trained to `tracking.one_hot_t_end`, or `None`
/// when that horizon is unset or equals `train.t_end`.
pub fn one_hot_budget_runs(cfg: &ExperimentConfig, inp: &Inputs, width: usize) -> Result<Option<Vec<TrainTrace>>> {
    let t_end = match cfg.tracking.one_hot_t_end {
        Some(t) if t != cfg.train.t_end => t,
        _ => return Ok(None),
    };
    let p = problem(cfg, inp, Regime::OneHot)?;
    let opts = train_options(&TrainConfig { t_end, ..cfg.train.clone() });
    let traces = par::map(&cfg.seeds, |_, &seed| -> Result<TrainTrace> {
        let net = NetSnapshot::init(&arch(cfg, inp.dim(), 1, width), seed)?;
        Ok(train_flow(&net, &p, &opts)?.trace)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(Some(traces))
}

/// Median drift of one regime at one width.
pub fn median_drift(runs: &[TrackingRun], width: usize, regime: Regime) -> f64 {
    let sel: Vec<_> = runs.iter().filter(|r| r.width == width && r.regime == regime).collect();
    median_of(&sel, |r| r.trace.ntk_drift())
}

pub fn run(cfg: &ExperimentConfig, dir: &mut RunDir, out: &mut Outcome) -> Result<()> {
    let one_hot_min = cfg.threshold("one_hot_drift_min")?;
    let reg_max = cfg.threshold("regularized_drift_max")?;
    let (inp, runs) = train_all(cfg)?;
    if let Some(note) = &inp.substitution {
        out.notes.push(note.clone());
    }

    let mut w = dir.csv("tracking_drift.csv")?;
    w.write_record(["width", "seed", "regime", "drift", "final_loss", "max_loss_increase", "status"])?;
    for r in &runs {
        let status = serde_json::to_value(r.trace.status)?;
        w.serialize((
            r.width,
            r.seed,
            r.regime.name(),
            r.trace.ntk_drift(),
            r.trace.loss.last().copied().unwrap_or(f64::NAN),
            r.trace.max_loss_increase,
            status.as_str().unwrap_or("unknown"),
        ))?;
    }
    w.flush()?;
    for r in &runs {
        write_trace(dir, &format!("w{}_s{}_{}", r.width, r.seed, r.regime.name()), &r.trace)?;
    }

    let mut widths = cfg.widths.clone();
    widths.sort_unstable();
    widths.dedup();
    for &width in &widths {
        let [a, b, c] = Regime::ALL.map(|g| median_drift(&runs, width, g));
        out.metric(&format!("median_drift_w{width}"), [a, b, c]);
        out.check(Assertion::above(
            format!("one_hot_above_smoothed_w{width}"),
            a,
            b,
            "median drift, one-hot β = 0 vs smoothed β = 0",
        ));
        out.check(Assertion::above(
            format!("smoothed_above_regularized_w{width}"),
            b,
            c,
            "median drift, smoothed β = 0 vs one-hot regularized",
        ));
    }
    let mut budget = Vec::new();
    for (name, th, regime) in [("one_hot_drift_min", one_hot_min, Regime::OneHot), ("regularized_drift_max", reg_max, Regime::Regularized)] {
        let Some(width) = th.width.filter(|w| widths.contains(w)) else {
            out.notes.push(format!("{name} skipped: its width is not in the sweep"));
            continue;
        };
        let extended = if regime == Regime::OneHot { one_hot_budget_runs(cfg, &inp, width)? } else { None };
        let (d, horizon) = match &extended {
            Some(traces) => (median_of(traces, |t| t.ntk_drift()), cfg.tracking.one_hot_t_end.unwrap_or(cfg.train.t_end)),
            None => (median_drift(&runs, width, regime), cfg.train.t_end),
        };
        let detail = format!("median drift at width {width}, t = {horizon}; {}", th.provenance);
        out.check(if regime == Regime::OneHot {
            Assertion::above(name, d, th.value, detail)
        } else {
            Assertion::below(name, d, th.value, detail)
        });
        if let Some(traces) = extended {
            let mut w = dir.csv("tracking_one_hot_budget.csv")?;
            w.write_record(["width", "seed", "t_end", "drift", "final_loss", "max_loss_increase"])?;
            for (seed, t) in cfg.seeds.iter().zip(&traces) {
                w.serialize((width, seed, horizon, t.ntk_drift(), t.loss.last().copied().unwrap_or(f64::NAN), t.max_loss_increase))?;
            }
            w.flush()?;
            budget = traces;
        }
    }
    let traces: Vec<_> = runs.iter().map(|r| &r.trace).chain(&budget).collect();
    out.check(monotone_assertion("loss_monotone", &traces));
    out.check(completed_assertion("runs_completed", &traces));
    Ok(())
}
