//! Pre-softmax NTK versus post-softmax kernel during training.

use anyhow::Result;
use ntklab::train::{probe_kernels, train_flow, TrainProblem, TrainTrace};
use ntklab::{par, LossSpec, NetSnapshot};

use super::{arch, median_of, monotone_assertion, spread, train_options, write_trace};
use crate::config::ExperimentConfig;
use crate::inputs;
use crate::report::{Assertion, Outcome, RunDir};

pub struct PrepostRun {
    pub width: usize,
    pub seed: u64,
    pub trace: TrainTrace,
    /// Probe kernels of the untrained network, computed independently.
    pub initial: (Vec<f64>, Vec<f64>),
}

impl PrepostRun {
    pub fn pre_drift(&self) -> f64 {
        self.trace.ntk_drift()
    }

    pub fn post_drift(&self) -> f64 {
        self.trace.post_softmax_drift()
    }
}

/// Trains every (width, seed) pair of the config.
pub fn train_all(cfg: &ExperimentConfig) -> Result<Vec<PrepostRun>> {
    let inp = inputs::load(&cfg.data)?;
    let spec = LossSpec::new(cfg.loss.kind, inp.targets(cfg.loss.smoothing)?)?;
    let probe = spread(if inp.test.is_empty() { &inp.train } else { &inp.test }, 3);
    let problem = TrainProblem {
        spec: spec.clone(),
        train: inp.train.clone(),
        test: probe.clone(),
        probe,
        beta: cfg.train.beta,
        eta0: cfg.train.eta0,
    };
    let opts = train_options(&cfg.train);
    let jobs: Vec<(usize, u64)> = cfg.widths.iter().flat_map(|&w| cfg.seeds.iter().map(move |&s| (w, s))).collect();
    par::map(&jobs, |_, &(width, seed)| -> Result<PrepostRun> {
        let net = NetSnapshot::init(&arch(cfg, inp.dim(), spec.k(), width), seed)?;
        let initial = probe_kernels(&net, &problem.probe, spec.kind)?;
        let trace = train_flow(&net, &problem, &opts)?.trace;
        Ok(PrepostRun {
            width,
            seed,
            trace,
            initial,
        })
    })
    .into_iter()
    .collect()
}

pub fn run(cfg: &ExperimentConfig, dir: &mut RunDir, out: &mut Outcome) -> Result<()> {
    let runs = train_all(cfg)?;
    let mut w = dir.csv("prepost_drift.csv")?;
    w.write_record(["width", "seed", "pre_drift", "post_drift", "max_loss_increase"])?;
    for r in &runs {
        w.serialize((r.width, r.seed, r.pre_drift(), r.post_drift(), r.trace.max_loss_increase))?;
    }
    w.flush()?;
    let mut w = dir.csv("prepost_traces.csv")?;
    w.write_record(["width", "seed", "t", "probe", "pre", "post"])?;
    for r in &runs {
        for (i, t) in r.trace.times.iter().enumerate() {
            for (j, (pre, post)) in r.trace.emp_ntk_probe[i].iter().zip(&r.trace.post_softmax_probe[i]).enumerate() {
                w.serialize((r.width, r.seed, t, j + 1, pre, post))?;
            }
        }
    }
    w.flush()?;
    for r in &runs {
        write_trace(dir, &format!("w{}_s{}", r.width, r.seed), &r.trace)?;
    }

    let mut widths = cfg.widths.clone();
    widths.sort_unstable();
    widths.dedup();
    let at = |w: usize| runs.iter().filter(|r| r.width == w).collect::<Vec<_>>();
    for &width in &widths {
        let rs = at(width);
        let pre = median_of(&rs, |r| r.pre_drift());
        let post = median_of(&rs, |r| r.post_drift());
        out.check(Assertion::below(
            format!("pre_below_post_w{width}"),
            pre,
            post,
            format!("median pre-softmax drift vs median post-softmax drift over {} seeds", rs.len()),
        ));
        out.metric(&format!("median_pre_drift_w{width}"), pre);
        out.metric(&format!("median_post_drift_w{width}"), post);
    }
    for pair in widths.windows(2) {
        let (a, b) = (median_of(&at(pair[0]), |r| r.pre_drift()), median_of(&at(pair[1]), |r| r.pre_drift()));
        out.check(Assertion::below(
            format!("pre_drift_decreases_w{}_w{}", pair[0], pair[1]),
            b,
            a,
            "median pre-softmax drift at the larger width vs the smaller",
        ));
    }
    let exact = runs
        .iter()
        .all(|r| r.trace.times[0] == 0.0 && r.trace.emp_ntk_probe[0] == r.initial.0 && r.trace.post_softmax_probe[0] == r.initial.1);
    out.check(Assertion::holds("initial_values_exact", exact, "first record equals the untrained probe kernels bit for bit"));
    let traces: Vec<_> = runs.iter().map(|r| &r.trace).collect();
    out.check(monotone_assertion("loss_monotone", &traces));
    Ok(())
}
