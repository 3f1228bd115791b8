//! Parameter-space gradient flow of a finite network next to its
//! linearization.
//!
//! The network follows `dθ/dt = −η₀(∇_θ C(f_θ(𝐱)) + β(θ − θ₀))`. The
//! linearized network `f^lin = f₀ + J₀(θ^lin − θ₀)` is integrated alongside
//! it in function space: its displacement stays in the row space of `J₀(𝐱)`,
//! `θ^lin − θ₀ = J₀(𝐱)ᵀ a`, with
//!
//! ```text
//! da/dt = −η₀(∇C(f₀(𝐱) + Θ̂₀ a) + β a)
//! ```
//!
//! so only the empirical NTK at initialization is needed.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::loss::{self, LossKind, LossSpec};
use crate::net::{self, NetSnapshot};
use crate::ode::{self, OdeOptions, OdeStatus, StepControl};

/// Largest per-step increase of `𝓛^β` tolerated along the flow.
pub const LOSS_INCREASE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    /// Strictly increasing positive times at which the trace is recorded
    /// (`t = 0` is always recorded).
    pub record_times: Vec<f64>,
    pub ode: OdeOptions,
}

impl TrainOptions {
    /// `records` equally spaced times ending at `t_end`.
    pub fn uniform(t_end: f64, records: usize) -> Self {
        let records = records.max(1);
        Self {
            record_times: (1..=records).map(|i| t_end * i as f64 / records as f64).collect(),
            ode: OdeOptions::default(),
        }
    }

    /// `records` log-spaced times from `t_first` to `t_end`.
    pub fn geometric(t_first: f64, t_end: f64, records: usize) -> Self {
        if records <= 1 || t_first >= t_end {
            return Self::uniform(t_end, 1);
        }
        let ratio = (t_end / t_first).ln() / (records - 1) as f64;
        let mut record_times: Vec<f64> = (0..records).map(|i| t_first * (ratio * i as f64).exp()).collect();
        *record_times.last_mut().expect("records > 1") = t_end;
        Self {
            record_times,
            ode: OdeOptions::default(),
        }
    }

    pub fn t_end(&self) -> f64 {
        self.record_times.last().copied().unwrap_or(0.0)
    }
}

/// Data and hyperparameters of one training run.
#[derive(Debug, Clone)]
pub struct TrainProblem {
    pub spec: LossSpec,
    pub train: Vec<DVector<f64>>,
    pub test: Vec<DVector<f64>>,
    /// Inputs at which `Θ̂_{θ_t}(x, x)` is tracked.
    pub probe: Vec<DVector<f64>>,
    pub beta: f64,
    pub eta0: f64,
}

impl TrainProblem {
    fn validate(&self, net: &NetSnapshot) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta must be nonnegative, got {}", self.beta)));
        }
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return Err(Error::InvalidArgument(format!("eta0 must be positive, got {}", self.eta0)));
        }
        check_len("training points", self.spec.n(), self.train.len())?;
        check_len("network output dimension", self.spec.k(), net.arch.output_dim)?;
        for x in self.train.iter().chain(&self.test).chain(&self.probe) {
            check_len("network input", net.arch.input_dim, x.len())?;
        }
        Ok(())
    }
}

/// Recorded quantities of one training run. Per-time vectors share the
/// indexing of `times`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub times: Vec<f64>,
    /// `‖θ_t − θ₀‖₂`.
    pub theta_dist: Vec<f64>,
    /// `𝓛^β(θ_t) = C(f_θ(𝐱)) + (β/2)‖θ_t − θ₀‖²`.
    pub loss: Vec<f64>,
    /// `‖∇_θ 𝓛^β(θ_t)‖`.
    pub grad_norm: Vec<f64>,
    /// `tr Θ̂_{θ_t}(x, x) / K` per probe point.
    pub emp_ntk_probe: Vec<Vec<f64>>,
    /// `tr(D Θ̂_{θ_t}(x, x) Dᵀ) / rows(D)` with `D` the probability Jacobian.
    pub post_softmax_probe: Vec<Vec<f64>>,
    /// `max_{x'} ‖f_{θ_t}(x') − f^lin_t(x')‖₂` over test points.
    pub lin_gap: Vec<f64>,
    /// Same with both outputs block-centered (CE only; equals `lin_gap`
    /// otherwise).
    pub centered_gap: Vec<f64>,
    pub test_outputs: Vec<DVector<f64>>,
    pub lin_test_outputs: Vec<DVector<f64>>,
    pub final_train_outputs: DVector<f64>,
    /// Largest increase of `𝓛^β` between consecutive accepted steps.
    pub max_loss_increase: f64,
    pub status: OdeStatus,
    pub accepted_steps: usize,
}

impl TrainTrace {
    /// Mean over probe points of `max_t |v_t − v₀| / |v₀|`.
    pub fn relative_drift(series: &[Vec<f64>]) -> f64 {
        let Some(first) = series.first() else { return 0.0 };
        if first.is_empty() {
            return 0.0;
        }
        let per_probe = (0..first.len()).map(|j| {
            series
                .iter()
                .map(|row| (row[j] - first[j]).abs() / first[j].abs())
                .fold(0.0, f64::max)
        });
        per_probe.sum::<f64>() / first.len() as f64
    }

    pub fn ntk_drift(&self) -> f64 {
        Self::relative_drift(&self.emp_ntk_probe)
    }

    pub fn post_softmax_drift(&self) -> f64 {
        Self::relative_drift(&self.post_softmax_probe)
    }

    pub fn max_lin_gap(&self) -> f64 {
        self.lin_gap.iter().copied().fold(0.0, f64::max)
    }

    pub fn max_centered_gap(&self) -> f64 {
        self.centered_gap.iter().copied().fold(0.0, f64::max)
    }

    pub fn loss_monotone(&self) -> bool {
        self.max_loss_increase <= LOSS_INCREASE_TOL
    }

    /// CSV with columns `t, loss, theta_dist, ntk_probe_1.., lin_gap`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let probes = self.emp_ntk_probe.first().map_or(0, Vec::len);
        let mut header = vec!["t".to_string(), "loss".into(), "theta_dist".into()];
        header.extend((1..=probes).map(|j| format!("ntk_probe_{j}")));
        header.push("lin_gap".into());
        w.write_record(&header)?;
        for i in 0..self.times.len() {
            let mut row = vec![self.times[i], self.loss[i], self.theta_dist[i]];
            row.extend(&self.emp_ntk_probe[i]);
            row.push(self.lin_gap[i]);
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Trace of a run together with the network at its final time.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub trace: TrainTrace,
    pub net: NetSnapshot,
}

/// Frozen first-order model around `θ₀` on train-then-test points.
struct Linearization {
    /// Rows: all points (train then test), columns: training points.
    ntk: DMatrix<f64>,
    g0: DVector<f64>,
    nk: usize,
}

impl Linearization {
    fn new(net: &NetSnapshot, problem: &TrainProblem) -> Result<Self> {
        let all: Vec<DVector<f64>> = problem.train.iter().chain(&problem.test).cloned().collect();
        let nk = problem.spec.dim();
        let full = net.empirical_ntk(&all)?;
        let (g_train, g_test) = (net.outputs(&problem.train)?, net.outputs(&problem.test)?);
        let mut g0 = DVector::zeros(g_train.len() + g_test.len());
        g0.rows_mut(0, nk).copy_from(&g_train);
        g0.rows_mut(nk, g_test.len()).copy_from(&g_test);
        Ok(Self {
            ntk: full.columns(0, nk).into_owned(),
            g0,
            nk,
        })
    }

    fn outputs(&self, a: &DVector<f64>) -> DVector<f64> {
        &self.g0 + &self.ntk * a
    }

    fn train_outputs(&self, a: &DVector<f64>) -> DVector<f64> {
        self.g0.rows(0, self.nk) + self.ntk.rows(0, self.nk) * a
    }

    fn test_outputs(&self, a: &DVector<f64>) -> DVector<f64> {
        let m = self.g0.len() - self.nk;
        self.outputs(a).rows(self.nk, m).into_owned()
    }

    /// `aᵀ Θ̂₀ a = ‖θ^lin − θ₀‖²`.
    fn quad(&self, a: &DVector<f64>) -> f64 {
        a.dot(&(self.ntk.rows(0, self.nk) * a))
    }

    fn rhs(&self, spec: &LossSpec, beta: f64, eta0: f64, a: &DVector<f64>) -> DVector<f64> {
        let g = spec.gradient(&self.train_outputs(a)).expect("validated dimensions");
        (g + a * beta) * -eta0
    }
}

/// Pre- and post-softmax kernels at the probe points, class-averaged.
pub fn probe_kernels(net: &NetSnapshot, probe: &[DVector<f64>], kind: LossKind) -> Result<(Vec<f64>, Vec<f64>)> {
    let k = net.arch.output_dim;
    let mut pre = Vec::with_capacity(probe.len());
    let mut post = Vec::with_capacity(probe.len());
    for x in probe {
        let ntk = net.empirical_ntk(std::slice::from_ref(x))?;
        pre.push(ntk.trace() / k as f64);
        let z = net.forward(x)?;
        let d = loss::probability_jacobian(kind, z.as_slice());
        let s = &d * ntk * d.transpose();
        post.push(s.trace() / s.nrows() as f64);
    }
    Ok((pre, post))
}

fn max_point_norm(v: &DVector<f64>, k: usize) -> f64 {
    v.as_slice()
        .chunks(k)
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}

struct Recorder<'a> {
    problem: &'a TrainProblem,
    lin: &'a Linearization,
    trace: TrainTrace,
}

impl Recorder<'_> {
    fn record_full(&mut self, t: f64, net: &NetSnapshot, a: &DVector<f64>) -> Result<()> {
        let p = self.problem;
        let k = p.spec.k();
        let dtheta = &net.theta - &net.theta0;
        let xm = net::points_matrix(&p.train, net.arch.input_dim)?;
        let cache = net.forward_cache(&xm)?;
        let f = net::flatten_outputs(&cache.out);
        let grad = net.vjp_cached(&cache, &p.spec.gradient(&f)?)? + &dtheta * p.beta;
        let (pre, post) = probe_kernels(net, &p.probe, p.spec.kind)?;
        let test = net.outputs(&p.test)?;
        let lin_test = self.lin.test_outputs(a);
        let diff = &test - &lin_test;
        let centered = if p.spec.kind == LossKind::Ce { loss::center_project(&diff, k)? } else { diff.clone() };
        let tr = &mut self.trace;
        tr.times.push(t);
        tr.theta_dist.push(dtheta.norm());
        tr.loss.push(p.spec.value(&f)? + 0.5 * p.beta * dtheta.norm_squared());
        tr.grad_norm.push(grad.norm());
        tr.emp_ntk_probe.push(pre);
        tr.post_softmax_probe.push(post);
        tr.lin_gap.push(max_point_norm(&diff, k));
        tr.centered_gap.push(max_point_norm(&centered, k));
        tr.test_outputs.push(test);
        tr.lin_test_outputs.push(lin_test);
        tr.final_train_outputs = f;
        Ok(())
    }

    fn record_linear(&mut self, t: f64, a: &DVector<f64>, probe0: &(Vec<f64>, Vec<f64>)) -> Result<()> {
        let p = self.problem;
        let g = self.lin.train_outputs(a);
        let q = self.lin.quad(a);
        let v = p.spec.gradient(&g)? + a * p.beta;
        let lin_test = self.lin.test_outputs(a);
        let tr = &mut self.trace;
        tr.times.push(t);
        tr.theta_dist.push(q.max(0.0).sqrt());
        tr.loss.push(p.spec.value(&g)? + 0.5 * p.beta * q);
        tr.grad_norm.push(self.lin.quad(&v).max(0.0).sqrt());
        tr.emp_ntk_probe.push(probe0.0.clone());
        tr.post_softmax_probe.push(probe0.1.clone());
        tr.lin_gap.push(0.0);
        tr.centered_gap.push(0.0);
        tr.test_outputs.push(lin_test.clone());
        tr.lin_test_outputs.push(lin_test);
        tr.final_train_outputs = g;
        Ok(())
    }
}

fn empty_trace() -> TrainTrace {
    TrainTrace {
        times: Vec::new(),
        theta_dist: Vec::new(),
        loss: Vec::new(),
        grad_norm: Vec::new(),
        emp_ntk_probe: Vec::new(),
        post_softmax_probe: Vec::new(),
        lin_gap: Vec::new(),
        centered_gap: Vec::new(),
        test_outputs: Vec::new(),
        lin_test_outputs: Vec::new(),
        final_train_outputs: DVector::zeros(0),
        max_loss_increase: 0.0,
        status: OdeStatus::Completed,
        accepted_steps: 0,
    }
}

fn check_times(opts: &TrainOptions) -> Result<()> {
    let t = &opts.record_times;
    if t.is_empty() || t[0] <= 0.0 || t.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("record times must be positive and strictly increasing".into()));
    }
    Ok(())
}

/// Trains `net` by parameter-space gradient flow and its linearization side
/// by side. Step-size underflow ends the run early and is reported in the
/// trace status.
pub fn train_flow(net: &NetSnapshot, problem: &TrainProblem, opts: &TrainOptions) -> Result<TrainRun> {
    problem.validate(net)?;
    check_times(opts)?;
    let lin = Linearization::new(net, problem)?;
    let p = net.param_count();
    let nk = problem.spec.dim();
    let xm = net::points_matrix(&problem.train, net.arch.input_dim)?;
    let (beta, eta0, spec) = (problem.beta, problem.eta0, &problem.spec);

    let mut rec = Recorder {
        problem,
        lin: &lin,
        trace: empty_trace(),
    };
    let mut y0 = DVector::zeros(p + nk);
    y0.rows_mut(0, p).copy_from(&net.theta);
    rec.record_full(0.0, net, &DVector::zeros(nk))?;

    let loss_at = |scratch: &mut NetSnapshot, y: &DVector<f64>| -> Result<f64> {
        scratch.theta.copy_from(&y.rows(0, p));
        let f = net::flatten_outputs(&scratch.forward_batch(&xm)?);
        let d = &scratch.theta - &scratch.theta0;
        Ok(spec.value(&f)? + 0.5 * beta * d.norm_squared())
    };
    let mut rhs_net = net.clone();
    let rhs = |_: f64, y: &DVector<f64>| {
        rhs_net.theta.copy_from(&y.rows(0, p));
        let cache = rhs_net.forward_cache(&xm).expect("validated dimensions");
        let g = spec.gradient(&net::flatten_outputs(&cache.out)).expect("validated dimensions");
        let gt = rhs_net.vjp_cached(&cache, &g).expect("validated dimensions");
        let mut dy = DVector::zeros(p + nk);
        dy.rows_mut(0, p).copy_from(&((gt + (&rhs_net.theta - &rhs_net.theta0) * beta) * -eta0));
        let a = y.rows(p, nk).into_owned();
        dy.rows_mut(p, nk).copy_from(&lin.rhs(spec, beta, eta0, &a));
        dy
    };

    let mut step_net = net.clone();
    let mut prev_loss = rec.trace.loss[0];
    let mut max_increase = f64::NEG_INFINITY;
    let mut failure = None;
    let out = ode::integrate(rhs, 0.0, y0, &opts.record_times, &opts.ode, |step| {
        let res = loss_at(&mut step_net, step.y).and_then(|l| {
            max_increase = max_increase.max(l - prev_loss);
            prev_loss = l;
            if step.at_checkpoint {
                rec.record_full(step.t, &step_net, &step.y.rows(p, nk).into_owned())?;
            }
            Ok(())
        });
        match res {
            Ok(()) => StepControl::Continue,
            Err(e) => {
                failure = Some(e);
                StepControl::Stop
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    let mut trace = rec.trace;
    trace.max_loss_increase = if max_increase.is_finite() { max_increase } else { 0.0 };
    trace.status = out.status;
    trace.accepted_steps = out.accepted;
    let mut final_net = net.clone();
    final_net.theta.copy_from(&out.y.rows(0, p));
    Ok(TrainRun { trace, net: final_net })
}

/// Trains only the linearized network (in function space, through the
/// empirical NTK at initialization). NTK probes stay at their initial values
/// and the linearization gap is zero by construction.
pub fn train_linearized(net: &NetSnapshot, problem: &TrainProblem, opts: &TrainOptions) -> Result<TrainTrace> {
    problem.validate(net)?;
    check_times(opts)?;
    let lin = Linearization::new(net, problem)?;
    let nk = problem.spec.dim();
    let probe0 = probe_kernels(net, &problem.probe, problem.spec.kind)?;
    let mut rec = Recorder {
        problem,
        lin: &lin,
        trace: empty_trace(),
    };
    rec.record_linear(0.0, &DVector::zeros(nk), &probe0)?;
    let (beta, eta0, spec) = (problem.beta, problem.eta0, &problem.spec);
    let mut prev_loss = rec.trace.loss[0];
    let mut max_increase = f64::NEG_INFINITY;
    let mut failure = None;
    let out = ode::integrate(
        |_, a| lin.rhs(spec, beta, eta0, a),
        0.0,
        DVector::zeros(nk),
        &opts.record_times,
        &opts.ode,
        |step| {
            let res = spec.value(&lin.train_outputs(step.y)).and_then(|c| {
                let l = c + 0.5 * beta * lin.quad(step.y);
                max_increase = max_increase.max(l - prev_loss);
                prev_loss = l;
                if step.at_checkpoint {
                    rec.record_linear(step.t, step.y, &probe0)?;
                }
                Ok(())
            });
            match res {
                Ok(()) => StepControl::Continue,
                Err(e) => {
                    failure = Some(e);
                    StepControl::Stop
                }
            }
        },
    )?;
    if let Some(e) = failure {
        return Err(e);
    }
    let mut trace = rec.trace;
    trace.max_loss_increase = if max_increase.is_finite() { max_increase } else { 0.0 };
    trace.status = out.status;
    trace.accepted_steps = out.accepted;
    Ok(trace)
}

/// Full `NK × NK` empirical NTK at initialization on train-then-test points,
/// in the form used by the function-space solver.
pub fn empirical_kernels(net: &NetSnapshot, train: &[DVector<f64>], test: &[DVector<f64>]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let all: Vec<DVector<f64>> = train.iter().chain(test).cloned().collect();
    let full = net.empirical_ntk(&all)?;
    let nk = train.len() * net.arch.output_dim;
    let mk = test.len() * net.arch.output_dim;
    Ok((full.view((0, 0), (nk, nk)).into_owned(), full.view((nk, 0), (mk, nk)).into_owned()))
}
