//! Acceptance suite. Each criterion prints one PASS/FAIL line with its
//! measured values, tolerances and runtime; the process exits non-zero when
//! any criterion fails.
//!
//! `ACCEPTANCE_ONLY=1,4,9` runs a subset.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{ensure, Context, Result};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ntklab::ensemble::{self, EnsembleSetup, MapAnchor};
use ntklab::flow::{self, FlowProblem, OutputKernel, StationaryKind, OBJECTIVE_TOL};
use ntklab::kernel::{self, assemble_pack, empirical_ntk_error};
use ntklab::loss::audit_assumptions;
use ntklab::ode::OdeOptions;
use ntklab::train::{self, TrainOptions, TrainProblem, LOSS_INCREASE_TOL};
use ntklab::{data, stats, ArchSpec, LossKind, LossSpec, NetSnapshot, TargetSet};
use ntklab_cli::config::ExperimentConfig;
use ntklab_cli::experiments::{brier, prepost, tracking, width_sweep};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const BETAS: [f64; 3] = [0.01, 0.1, 1.0];

// ---------------------------------------------------------------------------
// Bookkeeping

#[derive(Default)]
struct Checks(Vec<(bool, String)>);

impl Checks {
    fn at_most(&mut self, what: &str, value: f64, bound: f64) {
        self.0.push((value <= bound, format!("{what} = {value:.3e} ≤ {bound:.1e}")));
    }

    fn at_least(&mut self, what: &str, value: f64, bound: f64) {
        self.0.push((value >= bound, format!("{what} = {value:.4} ≥ {bound}")));
    }

    fn holds(&mut self, ok: bool, what: String) {
        self.0.push((ok, what));
    }

    fn note(&mut self, what: String) {
        self.0.push((true, what));
    }

    fn passed(&self) -> bool {
        !self.0.is_empty() && self.0.iter().all(|(ok, _)| *ok)
    }

    fn detail(&self) -> String {
        self.0
            .iter()
            .map(|(ok, s)| if *ok { s.clone() } else { format!("✗ {s}") })
            .collect::<Vec<_>>()
            .join("; ")
    }
}

/// Largest per-step increases collected from the trajectories of other
/// criteria.
#[derive(Default)]
struct Monotone {
    function_space: Vec<f64>,
    parameter_space: Vec<f64>,
}

type Criterion = fn(&mut Monotone) -> Result<Checks>;

// ---------------------------------------------------------------------------
// Independent oracles

fn randn(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<DVector<f64>> {
    (0..n).map(|_| randn(rng, d)).collect()
}

fn random_probs(rng: &mut ChaCha8Rng, n: usize, cols: usize) -> DMatrix<f64> {
    let mut m = DMatrix::from_fn(n, cols, |_, _| rng.random_range(0.05..1.0));
    for mut row in m.row_iter_mut() {
        let s = row.sum();
        row /= s;
    }
    m
}

/// `m ⊗ I_k` in point-major layout.
fn kron_eye(m: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows() * k, m.ncols() * k, |r, c| if r % k == c % k { m[(r / k, c / k)] } else { 0.0 })
}

fn point_major(m: &DMatrix<f64>) -> DVector<f64> {
    let k = m.ncols();
    DVector::from_fn(m.nrows() * k, |r, _| m[(r / k, r % k)])
}

fn solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    a.clone().lu().solve(b).context("singular system")
}

fn inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    a.clone().try_inverse().context("singular matrix")
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax_block(s: &[f64]) -> DMatrix<f64> {
    let k = s.len();
    DMatrix::from_fn(k, k, |a, b| if a == b { s[a] } else { 0.0 } - s[a] * s[b])
}

/// Value, gradient and Hessian block of one point's loss.
fn oracle_point(kind: LossKind, z: &[f64], p: &[f64]) -> (f64, Vec<f64>, DMatrix<f64>) {
    match kind {
        LossKind::Mse => {
            let r: Vec<f64> = z.iter().zip(p).map(|(a, b)| a - b).collect();
            (0.5 * r.iter().map(|v| v * v).sum::<f64>(), r, DMatrix::identity(z.len(), z.len()))
        }
        LossKind::Ce => {
            let s = softmax(z);
            let value = log_sum_exp(z) - z.iter().zip(p).map(|(a, b)| a * b).sum::<f64>();
            (value, s.iter().zip(p).map(|(a, b)| a - b).collect(), softmax_block(&s))
        }
        LossKind::CeRef => {
            let ext: Vec<f64> = std::iter::once(0.0).chain(z.iter().copied()).collect();
            let s = softmax(&ext);
            let value = log_sum_exp(&ext) - z.iter().zip(&p[1..]).map(|(a, b)| a * b).sum::<f64>();
            (value, s[1..].iter().zip(&p[1..]).map(|(a, b)| a - b).collect(), softmax_block(&s[1..]))
        }
        LossKind::BrierRef => {
            let s = 1.0 / (1.0 + (-z[0]).exp());
            let (r, ds) = (s - p[1], s * (1.0 - s));
            (0.5 * r * r, vec![r * ds], DMatrix::from_element(1, 1, ds * ds + r * ds * (1.0 - 2.0 * s)))
        }
    }
}

fn oracle_loss(spec: &LossSpec, z: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
    let k = spec.k();
    let n = spec.n();
    let (mut value, mut grad, mut hess) = (0.0, DVector::zeros(n * k), DMatrix::zeros(n * k, n * k));
    for i in 0..n {
        let p: Vec<f64> = spec.targets.probs.row(i).iter().copied().collect();
        let (v, g, h) = oracle_point(spec.kind, &z.as_slice()[i * k..(i + 1) * k], &p);
        value += v;
        grad.rows_mut(i * k, k).copy_from_slice(&g);
        hess.view_mut((i * k, i * k), (k, k)).copy_from(&h);
    }
    (value, grad, hess)
}

fn tight_ode() -> OdeOptions {
    OdeOptions {
        rtol: 1e-10,
        atol: 1e-12,
        ..OdeOptions::default()
    }
}

/// A random kernel problem with its scalar kernels kept for the oracles.
struct Instance {
    problem: FlowProblem,
    theta: DMatrix<f64>,
    cross: DMatrix<f64>,
    g0: DVector<f64>,
    g0_test: DVector<f64>,
}

fn random_instance(rng: &mut ChaCha8Rng, kind: LossKind, beta: f64) -> Result<Instance> {
    let n = rng.random_range(2..=8);
    let d = rng.random_range(2..=5);
    let m = rng.random_range(1..=4);
    let labels = |rng: &mut ChaCha8Rng, classes: usize| -> Vec<usize> { (0..n).map(|_| rng.random_range(0..classes)).collect() };
    let spec = match kind {
        LossKind::Mse => {
            let k = rng.random_range(1..=3);
            LossSpec::mse(DMatrix::from_fn(n, k, |_, _| rng.sample(StandardNormal)))?
        }
        LossKind::Ce => {
            let k = rng.random_range(2..=3);
            let eps = if rng.random_bool(0.5) { 0.0 } else { 0.1 };
            LossSpec::new(kind, TargetSet::smoothed(&labels(rng, k), k, eps)?)?
        }
        _ => {
            let classes = rng.random_range(2..=3);
            LossSpec::new(LossKind::CeRef, TargetSet::smoothed(&labels(rng, classes), classes, 0.1)?)?
        }
    };
    let k = spec.k();
    let arch = ArchSpec::uniform(rng.random_range(1..=2), 1, d, k, rng.random_range(1.0..2.0), rng.random_range(0.0..0.5));
    let train = random_points(rng, n, d);
    let test = random_points(rng, m, d);
    let theta = kernel::cross_kernels(&arch, &train, &train)?.1;
    let cross = kernel::cross_kernels(&arch, &test, &train)?.1;
    let (g0, g0_test) = (randn(rng, n * k), randn(rng, m * k));
    let problem = FlowProblem::from_kernels(
        OutputKernel::scalar(theta.clone(), k),
        OutputKernel::scalar(cross.clone(), k),
        spec,
        beta,
        1.0,
        g0.clone(),
        g0_test.clone(),
    )?
    .with_jitter(0.0)?;
    Ok(Instance {
        problem,
        theta,
        cross,
        g0,
        g0_test,
    })
}

fn config(name: &str, overrides: &[(&str, &str)]) -> Result<ExperimentConfig> {
    let path: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "configs", name].iter().collect();
    let overrides: Vec<(String, String)> = overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    ExperimentConfig::load(&path, &overrides)
}

// ---------------------------------------------------------------------------
// Criteria

/// Both test-prediction formulas from dense linear algebra.
fn dual_formulas(_: &mut Monotone) -> Result<Checks> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst_ab, mut worst_lib, mut worst_res) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..50 {
        let beta = BETAS[i % 3];
        let inst = random_instance(&mut rng, LossKind::Ce, beta)?;
        let p = &inst.problem;
        let k = p.k();
        let (report, pred) = p.solve()?;
        let g = &report.z;
        let th = kron_eye(&inst.theta, k);
        let cr = kron_eye(&inst.cross, k);
        let grad = oracle_loss(&p.spec, g).1;
        worst_res = worst_res.max((&th * &grad + (g - &inst.g0) * beta).amax());
        let a = &inst.g0_test + &cr * solve(&th, &(g - &inst.g0))?;
        let b = &inst.g0_test - &cr * &grad / beta;
        let scale = 1.0 + a.amax();
        worst_ab = worst_ab.max((&a - &b).amax() / scale);
        worst_lib = worst_lib.max((&pred.formula_a - &a).amax() / scale);
        let lib_b = pred.formula_b.context("formula B missing for β > 0")?;
        worst_lib = worst_lib.max((&lib_b - &b).amax() / scale);
    }
    let mut c = Checks::default();
    c.at_most("max |A − B|/(1 + ‖A‖∞) over 50 problems", worst_ab, 1e-6);
    c.at_most("library vs oracle", worst_lib, 1e-8);
    c.note(format!("max stationarity residual {worst_res:.1e}"));
    Ok(c)
}

/// Damped Newton against the integrated function-space flow.
fn newton_vs_flow(mono: &mut Monotone) -> Result<Checks> {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let kinds = [LossKind::Ce, LossKind::CeRef, LossKind::Mse];
    let mut worst = 0.0f64;
    let mut unfinished = 0;
    for i in 0..50 {
        let inst = random_instance(&mut rng, kinds[i % 3], BETAS[(i / 3) % 3])?;
        let p = inst.problem.with_ode(tight_ode());
        let newton = p.phi_inverse(&(&inst.g0 * p.beta))?;
        let traj = p.integrate_to_stationarity(1e5, 100.0, 1e-9)?;
        if traj.last().grad_norm > 1e-9 {
            unfinished += 1;
        }
        worst = worst.max((&traj.last().g_train - &newton.z).amax());
        mono.function_space.push(traj.max_objective_increase);
    }
    let mut c = Checks::default();
    c.at_most("max |g_flow − g_newton|∞ over 50 problems", worst, 1e-5);
    c.holds(unfinished == 0, format!("{unfinished} flows short of stationarity"));
    Ok(c)
}

/// MSE: every solver output against its linear-algebra closed form.
fn mse_closed_forms(_: &mut Monotone) -> Result<Checks> {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut phi, mut fixed, mut pred) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..20 {
        let beta = [0.0, 0.01, 0.1, 1.0][i % 4];
        let inst = random_instance(&mut rng, LossKind::Mse, beta)?;
        let p = &inst.problem;
        let (k, nk) = (p.k(), p.spec.dim());
        let th = kron_eye(&inst.theta, k);
        let cr = kron_eye(&inst.cross, k);
        let y = point_major(&p.spec.targets.probs);
        let shifted = &th + DMatrix::identity(nk, nk) * beta;

        let r = randn(&mut rng, nk);
        let z = p.phi_inverse(&r)?.z;
        let z_ref = solve(&shifted, &(&r + &th * &y))?;
        phi = phi.max((&z - &z_ref).amax() / (1.0 + z_ref.amax()));

        let (report, prediction) = p.solve()?;
        let g_ref = solve(&shifted, &(&th * &y + &inst.g0 * beta))?;
        fixed = fixed.max((&report.z - &g_ref).amax() / (1.0 + g_ref.amax()));
        let a_ref = &inst.g0_test + &cr * solve(&shifted, &(&y - &inst.g0))?;
        pred = pred.max((&prediction.formula_a - &a_ref).amax() / (1.0 + a_ref.amax()));
    }

    // Linearized training: a(t) = −(I − e^{−η₀(Θ̂+β)t})(Θ̂+β)⁻¹ r₀.
    let mut lin = 0.0f64;
    for (seed, beta) in [(0u64, 0.0), (1, 0.1)] {
        let arch = ArchSpec::uniform(1, 64, 3, 2, 1.5, 0.1);
        let net = NetSnapshot::init(&arch, seed)?;
        let (n, m, eta0) = (4, 2, 0.5);
        let train_x = random_points(&mut rng, n, 3);
        let test_x = random_points(&mut rng, m, 3);
        let y = DMatrix::from_fn(n, 2, |_, _| rng.sample(StandardNormal));
        let problem = TrainProblem {
            spec: LossSpec::mse(y.clone())?,
            train: train_x.clone(),
            test: test_x.clone(),
            probe: vec![test_x[0].clone()],
            beta,
            eta0,
        };
        let opts = TrainOptions {
            ode: tight_ode(),
            ..TrainOptions::uniform(5.0, 5)
        };
        let trace = train::train_linearized(&net, &problem, &opts)?;
        let all: Vec<_> = train_x.iter().chain(&test_x).cloned().collect();
        let jac = net.jacobian(&all)?;
        let ntk = &jac * jac.transpose();
        let nk = 2 * n;
        let th = ntk.view((0, 0), (nk, nk)).into_owned();
        let cr = ntk.view((nk, 0), (2 * m, nk)).into_owned();
        let f0 = net.outputs(&all)?;
        let r0 = f0.rows(0, nk) - point_major(&y);
        let eig = SymmetricEigen::new(&th + DMatrix::identity(nk, nk) * beta);
        for (t, out) in trace.times.iter().zip(&trace.test_outputs) {
            let w = eig.eigenvalues.map(|l| -(1.0 - (-eta0 * l * t).exp()) / l);
            let a = &eig.eigenvectors * DMatrix::from_diagonal(&w) * eig.eigenvectors.transpose() * &r0;
            let expected = f0.rows(nk, 2 * m) + &cr * &a;
            lin = lin.max((out - &expected).amax() / (1.0 + expected.amax()));
        }
    }

    // Gaussian ensemble: the trained prediction is affine in the prior draw.
    let mut ens = 0.0f64;
    for beta in [0.1, 1.0] {
        let (n, m, k) = (5, 3, 2);
        let points = random_points(&mut rng, n + m, 3);
        let arch = ArchSpec::uniform(2, 1, 3, k, 1.5, 0.1);
        let pack = assemble_pack(&arch, &points)?;
        let y = DMatrix::from_fn(n, k, |_, _| rng.sample(StandardNormal));
        let setup = EnsembleSetup::from_pack(&pack, n, LossSpec::mse(y.clone())?, beta, 1.0)?;
        let anchor = MapAnchor::new(&setup.problem)?;
        let (mu, sigma) = ensemble::gaussian_approx(&anchor, &setup)?;
        let (nk, mk) = (n * k, m * k);
        let th_joint = kron_eye(&setup.theta_joint, k);
        let prior = kron_eye(&setup.prior, k);
        let th = th_joint.view((0, 0), (nk, nk)).into_owned();
        let cr = th_joint.view((nk, 0), (mk, nk)).into_owned();
        let s = inverse(&(&th + DMatrix::identity(nk, nk) * beta))?;
        let cs = &cr * s;
        let mut map = DMatrix::zeros(mk, nk + mk);
        map.view_mut((0, 0), (mk, nk)).copy_from(&(-&cs));
        map.view_mut((0, nk), (mk, mk)).fill_with_identity();
        let mean = &cs * point_major(&y);
        let cov = &map * prior * map.transpose();
        ens = ens.max((&mu - &mean).amax() / (1.0 + mean.amax()));
        ens = ens.max((&sigma - &cov).amax() / cov.amax().max(1.0));
    }

    let mut c = Checks::default();
    c.at_most("Φ⁻¹", phi, 1e-6);
    c.at_most("fixed point", fixed, 1e-6);
    c.at_most("test prediction", pred, 1e-6);
    c.at_most("linearized training", lin, 1e-6);
    c.at_most("ensemble mean/covariance", ens, 1e-8);
    Ok(c)
}

/// One-point Brier landscape with a reference class.
fn brier_counterexample(_: &mut Monotone) -> Result<Checks> {
    let starts = data::grid_1d(-4.0, 10.0, 141);
    let residual = |beta: f64, z: f64| {
        let s = 1.0 / (1.0 + (-z).exp());
        (s - 0.5) * s * (1.0 - s) + beta * (z - 5.5)
    };
    let mut c = Checks::default();

    let p = brier::scalar_problem(1.0, 0.5, 0.01, 5.5)?;
    let mut pts = flow::stationary_points(&p, &starts, brier::MERGE_TOL)?;
    pts.sort_by(|a, b| a.z[0].total_cmp(&b.z[0]));
    let expected = [(0.98, StationaryKind::Min), (2.47, StationaryKind::Max), (5.24, StationaryKind::Min)];
    let found: Vec<String> = pts.iter().map(|s| format!("{:.4} {}", s.z[0], brier::kind_name(s.kind))).collect();
    let kinds_ok = pts.len() == 3 && pts.iter().zip(&expected).all(|(s, e)| s.kind == e.1);
    c.holds(kinds_ok, format!("β = 0.01: found [{}]", found.join(", ")));
    let dev = pts.iter().zip(&expected).map(|(s, e)| (s.z[0] - e.0).abs()).fold(0.0, f64::max);
    c.at_most("max |z − z_expected|", if kinds_ok { dev } else { f64::NAN }, 0.01);
    let res = pts.iter().map(|s| residual(0.01, s.z[0]).abs()).fold(0.0, f64::max);
    c.at_most("oracle residual", res, 1e-10);

    let p = brier::scalar_problem(1.0, 0.5, 0.0, 5.5)?;
    let pts = flow::stationary_points(&p, &starts, brier::MERGE_TOL)?;
    let root = if pts.len() == 1 { pts[0].z[0].abs() } else { f64::NAN };
    c.at_most(&format!("β = 0: {} point(s), |z|", pts.len()), root, 1e-8);
    Ok(c)
}

/// Analytic kernels against wide random networks.
fn kernel_monte_carlo(_: &mut Monotone) -> Result<Checks> {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let points = random_points(&mut rng, 3, 4);
    let seeds: Vec<u64> = (0..20).collect();
    let mut worst = 0.0f64;
    for depth in [1, 2] {
        let arch = ArchSpec::uniform(depth, 4096, 4, 1, 1.5, 0.1);
        let (mut outs, mut ntks) = (Vec::new(), Vec::new());
        for &s in &seeds {
            let net = NetSnapshot::init(&arch, s)?;
            outs.push(net.outputs(&points)?);
            ntks.push(net.empirical_ntk(&points)?);
        }
        for i in 0..3 {
            for j in i..3 {
                let nngp: Vec<f64> = outs.iter().map(|f| f[i] * f[j]).collect();
                let ntk: Vec<f64> = ntks.iter().map(|t| t[(i, j)]).collect();
                for (xs, exact) in [(nngp, kernel::nngp_kernel(&arch, &points[i], &points[j])?), (ntk, kernel::ntk_kernel(&arch, &points[i], &points[j])?)] {
                    worst = worst.max((stats::mean(&xs) - exact).abs() / stats::std_err(&xs));
                }
            }
        }
    }
    let widths = [64, 256, 1024];
    let pack = assemble_pack(&ArchSpec::uniform(2, 64, 4, 1, 1.5, 0.1), &points)?;
    let mut medians = Vec::new();
    for w in widths {
        let arch = ArchSpec::uniform(2, w, 4, 1, 1.5, 0.1);
        let errs = seeds
            .iter()
            .map(|&s| Ok(empirical_ntk_error(&pack, &NetSnapshot::init(&arch, s)?.empirical_ntk(&points)?)?))
            .collect::<Result<Vec<f64>>>()?;
        medians.push(stats::median(&errs));
    }
    let mut c = Checks::default();
    c.at_most("max |MC mean − analytic| in standard errors (depths 1, 2)", worst, 3.0);
    c.holds(
        medians.windows(2).all(|p| p[1] < p[0]),
        format!("median empirical-NTK error at widths {widths:?}: {medians:.4?} strictly decreasing"),
    );
    Ok(c)
}

/// Linearization gap shrinks with width.
fn width_scaling(mono: &mut Monotone) -> Result<Checks> {
    let cfg = config("width_sweep.json", &[])?;
    ensure!(cfg.loss.kind == LossKind::Ce && cfg.loss.smoothing == 0.0 && cfg.train.beta == 0.01, "width sweep config drifted");
    ensure!(cfg.seeds.len() == 10, "width sweep config needs 10 seeds");
    let runs = width_sweep::train_all(&cfg)?;
    mono.parameter_space.extend(runs.iter().map(|r| r.trace.max_loss_increase));
    let mut c = Checks::default();
    for n in [128, 512] {
        c.at_least(&format!("median gap({n})/gap({})", 4 * n), width_sweep::median_ratio(&runs, n, |r| r.gap()), 1.5);
    }
    Ok(c)
}

/// NTK drift under one-hot, smoothed and regularized training.
fn tracking_order(mono: &mut Monotone) -> Result<Checks> {
    let cfg = config("ntk_tracking.json", &[("widths", "[512]")])?;
    ensure!(cfg.seeds.len() == 10, "tracking config needs 10 seeds");
    let (_, runs) = tracking::train_all(&cfg)?;
    mono.parameter_space.extend(runs.iter().map(|r| r.trace.max_loss_increase));
    let [a, b, d] = tracking::Regime::ALL.map(|g| tracking::median_drift(&runs, 512, g));
    let mut c = Checks::default();
    c.holds(
        a > b && b > d,
        format!("median drift at width 512: one-hot {a:.4} > smoothed {b:.4} > regularized {d:.4}"),
    );
    Ok(c)
}

/// Pre-softmax NTK drifts less than the post-softmax kernel.
fn prepost_order(_: &mut Monotone) -> Result<Checks> {
    let cfg = config("ntk_prepost.json", &[("widths", "[1024]")])?;
    ensure!(cfg.seeds.len() == 10, "prepost config needs 10 seeds");
    let runs = prepost::train_all(&cfg)?;
    let pre = stats::median(&runs.iter().map(|r| r.pre_drift()).collect::<Vec<_>>());
    let post = stats::median(&runs.iter().map(|r| r.post_drift()).collect::<Vec<_>>());
    let mut c = Checks::default();
    c.holds(pre < post, format!("median drift at width 1024: pre-softmax {pre:.4} < post-softmax {post:.4}"));
    Ok(c)
}

/// Laplace minus ensemble covariance with the NTK as prior.
fn gap_certificate(_: &mut Monotone) -> Result<Checks> {
    let mut rng = ChaCha8Rng::seed_from_u64(909);
    let (mut psd, mut closed, mut lib) = (f64::NEG_INFINITY, 0.0f64, 0.0f64);
    let mut certified = true;
    for i in 0..21 {
        // The last configuration is the β = 0 case with full-support targets.
        let zero = i == 20;
        let beta = if zero { 0.0 } else { BETAS[i % 3] };
        let (n, m) = (rng.random_range(2..=6), rng.random_range(1..=4));
        let classes = rng.random_range(2..=3);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let spec = if zero {
            LossSpec::new(LossKind::CeRef, TargetSet::smoothed(&labels, classes, 0.1)?)?
        } else {
            LossSpec::new(LossKind::Ce, TargetSet::one_hot(&labels, classes)?)?
        };
        let k = spec.k();
        let points: Vec<DVector<f64>> = random_points(&mut rng, n + m, 4)
            .into_iter()
            .map(|mut x| {
                data::normalize_rms(&mut x);
                x
            })
            .collect();
        let pack = assemble_pack(&ArchSpec::uniform(2, 1, 4, k, 1.5, 0.1), &points)?;
        let setup = EnsembleSetup::from_pack(&pack, n, spec, beta, 1.0)?.with_ntk_prior();
        let anchor = MapAnchor::new(&setup.problem)?;

        let (nk, mk) = (n * k, m * k);
        let joint = kron_eye(&setup.theta_joint, k);
        let th = joint.view((0, 0), (nk, nk)).into_owned();
        let cr = joint.view((nk, 0), (mk, nk)).into_owned();
        let tt = joint.view((nk, nk), (mk, mk)).into_owned();
        let h = oracle_loss(&setup.problem.spec, &anchor.g_star).2;
        let a_inv = inverse(&(&th * &h + DMatrix::identity(nk, nk) * beta))?;
        let lap = &tt - &cr * &h * &a_inv * cr.transpose();
        // Linearized push-through: g' = g₀' + Θ'Θ⁻¹(βA⁻¹ − I)g₀.
        let mut map = DMatrix::zeros(mk, nk + mk);
        map.view_mut((0, 0), (mk, nk)).copy_from(&(&cr * inverse(&th)? * (&a_inv * beta - DMatrix::identity(nk, nk))));
        map.view_mut((0, nk), (mk, mk)).fill_with_identity();
        let ens = &map * &joint * map.transpose();
        let gap = &lap - &ens;
        let closed_form = (cr.clone() * a_inv.transpose() * &h * &a_inv * cr.transpose()) * beta;
        let trace = lap.trace();
        let scale = lap.amax().max(1.0);

        let min_eig = SymmetricEigen::new((&gap + gap.transpose()) * 0.5).eigenvalues.min();
        psd = psd.max(-min_eig / trace);
        closed = closed.max((&gap - &closed_form).amax() / scale);
        if zero {
            closed = closed.max(gap.amax() / scale);
            certified &= closed_form.amax() == 0.0;
        }
        let lib_lap = ensemble::laplace_cov(&anchor, &setup)?;
        let (_, lib_ens) = ensemble::gaussian_approx(&anchor, &setup)?;
        lib = lib.max(((&lib_lap - &lap).amax()).max((&lib_ens - &ens).amax()) / scale);
        if !zero {
            let cert = ensemble::gap_certificate(&anchor, &setup)?;
            certified &= cert.psd && cert.agrees;
        }
    }
    let mut c = Checks::default();
    c.at_most("max −λ_min(gap)/trace(Σ_Lap) over 20 configurations", psd, 1e-8);
    c.at_most("closed-form deviation (incl. β = 0 gap)", closed, 1e-8);
    c.at_most("library vs oracle covariances", lib, 1e-8);
    c.holds(certified, "library certificates pass and closed form vanishes at β = 0".into());
    Ok(c)
}

/// Loss assumptions on a sublevel set, recomputed from the accepted samples.
fn assumption_audit(_: &mut Monotone) -> Result<Checks> {
    let (n, k0, samples) = (4, 10.0, 1000);
    let labels = [0, 2, 1, 2];
    let mut c = Checks::default();

    let ce = LossSpec::new(LossKind::Ce, TargetSet::smoothed(&labels, 3, 0.1)?)?;
    let probe = audit_assumptions(&ce, k0, samples, 0)?;
    ensure!(probe.samples.len() == samples, "only {} CE samples accepted", probe.samples.len());
    let entropy: f64 = ce.targets.probs.iter().map(|&p| -p * p.ln()).sum();
    let (mut k1, mut hess, mut mu) = (0.0f64, 0.0f64, f64::INFINITY);
    for z in &probe.samples {
        let (v, g, h) = oracle_loss(&ce, z);
        k1 = k1.max(g.norm());
        hess = hess.max(SymmetricEigen::new(h).eigenvalues.amax());
        if v - entropy >= 1e-12 {
            mu = mu.min(g.norm_squared() / (2.0 * (v - entropy)));
        }
    }
    let bound = 0.5 * ce.targets.probs.iter().map(|&p| (-k0 / p).exp()).fold(f64::INFINITY, f64::min);
    c.at_most("CE K₁/√(2N)", k1 / (2.0 * n as f64).sqrt(), 1.0);
    c.at_most("CE max Hessian norm", hess, 0.5);
    c.holds(mu >= bound, format!("CE μ_C = {mu:.3e} ≥ analytic {bound:.1e}"));
    c.at_most(
        "library vs oracle (K₁, μ_C)",
        ((probe.k1 - k1).abs() / k1).max((probe.mu_c - mu).abs() / mu),
        1e-9,
    );

    let ce_ref = LossSpec::new(LossKind::CeRef, TargetSet::smoothed(&labels, 3, 0.1)?)?;
    let probe = audit_assumptions(&ce_ref, k0, samples, 1)?;
    ensure!(probe.samples.len() == samples, "only {} CE-ref samples accepted", probe.samples.len());
    let lo = probe
        .samples
        .iter()
        .map(|z| SymmetricEigen::new(oracle_loss(&ce_ref, z).2).eigenvalues.min())
        .fold(f64::INFINITY, f64::min);
    c.holds(lo > 0.0, format!("CE-ref min Hessian eigenvalue {lo:.3e} > 0"));

    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let mse = LossSpec::mse(DMatrix::from_fn(n, 3, |_, _| rng.sample(StandardNormal)))?;
    let probe = audit_assumptions(&mse, k0, samples, 2)?;
    let ratio_dev = probe
        .samples
        .iter()
        .map(|z| {
            let (v, g, _) = oracle_loss(&mse, z);
            (g.norm_squared() / (2.0 * v) - 1.0).abs()
        })
        .fold(0.0, f64::max);
    c.at_most("MSE |K₂ − 1|, |μ_C − 1| (library, oracle)", (probe.k2 - 1.0).abs().max((probe.mu_c - 1.0).abs()).max(ratio_dev), 1e-9);
    Ok(c)
}

/// Central finite differences of losses and network outputs.
fn derivative_oracles(_: &mut Monotone) -> Result<Checks> {
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    let (mut g_err, mut h_err) = (0.0f64, 0.0f64);
    for kind in [LossKind::Mse, LossKind::Ce, LossKind::CeRef, LossKind::BrierRef] {
        for _ in 0..10 {
            let n = rng.random_range(1..=4);
            let spec = match kind {
                LossKind::Mse => LossSpec::mse(DMatrix::from_fn(n, 3, |_, _| rng.sample(StandardNormal)))?,
                LossKind::Ce => LossSpec::new(kind, TargetSet::new(random_probs(&mut rng, n, 3)))?,
                LossKind::CeRef => LossSpec::new(kind, TargetSet::new(random_probs(&mut rng, n, 4)))?,
                LossKind::BrierRef => LossSpec::new(kind, TargetSet::new(random_probs(&mut rng, n, 2)))?,
            };
            let dim = spec.dim();
            let z = randn(&mut rng, dim) * 2.0;
            let g = spec.gradient(&z)?;
            let h = spec.hessian(&z)?;
            let mut fd_g = DVector::zeros(dim);
            let mut fd_h = DMatrix::zeros(dim, dim);
            for j in 0..dim {
                let mut e = DVector::zeros(dim);
                e[j] = 1.0;
                fd_g[j] = (spec.value(&(&z + &e * 1e-5))? - spec.value(&(&z - &e * 1e-5))?) / 2e-5;
                fd_h.set_column(j, &((spec.gradient(&(&z + &e * 1e-4))? - spec.gradient(&(&z - &e * 1e-4))?) / 2e-4));
            }
            g_err = g_err.max((&fd_g - &g).norm() / g.norm().max(1e-6));
            h_err = h_err.max((&fd_h - &h).norm() / h.norm().max(1e-6));
        }
    }

    let arch = ArchSpec::uniform(2, 16, 3, 2, 1.5, 0.1);
    let net = NetSnapshot::init(&arch, 7)?;
    let points = random_points(&mut rng, 3, 3);
    let jac = net.jacobian(&points)?;
    let mut j_err = 0.0f64;
    for _ in 0..20 {
        let v = randn(&mut rng, net.param_count()).normalize();
        let plus = NetSnapshot::from_theta(&arch, &net.theta + &v * 1e-5)?.outputs(&points)?;
        let minus = NetSnapshot::from_theta(&arch, &net.theta - &v * 1e-5)?.outputs(&points)?;
        let jv = &jac * &v;
        j_err = j_err.max(((plus - minus) / 2e-5 - &jv).norm() / jv.norm());
    }
    let mut c = Checks::default();
    c.at_most("loss gradients (rel)", g_err, 1e-5);
    c.at_most("loss Hessians (rel)", h_err, 1e-4);
    c.at_most("network Jacobian, 20 directions (rel)", j_err, 1e-5);
    Ok(c)
}

/// Per-step increases gathered by the flow, sweep and tracking criteria.
fn monotonicity(mono: &mut Monotone) -> Result<Checks> {
    let mut c = Checks::default();
    for (what, xs, tol) in [
        ("function-space objective", &mono.function_space, OBJECTIVE_TOL),
        ("parameter-space loss", &mono.parameter_space, LOSS_INCREASE_TOL),
    ] {
        let worst = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        c.at_most(&format!("{what}: max step increase over {} trajectories", xs.len()), if xs.is_empty() { f64::NAN } else { worst }, tol);
    }
    Ok(c)
}

fn main() -> ExitCode {
    let criteria: [(u32, &str, Option<u64>, Criterion); 12] = [
        (1, "dual test-prediction formulas", Some(60), dual_formulas),
        (2, "Newton vs gradient-flow terminal state", Some(120), newton_vs_flow),
        (3, "MSE closed forms", Some(60), mse_closed_forms),
        (4, "Brier stationary points", Some(10), brier_counterexample),
        (5, "kernel Monte-Carlo and NTK convergence", Some(600), kernel_monte_carlo),
        (6, "linearization gap scaling", Some(900), width_scaling),
        (7, "NTK drift ordering", Some(600), tracking_order),
        (8, "pre- vs post-softmax drift", Some(300), prepost_order),
        (9, "ensemble/Laplace gap certificate", Some(60), gap_certificate),
        (10, "loss assumption audit", Some(60), assumption_audit),
        (11, "derivative oracles", Some(120), derivative_oracles),
        (12, "monotone training objectives", None, monotonicity),
    ];
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut mono = Monotone::default();
    let mut failures = 0;
    for (id, name, budget, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let result = run(&mut mono);
        let elapsed = start.elapsed();
        let in_budget = budget.is_none_or(|b| elapsed <= Duration::from_secs(b));
        let (passed, detail) = match result {
            Ok(c) => (c.passed() && in_budget, c.detail()),
            Err(e) => (false, format!("error: {e:#}")),
        };
        let time = match budget {
            Some(b) => format!("{:.1} s of {b} s{}", elapsed.as_secs_f64(), if in_budget { "" } else { ", over budget" }),
            None => format!("{:.1} s", elapsed.as_secs_f64()),
        };
        println!("{} {id:>2} {name}: {detail} [{time}]", if passed { "PASS" } else { "FAIL" });
        failures += usize::from(!passed);
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
