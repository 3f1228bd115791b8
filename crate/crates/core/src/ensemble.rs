//! The distribution of trained predictors induced by random initialization.
//!
//! Prior draws `f₀ ~ N(0, 𝒦 ⊗ I_K)` on train-then-test points are pushed
//! through `Φ⁻¹` and the test-point formula. Linearizing `∇C` at the MAP
//! `g* = Φ⁻¹(0)` gives a Gaussian approximation with `H* = ∇²C(g*)`,
//! `A = ΘH* + βI`:
//!
//! ```text
//! μ_Ens  = Θ_{x'𝐱} Θ⁻¹ g*
//! Σ_Ens  = 𝒦_{x'x'} − 𝒦_{x'𝐱} A⁻ᵀH* Θ_{𝐱x'} − Θ_{x'𝐱} H*A⁻¹ 𝒦_{𝐱x'}
//!          + Θ_{x'𝐱} A⁻ᵀH* 𝒦_{𝐱𝐱} H*A⁻¹ Θ_{𝐱x'}
//! Σ_Lap  = Θ_{x'x'} − Θ_{x'𝐱} H*A⁻¹ Θ_{𝐱x'}
//! ```
//!
//! and, for `𝒦 = Θ`, `Σ_Lap − Σ_Ens = β Θ_{x'𝐱} A⁻ᵀH*A⁻¹ Θ_{𝐱x'} ⪰ 0`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::flow::FlowProblem;
use crate::kernel::KernelPack;
use crate::linalg;
use crate::loss::LossSpec;
use crate::par;
use crate::stats;

/// Relative jitters tried when factorizing the prior covariance.
pub const PRIOR_JITTER_LEVELS: [f64; 3] = [1e-8, 1e-7, 1e-6];
/// Tolerance on the MAP residual.
pub const ANCHOR_RESIDUAL_TOL: f64 = 1e-10;
/// Tolerance on the symmetry of `H*A⁻¹` and on covariance identities.
pub const COV_TOL: f64 = 1e-8;

/// Joint draws on train-then-test points, one per column.
#[derive(Debug, Clone)]
pub struct PriorDraws {
    pub draws: DMatrix<f64>,
    /// Absolute jitter added before factorization.
    pub jitter: f64,
}

/// Draws `n` samples of `N(0, cov ⊗ I_K)` (point-major vectors) from a
/// symmetric `M × M` covariance; classes are independent.
pub fn sample_prior(cov: &DMatrix<f64>, k: usize, n: usize, seed: u64) -> Result<PriorDraws> {
    if cov.nrows() != cov.ncols() {
        return Err(Error::DimensionMismatch {
            context: "prior covariance columns",
            expected: cov.nrows(),
            got: cov.ncols(),
        });
    }
    let m = cov.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws = DMatrix::zeros(m * k, n);
    if m == 0 {
        return Ok(PriorDraws { draws, jitter: 0.0 });
    }
    let (chol, jitter) = linalg::cholesky_escalating(cov, &PRIOR_JITTER_LEVELS)?;
    let l = chol.l();
    for s in 0..n {
        let z = DMatrix::from_fn(m, k, |_, _| StandardNormal.sample(&mut rng));
        let x: DMatrix<f64> = &l * z;
        let mut col = draws.column_mut(s);
        for i in 0..m {
            for c in 0..k {
                col[i * k + c] = x[(i, c)];
            }
        }
    }
    Ok(PriorDraws { draws, jitter })
}

/// Kernels and solver template shared by every draw of an ensemble.
#[derive(Debug, Clone)]
pub struct EnsembleSetup {
    /// Function-space problem with `g₀ = 0`; draws replace `g₀`.
    pub problem: FlowProblem,
    /// Scalar joint prior covariance `𝒦` over train-then-test points.
    pub prior: DMatrix<f64>,
    /// Scalar joint NTK with the training block jittered as in `problem`.
    pub theta_joint: DMatrix<f64>,
    pub n_train: usize,
    /// True when `prior` is `theta_joint`.
    pub ntk_prior: bool,
}

impl EnsembleSetup {
    /// Analytic setup from a pack over train-then-test points; the prior is
    /// the NNGP kernel.
    pub fn from_pack(pack: &KernelPack, n_train: usize, spec: LossSpec, beta: f64, eta0: f64) -> Result<Self> {
        let k = pack.output_dim;
        let problem = FlowProblem::from_joint_pack(pack, n_train, spec, beta, eta0, &DVector::zeros(pack.len() * k))?;
        let mut theta_joint = pack.ntk.clone();
        for i in 0..n_train {
            theta_joint[(i, i)] += problem.jitter();
        }
        Ok(Self {
            problem,
            prior: pack.nngp.clone(),
            theta_joint,
            n_train,
            ntk_prior: false,
        })
    }

    /// Uses `𝒦 = Θ`.
    pub fn with_ntk_prior(mut self) -> Self {
        self.prior = self.theta_joint.clone();
        self.ntk_prior = true;
        self
    }

    /// Replaces the prior covariance (scalar, train-then-test).
    pub fn with_prior(mut self, prior: DMatrix<f64>) -> Result<Self> {
        check_len("prior covariance", self.theta_joint.nrows(), prior.nrows())?;
        check_len("prior covariance columns", self.theta_joint.ncols(), prior.ncols())?;
        self.prior = prior;
        self.ntk_prior = false;
        Ok(self)
    }

    pub fn with_beta(mut self, beta: f64) -> Result<Self> {
        self.problem = self.problem.with_beta(beta)?;
        Ok(self)
    }

    pub fn k(&self) -> usize {
        self.problem.k()
    }

    pub fn n_test(&self) -> usize {
        self.theta_joint.nrows() - self.n_train
    }

    fn block(&self, m: &DMatrix<f64>, rows: (usize, usize), cols: (usize, usize)) -> DMatrix<f64> {
        linalg::kron_expand(&m.view((rows.0, cols.0), (rows.1, cols.1)).into_owned(), self.k())
    }

    fn split(&self, m: &DMatrix<f64>) -> Blocks {
        let (n, t) = (self.n_train, self.n_test());
        Blocks {
            train: self.block(m, (0, n), (0, n)),
            cross: self.block(m, (n, t), (0, n)),
            test: self.block(m, (n, t), (n, t)),
        }
    }
}

/// `NK`-expanded blocks of a joint scalar kernel.
struct Blocks {
    train: DMatrix<f64>,
    /// Test rows, train columns.
    cross: DMatrix<f64>,
    test: DMatrix<f64>,
}

/// Trained prediction at the test points for one prior draw (train-then-test
/// vector): `Φ⁻¹(βf₀(𝐱))` followed by formula A.
pub fn push_through(template: &FlowProblem, draw: &DVector<f64>) -> Result<DVector<f64>> {
    let nk = template.spec.dim();
    check_len("prior draw", nk + template.g0_test.len(), draw.len())?;
    let p = template.with_g0(draw.rows(0, nk).into_owned(), draw.rows(nk, draw.len() - nk).into_owned())?;
    Ok(p.solve()?.1.formula_a)
}

/// Pushed-through draws; failed draws are listed and excluded.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleDraws {
    /// `(draw index, test prediction)` in index order.
    pub predictions: Vec<(usize, DVector<f64>)>,
    pub failures: Vec<(usize, String)>,
}

impl EnsembleDraws {
    pub fn failure_rate(&self) -> f64 {
        let total = self.predictions.len() + self.failures.len();
        if total == 0 {
            0.0
        } else {
            self.failures.len() as f64 / total as f64
        }
    }

    /// Sample mean and (unbiased) covariance of the successful predictions.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let dim = self.predictions.first().map_or(0, |(_, p)| p.len());
        let n = self.predictions.len();
        let mut mean = DVector::zeros(dim);
        for (_, p) in &self.predictions {
            mean += p;
        }
        if n > 0 {
            mean /= n as f64;
        }
        let mut cov = DMatrix::zeros(dim, dim);
        for (_, p) in &self.predictions {
            let d = p - &mean;
            cov.ger(1.0, &d, &d, 1.0);
        }
        if n > 1 {
            cov /= (n - 1) as f64;
        }
        (mean, cov)
    }

    /// Per-coordinate samples of the predictions.
    pub fn coordinate(&self, j: usize) -> Vec<f64> {
        self.predictions.iter().map(|(_, p)| p[j]).collect()
    }
}

/// Draws from the setup's prior and pushes every draw through the solver.
pub fn run_ensemble(setup: &EnsembleSetup, n: usize, seed: u64) -> Result<EnsembleDraws> {
    let prior = sample_prior(&setup.prior, setup.k(), n, seed)?;
    let cols: Vec<DVector<f64>> = prior.draws.column_iter().map(|c| c.into_owned()).collect();
    let results = par::map(&cols, |_, d| push_through(&setup.problem, d));
    let mut draws = EnsembleDraws {
        predictions: Vec::new(),
        failures: Vec::new(),
    };
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(p) => draws.predictions.push((i, p)),
            Err(e) => draws.failures.push((i, e.to_string())),
        }
    }
    Ok(draws)
}

/// Linearization point of the ensemble approximation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapAnchor {
    pub g_star: DVector<f64>,
    pub h_star: DMatrix<f64>,
    pub a_matrix: DMatrix<f64>,
    /// `H* A⁻¹` (symmetric).
    pub h_a_inv: DMatrix<f64>,
    pub residual: f64,
}

impl MapAnchor {
    /// Solves `Θ∇C(g*) + βg* = 0` and forms `H*`, `A`, `H*A⁻¹`.
    pub fn new(problem: &FlowProblem) -> Result<Self> {
        let nk = problem.spec.dim();
        let report = problem.phi_inverse(&DVector::zeros(nk))?;
        let g_star = report.z;
        let residual = problem.phi_apply(&g_star)?.norm();
        if residual > ANCHOR_RESIDUAL_TOL {
            return Err(Error::NewtonStagnation {
                iterations: report.iterations,
                residual,
                last: g_star,
            });
        }
        let h_star = problem.spec.hessian(&g_star)?;
        let a_matrix = problem.phi_jacobian(&g_star)?;
        let a_inv = a_matrix.clone().try_inverse().ok_or(Error::SingularNewton { iteration: 0 })?;
        if !a_inv.iter().all(|v| v.is_finite()) {
            return Err(Error::SingularNewton { iteration: 0 });
        }
        let h_a_inv = &h_star * a_inv;
        let asym = linalg::asymmetry(&h_a_inv);
        let tol = COV_TOL * linalg::max_abs(&h_a_inv).max(1.0);
        if asym > tol {
            return Err(Error::Asymmetric { asymmetry: asym, tolerance: tol });
        }
        Ok(Self {
            g_star,
            h_star,
            a_matrix,
            h_a_inv: linalg::symmetrize(&h_a_inv),
            residual,
        })
    }

    fn a_inv(&self) -> Result<DMatrix<f64>> {
        self.a_matrix.clone().try_inverse().ok_or(Error::SingularNewton { iteration: 0 })
    }
}

/// `(μ_Ens, Σ_Ens)` by the general four-term formula.
pub fn gaussian_approx(anchor: &MapAnchor, setup: &EnsembleSetup) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let th = setup.split(&setup.theta_joint);
    let kk = setup.split(&setup.prior);
    let mu = &th.cross * setup.problem.theta_solve(&anchor.g_star);
    // M = H*A⁻¹ Θ_{𝐱x'}; A⁻ᵀH* = (H*A⁻¹)ᵀ.
    let m = &anchor.h_a_inv * th.cross.transpose();
    let kx = kk.cross.clone();
    let sigma = &kk.test - &kx * &m - m.transpose() * kx.transpose() + m.transpose() * &kk.train * &m;
    Ok((mu, symmetric_checked(sigma)?))
}

/// `Σ_Ens` for `𝒦 = Θ`: `Θ'' − Θ'(H*A⁻¹ + βA⁻ᵀH*A⁻¹)Θ'ᵀ`.
pub fn gaussian_approx_ntk_prior(anchor: &MapAnchor, setup: &EnsembleSetup) -> Result<DMatrix<f64>> {
    let th = setup.split(&setup.theta_joint);
    let a_inv = anchor.a_inv()?;
    let beta = setup.problem.beta;
    let inner = &anchor.h_a_inv + a_inv.transpose() * &anchor.h_star * &a_inv * beta;
    symmetric_checked(&th.test - &th.cross * inner * th.cross.transpose())
}

/// Laplace covariance `Θ'' − Θ' H*A⁻¹ Θ'ᵀ`.
pub fn laplace_cov(anchor: &MapAnchor, setup: &EnsembleSetup) -> Result<DMatrix<f64>> {
    let th = setup.split(&setup.theta_joint);
    symmetric_checked(&th.test - &th.cross * &anchor.h_a_inv * th.cross.transpose())
}

/// Closed-form gap `β Θ' A⁻ᵀH*A⁻¹ Θ'ᵀ`.
pub fn closed_form_gap(anchor: &MapAnchor, setup: &EnsembleSetup) -> Result<DMatrix<f64>> {
    let th = setup.split(&setup.theta_joint);
    let a_inv = anchor.a_inv()?;
    let m = &a_inv * th.cross.transpose();
    Ok(linalg::symmetrize(&(m.transpose() * &anchor.h_star * m * setup.problem.beta)))
}

fn symmetric_checked(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let asym = linalg::asymmetry(&m);
    let tol = COV_TOL * linalg::max_abs(&m).max(1.0);
    if asym > tol {
        return Err(Error::Asymmetric { asymmetry: asym, tolerance: tol });
    }
    Ok(linalg::symmetrize(&m))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapCertificate {
    /// `λ_min(Σ_Lap − Σ_Ens)`.
    pub min_eig: f64,
    pub trace_lap: f64,
    /// `max |(Σ_Lap − Σ_Ens) − β Θ'A⁻ᵀH*A⁻¹Θ'ᵀ|`.
    pub closed_form_error: f64,
    /// `λ_min ≥ −10⁻⁸·tr Σ_Lap`.
    pub psd: bool,
    /// Closed-form agreement within `10⁻⁸·max(1, max|Σ_Lap|)`.
    pub agrees: bool,
}

/// PSD certificate of `Σ_Lap − Σ_Ens` (general formula) for `𝒦 = Θ`.
pub fn gap_certificate(anchor: &MapAnchor, setup: &EnsembleSetup) -> Result<GapCertificate> {
    if !setup.ntk_prior {
        return Err(Error::InvalidArgument("gap certificate requires the prior 𝒦 = Θ".into()));
    }
    let lap = laplace_cov(anchor, setup)?;
    let (_, ens) = gaussian_approx(anchor, setup)?;
    let gap = &lap - &ens;
    let closed = closed_form_gap(anchor, setup)?;
    let trace_lap = linalg::trace(&lap);
    let min_eig = if gap.is_empty() { 0.0 } else { linalg::min_eigenvalue(&gap) };
    let closed_form_error = if gap.is_empty() { 0.0 } else { linalg::max_abs(&(&gap - closed)) };
    Ok(GapCertificate {
        min_eig,
        trace_lap,
        closed_form_error,
        psd: min_eig >= -COV_TOL * trace_lap.abs(),
        agrees: closed_form_error <= COV_TOL * linalg::max_abs(&lap).max(1.0),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub n_samples: usize,
    pub failure_rate: f64,
    pub mean_test: DVector<f64>,
    pub cov_test: DMatrix<f64>,
    pub mu_ens: DVector<f64>,
    pub sigma_ens: DMatrix<f64>,
    pub sigma_lap: DMatrix<f64>,
    pub gap_min_eig: f64,
    pub sigma_ens_eigenvalues: Vec<f64>,
    pub sigma_lap_eigenvalues: Vec<f64>,
    pub k: usize,
}

/// Scalars and spectra of a summary, for JSON export.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryScalars {
    pub n_samples: usize,
    pub failure_rate: f64,
    pub gap_min_eig: f64,
    pub trace_sigma_ens: f64,
    pub trace_sigma_lap: f64,
    pub trace_cov_test: f64,
    pub sigma_ens_eigenvalues: Vec<f64>,
    pub sigma_lap_eigenvalues: Vec<f64>,
}

impl EnsembleSummary {
    pub fn build(setup: &EnsembleSetup, anchor: &MapAnchor, draws: &EnsembleDraws) -> Result<Self> {
        let (mean_test, cov_test) = draws.moments();
        let (mu_ens, sigma_ens) = gaussian_approx(anchor, setup)?;
        let sigma_lap = laplace_cov(anchor, setup)?;
        let gap = &sigma_lap - &sigma_ens;
        Ok(Self {
            n_samples: draws.predictions.len(),
            failure_rate: draws.failure_rate(),
            gap_min_eig: if gap.is_empty() { 0.0 } else { linalg::min_eigenvalue(&gap) },
            sigma_ens_eigenvalues: linalg::sym_eigenvalues(&sigma_ens),
            sigma_lap_eigenvalues: linalg::sym_eigenvalues(&sigma_lap),
            mean_test,
            cov_test,
            mu_ens,
            sigma_ens,
            sigma_lap,
            k: setup.k(),
        })
    }

    pub fn scalars(&self) -> SummaryScalars {
        SummaryScalars {
            n_samples: self.n_samples,
            failure_rate: self.failure_rate,
            gap_min_eig: self.gap_min_eig,
            trace_sigma_ens: linalg::trace(&self.sigma_ens),
            trace_sigma_lap: linalg::trace(&self.sigma_lap),
            trace_cov_test: linalg::trace(&self.cov_test),
            sigma_ens_eigenvalues: self.sigma_ens_eigenvalues.clone(),
            sigma_lap_eigenvalues: self.sigma_lap_eigenvalues.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.scalars())?)
    }

    /// Per test point and class: empirical mean/variance and quantiles,
    /// `μ_Ens`, and the `Σ_Ens` / `Σ_Lap` marginal variances.
    pub fn write_csv<W: Write>(&self, draws: &EnsembleDraws, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["point", "class", "mean", "var", "q05", "q50", "q95", "mu_ens", "var_ens", "var_lap"])?;
        for j in 0..self.mean_test.len() {
            let xs = draws.coordinate(j);
            let row = [
                (j / self.k).to_string(),
                (j % self.k).to_string(),
                self.mean_test[j].to_string(),
                self.cov_test[(j, j)].to_string(),
                stats::quantile(&xs, 0.05).to_string(),
                stats::quantile(&xs, 0.5).to_string(),
                stats::quantile(&xs, 0.95).to_string(),
                self.mu_ens[j].to_string(),
                self.sigma_ens[(j, j)].to_string(),
                self.sigma_lap[(j, j)].to_string(),
            ];
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{assemble_pack, ArchSpec};
    use crate::loss::{LossKind, TargetSet};
    use rand::Rng;

    fn pts(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<DVector<f64>> {
        (0..n).map(|_| DVector::from_fn(d, |_, _| rng.sample(StandardNormal))).collect()
    }

    fn setup(seed: u64, kind: LossKind, beta: f64, n: usize, m: usize) -> EnsembleSetup {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logit = 2;
        let arch = ArchSpec::uniform(2, 1, 3, logit, 1.5, 0.1);
        let mut all = pts(&mut rng, n, 3);
        all.extend(pts(&mut rng, m, 3));
        let pack = assemble_pack(&arch, &all).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i % kind.target_columns(logit)).collect();
        let spec = match kind {
            LossKind::Mse => LossSpec::mse(DMatrix::from_fn(n, logit, |i, j| ((i * 3 + j) as f64).cos())).unwrap(),
            _ => LossSpec::new(kind, TargetSet::one_hot(&labels, kind.target_columns(logit)).unwrap()).unwrap(),
        };
        EnsembleSetup::from_pack(&pack, n, spec, beta, 1.0).unwrap()
    }

    #[test]
    fn prior_draws_match_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let arch = ArchSpec::uniform(2, 1, 3, 1, 1.5, 0.1);
        let pack = assemble_pack(&arch, &pts(&mut rng, 4, 3)).unwrap();
        let n = 10_000;
        let d = sample_prior(&pack.nngp, 2, n, 5).unwrap();
        let again = sample_prior(&pack.nngp, 2, n, 5).unwrap();
        assert_eq!(d.draws, again.draws);
        let kfull = linalg::kron_expand(&pack.nngp, 2);
        for i in 0..8 {
            let row: Vec<f64> = d.draws.row(i).iter().copied().collect();
            assert!(stats::mean(&row).abs() <= 3.0 * (kfull[(i, i)] / n as f64).sqrt());
            for j in 0..8 {
                let prod: Vec<f64> = (0..n).map(|s| d.draws[(i, s)] * d.draws[(j, s)]).collect();
                let se = stats::std_err(&prod);
                assert!((stats::mean(&prod) - kfull[(i, j)]).abs() <= 3.0 * se + 1e-12, "{i} {j}");
            }
        }
    }

    #[test]
    fn mse_push_through_is_affine() {
        let s = setup(2, LossKind::Mse, 0.5, 5, 3);
        let draws = sample_prior(&s.prior, s.k(), 20, 9).unwrap();
        let th = s.split(&s.theta_joint);
        let y = s.problem.spec.target_vector();
        for d in draws.draws.column_iter() {
            let d = d.into_owned();
            let (f0, f0t) = (d.rows(0, 10).into_owned(), d.rows(10, 6).into_owned());
            let want = &f0t + &th.cross * (&th.train + DMatrix::identity(10, 10) * 0.5).lu().solve(&(&y - &f0)).unwrap();
            assert!((push_through(&s.problem, &d).unwrap() - want).amax() < 1e-8);
        }
    }

    #[test]
    fn huge_beta_returns_prior_draw() {
        let s = setup(3, LossKind::Ce, 1e4, 5, 3);
        let draws = sample_prior(&s.prior, s.k(), 5, 1).unwrap();
        for d in draws.draws.column_iter() {
            let out = push_through(&s.problem, &d.into_owned()).unwrap();
            assert!((out - d.rows(10, 6)).norm() <= 1e-2);
        }
    }

    #[test]
    fn empty_test_set() {
        let s = setup(4, LossKind::Ce, 0.1, 4, 0);
        let draws = run_ensemble(&s, 3, 0).unwrap();
        assert!(draws.predictions.iter().all(|(_, p)| p.is_empty()));
        assert_eq!(draws.failure_rate(), 0.0);
    }

    #[test]
    fn anchor_invariants() {
        let s = setup(5, LossKind::Ce, 0.1, 5, 3);
        let a = MapAnchor::new(&s.problem).unwrap();
        assert!(s.problem.phi_apply(&a.g_star).unwrap().norm() <= ANCHOR_RESIDUAL_TOL);
        assert!(linalg::asymmetry(&(&a.h_star * a.a_matrix.clone().try_inverse().unwrap())) <= 1e-8);
    }

    #[test]
    fn ntk_prior_path_matches_general_path() {
        for (seed, kind) in [(6, LossKind::Ce), (7, LossKind::CeRef), (8, LossKind::Mse)] {
            let s = setup(seed, kind, 0.2, 5, 4).with_ntk_prior();
            let a = MapAnchor::new(&s.problem).unwrap();
            let (_, general) = gaussian_approx(&a, &s).unwrap();
            let simple = gaussian_approx_ntk_prior(&a, &s).unwrap();
            assert!((general - simple).amax() < 1e-10);
        }
    }

    #[test]
    fn beta_zero_pins_train_points() {
        // Test set equal to the training set: Σ_Ens vanishes at β = 0.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let arch = ArchSpec::uniform(2, 1, 3, 2, 1.5, 0.1);
        let train = pts(&mut rng, 4, 3);
        let all: Vec<_> = train.iter().chain(&train).cloned().collect();
        let pack = assemble_pack(&arch, &all).unwrap();
        let spec = LossSpec::new(LossKind::CeRef, TargetSet::smoothed(&[0, 1, 2, 0], 3, 0.1).unwrap()).unwrap();
        let s = EnsembleSetup::from_pack(&pack, 4, spec, 0.0, 1.0).unwrap();
        // The test copy of the training block carries the same jitter.
        let mut theta_joint = s.theta_joint.clone();
        for i in 4..8 {
            theta_joint[(i, i)] += s.problem.jitter();
            for j in 0..4 {
                theta_joint[(i, j)] = theta_joint[(i - 4, j)];
                theta_joint[(j, i)] = theta_joint[(j, i - 4)];
            }
        }
        let s = EnsembleSetup { theta_joint, ..s }.with_ntk_prior();
        let a = MapAnchor::new(&s.problem).unwrap();
        let (mu, sigma) = gaussian_approx(&a, &s).unwrap();
        assert!(linalg::max_abs(&sigma) < 1e-8, "{}", linalg::max_abs(&sigma));
        assert!((mu - &a.g_star).amax() < 1e-8);
        let cert = gap_certificate(&a, &s).unwrap();
        assert!(cert.closed_form_error < 1e-10 && cert.min_eig.abs() < 1e-10);
    }

    #[test]
    fn laplace_limits() {
        let s = setup(10, LossKind::Ce, 1e4, 5, 3);
        let a = MapAnchor::new(&s.problem).unwrap();
        let lap = laplace_cov(&a, &s).unwrap();
        let th = s.split(&s.theta_joint);
        assert!(linalg::max_abs(&(&lap - &th.test)) <= 1e-2 * linalg::max_abs(&th.test));

        let s = setup(11, LossKind::Mse, 1.0, 5, 3);
        let a = MapAnchor::new(&s.problem).unwrap();
        let lap = laplace_cov(&a, &s).unwrap();
        let th = s.split(&s.theta_joint);
        let inv = (&th.train + DMatrix::identity(10, 10)).try_inverse().unwrap();
        let gp = &th.test - &th.cross * inv * th.cross.transpose();
        assert!(linalg::max_abs(&(&lap - gp)) < 1e-8);
        assert!(linalg::min_eigenvalue(&lap) >= -1e-8 * linalg::trace(&lap));

        let s = s.with_ntk_prior();
        let cert = gap_certificate(&a, &s).unwrap();
        let big_a = &th.train + DMatrix::identity(10, 10);
        let ai = big_a.try_inverse().unwrap();
        let direct = &th.cross * ai.transpose() * &ai * th.cross.transpose();
        let gap = laplace_cov(&a, &s).unwrap() - gaussian_approx(&a, &s).unwrap().1;
        assert!(linalg::max_abs(&(gap - direct)) < 1e-8);
        assert!(cert.psd && cert.agrees);
    }

    #[test]
    fn smaller_prior_gives_smaller_covariance() {
        let s = setup(12, LossKind::Ce, 0.1, 5, 3).with_ntk_prior();
        let a = MapAnchor::new(&s.problem).unwrap();
        let (_, full) = gaussian_approx(&a, &s).unwrap();
        let half = s.clone().with_prior(&s.theta_joint * 0.5).unwrap();
        let (_, reduced) = gaussian_approx(&a, &half).unwrap();
        let diff = full - reduced;
        assert!(linalg::min_eigenvalue(&diff) >= -1e-8 * linalg::trace(&diff).abs());
    }

    #[test]
    fn mse_gaussian_approximation_is_exact() {
        let s = setup(13, LossKind::Mse, 0.3, 4, 2);
        let draws = run_ensemble(&s, 10_000, 21).unwrap();
        assert!(draws.failures.is_empty());
        let a = MapAnchor::new(&s.problem).unwrap();
        let summary = EnsembleSummary::build(&s, &a, &draws).unwrap();
        let n = draws.predictions.len() as f64;
        for i in 0..summary.mean_test.len() {
            let se = (summary.sigma_ens[(i, i)] / n).sqrt();
            assert!((summary.mean_test[i] - summary.mu_ens[i]).abs() <= 3.0 * se);
            for j in 0..summary.mean_test.len() {
                // Var of the product of two centered Gaussians.
                let (sii, sjj, sij) = (summary.sigma_ens[(i, i)], summary.sigma_ens[(j, j)], summary.sigma_ens[(i, j)]);
                let se = ((sii * sjj + sij * sij) / n).sqrt();
                assert!((summary.cov_test[(i, j)] - sij).abs() <= 3.0 * se, "{i} {j}");
            }
        }
        let mut buf = Vec::new();
        summary.write_csv(&draws, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 5);
        assert!(summary.to_json().unwrap().contains("gap_min_eig"));
    }

    #[test]
    fn push_through_minimizes_map_objective() {
        let s = setup(14, LossKind::Ce, 0.1, 5, 2);
        let draws = sample_prior(&s.prior, s.k(), 5, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        for d in draws.draws.column_iter() {
            let p = s.problem.with_g0(d.rows(0, 10).into_owned(), d.rows(10, 4).into_owned()).unwrap();
            let z = p.phi_inverse(&(&p.g0_train * p.beta)).unwrap().z;
            assert!(p.stationarity_residual(&z).unwrap().norm() <= 1e-8);
            let base = p.map_objective(&z).unwrap();
            for _ in 0..100 {
                let mut v = DVector::from_fn(10, |_, _| rng.sample::<f64, _>(StandardNormal));
                v *= 1e-2 / v.norm();
                assert!(p.map_objective(&(&z + v)).unwrap() >= base);
            }
        }
    }
}
