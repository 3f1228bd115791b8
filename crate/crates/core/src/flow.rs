//! Function-space gradient flow driven by a fixed kernel.
//!
//! On training points `𝐱` and test points `x'` the flow is
//!
//! ```text
//! dg/dt = −η₀ (Θ_{·,𝐱} ∇C(g(𝐱)) + β (g − g₀))
//! ```
//!
//! Its stationary point on the training set solves `Φ(z) = βg₀(𝐱)` with
//! `Φ(z) = Θ∇C(z) + βz`; test predictions follow from either
//! `g₀(x') + Θ_{x',𝐱}Θ⁻¹(z − g₀(𝐱))` or, for `β > 0`,
//! `g₀(x') − Θ_{x',𝐱}∇C(z)/β`.
//!
//! The training kernel is jittered once (`+ jitter·I`) and the jittered matrix
//! is used everywhere: in `Φ`, in the ODE and in every solve.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::kernel::{self, ArchSpec, KernelPack};
use crate::linalg::{self, SymFactor, DEFAULT_JITTER};
use crate::loss::{self, LossKind, LossSpec};
use crate::ode::{self, OdeOptions, OdeStatus, StepControl};

/// A kernel acting on point-major function-space vectors: either a scalar
/// kernel expanded as `mat ⊗ I_K`, or an explicit `(N·K)`-sized matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputKernel {
    mat: DMatrix<f64>,
    k: usize,
    full: bool,
}

impl OutputKernel {
    pub fn scalar(mat: DMatrix<f64>, k: usize) -> Self {
        Self { mat, k, full: false }
    }

    pub fn full(mat: DMatrix<f64>, k: usize) -> Self {
        Self { mat, k, full: true }
    }

    pub fn is_full(&self) -> bool {
        self.full
    }

    /// The stored matrix (scalar or full).
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    pub fn out_dim(&self) -> usize {
        if self.full {
            self.mat.nrows()
        } else {
            self.mat.nrows() * self.k
        }
    }

    pub fn in_dim(&self) -> usize {
        if self.full {
            self.mat.ncols()
        } else {
            self.mat.ncols() * self.k
        }
    }

    pub fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        if self.full {
            &self.mat * v
        } else {
            linalg::kron_apply(&self.mat, v, self.k)
        }
    }

    /// Dense `(N·K)`-sized form.
    pub fn dense(&self) -> DMatrix<f64> {
        if self.full {
            self.mat.clone()
        } else {
            linalg::kron_expand(&self.mat, self.k)
        }
    }

    fn add_diagonal(&self, v: f64) -> Self {
        let mut m = self.mat.clone();
        for i in 0..m.nrows().min(m.ncols()) {
            m[(i, i)] += v;
        }
        Self { mat: m, ..*self }
    }
}

/// Per-run Newton settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonOptions {
    pub max_iter: usize,
    /// Residual tolerance relative to `1 + ‖rhs‖`.
    pub rel_tol: f64,
    pub max_halvings: usize,
    /// Gradient-flow steps used to precondition when the first Newton step
    /// cannot decrease the residual.
    pub fallback_steps: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            rel_tol: 1e-10,
            max_halvings: 40,
            fallback_steps: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewtonReport {
    pub z: DVector<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub used_fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowState {
    pub t: f64,
    pub g_train: DVector<f64>,
    pub g_test: DVector<f64>,
    /// `‖Θ∇C(g) + β(g − g₀)‖` on the training points.
    pub grad_norm: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowTrajectory {
    pub states: Vec<FlowState>,
    /// MAP objective `C(g) + (β/2)(g − g₀)ᵀΘ⁻¹(g − g₀)` per recorded state.
    pub objective: Vec<f64>,
    /// Largest increase of the objective between consecutive accepted steps.
    pub max_objective_increase: f64,
    /// Largest violation of `g(x') − g₀(x') = Θ_{x',𝐱}Θ⁻¹(g(𝐱) − g₀(𝐱))`.
    pub max_identity_violation: f64,
    pub status: OdeStatus,
    pub accepted_steps: usize,
}

impl FlowTrajectory {
    pub fn last(&self) -> &FlowState {
        self.states.last().expect("trajectory holds the initial state")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestPrediction {
    pub formula_a: DVector<f64>,
    pub formula_b: Option<DVector<f64>>,
    pub difference: Option<f64>,
}

/// Tolerance on the per-step increase of the MAP objective.
pub const OBJECTIVE_TOL: f64 = 1e-8;
/// Tolerance on the kernel integration identity.
pub const IDENTITY_TOL: f64 = 1e-6;
/// Largest relative Newton step accepted at a converged root.
pub const NEWTON_STEP_TOL: f64 = 1e-6;
/// Tolerance on the agreement of the two prediction formulas.
pub const FORMULA_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct FlowProblem {
    theta_raw: OutputKernel,
    theta: OutputKernel,
    cross: OutputKernel,
    factor: SymFactor,
    jitter: f64,
    rel_jitter: f64,
    pub spec: LossSpec,
    pub beta: f64,
    pub eta0: f64,
    pub g0_train: DVector<f64>,
    pub g0_test: DVector<f64>,
    pub newton: NewtonOptions,
    pub ode: OdeOptions,
}

impl FlowProblem {
    /// Problem on explicit kernels. `theta_train` is `N × N` (or `NK × NK`
    /// when `full`), `theta_cross` is `N' × N` (or `N'K × NK`).
    #[allow(clippy::too_many_arguments)]
    pub fn from_kernels(
        theta_train: OutputKernel,
        theta_cross: OutputKernel,
        spec: LossSpec,
        beta: f64,
        eta0: f64,
        g0_train: DVector<f64>,
        g0_test: DVector<f64>,
    ) -> Result<Self> {
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta must be nonnegative, got {beta}")));
        }
        if !(eta0 > 0.0 && eta0.is_finite()) {
            return Err(Error::InvalidArgument(format!("eta0 must be positive, got {eta0}")));
        }
        let nk = spec.dim();
        check_len("train kernel", nk, theta_train.out_dim())?;
        check_len("train kernel columns", nk, theta_train.in_dim())?;
        check_len("cross kernel columns", nk, theta_cross.in_dim())?;
        check_len("g0 on train points", nk, g0_train.len())?;
        check_len("g0 on test points", theta_cross.out_dim(), g0_test.len())?;
        if theta_train.k != spec.k() || theta_cross.k != spec.k() {
            return Err(Error::DimensionMismatch {
                context: "kernel output dimension",
                expected: spec.k(),
                got: theta_train.k,
            });
        }
        let mut p = Self {
            factor: SymFactor::new(&DMatrix::identity(1, 1))?,
            theta: theta_train.clone(),
            theta_raw: theta_train,
            cross: theta_cross,
            jitter: 0.0,
            rel_jitter: DEFAULT_JITTER,
            spec,
            beta,
            eta0,
            g0_train,
            g0_test,
            newton: NewtonOptions::default(),
            ode: OdeOptions::default(),
        };
        p.refactor()?;
        Ok(p)
    }

    /// Problem on a pack over train-then-test points (first `n_train` rows are
    /// training points). `g0` covers all points.
    pub fn from_joint_pack(pack: &KernelPack, n_train: usize, spec: LossSpec, beta: f64, eta0: f64, g0: &DVector<f64>) -> Result<Self> {
        let n = pack.len();
        if n_train > n {
            return Err(Error::InvalidArgument(format!("n_train {n_train} exceeds pack size {n}")));
        }
        let k = pack.output_dim;
        check_len("g0 on all points", n * k, g0.len())?;
        let train = pack.ntk.view((0, 0), (n_train, n_train)).into_owned();
        let cross = pack.ntk.view((n_train, 0), (n - n_train, n_train)).into_owned();
        Self::from_kernels(
            OutputKernel::scalar(train, k),
            OutputKernel::scalar(cross, k),
            spec,
            beta,
            eta0,
            g0.rows(0, n_train * k).into_owned(),
            g0.rows(n_train * k, (n - n_train) * k).into_owned(),
        )
    }

    /// Analytic-kernel problem built from an architecture and point sets.
    #[allow(clippy::too_many_arguments)]
    pub fn from_arch(
        arch: &ArchSpec,
        train: &[DVector<f64>],
        test: &[DVector<f64>],
        spec: LossSpec,
        beta: f64,
        eta0: f64,
        g0_train: DVector<f64>,
        g0_test: DVector<f64>,
    ) -> Result<Self> {
        let (_, theta) = kernel::cross_kernels(arch, train, train)?;
        let (_, cross) = kernel::cross_kernels(arch, test, train)?;
        let k = arch.output_dim;
        Self::from_kernels(OutputKernel::scalar(theta, k), OutputKernel::scalar(cross, k), spec, beta, eta0, g0_train, g0_test)
    }

    /// Replaces the relative jitter (`jitter = rel · trace / n`).
    pub fn with_jitter(mut self, rel: f64) -> Result<Self> {
        self.rel_jitter = rel;
        self.refactor()?;
        Ok(self)
    }

    pub fn with_newton(mut self, newton: NewtonOptions) -> Self {
        self.newton = newton;
        self
    }

    pub fn with_ode(mut self, ode: OdeOptions) -> Self {
        self.ode = ode;
        self
    }

    /// Same kernels and loss with a different initial function.
    pub fn with_g0(&self, g0_train: DVector<f64>, g0_test: DVector<f64>) -> Result<Self> {
        check_len("g0 on train points", self.g0_train.len(), g0_train.len())?;
        check_len("g0 on test points", self.g0_test.len(), g0_test.len())?;
        Ok(Self {
            g0_train,
            g0_test,
            ..self.clone()
        })
    }

    pub fn with_beta(&self, beta: f64) -> Result<Self> {
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta must be nonnegative, got {beta}")));
        }
        Ok(Self { beta, ..self.clone() })
    }

    fn refactor(&mut self) -> Result<()> {
        self.jitter = linalg::jitter_for(&self.theta_raw.mat, self.rel_jitter);
        let jittered = self.theta_raw.add_diagonal(self.jitter);
        self.factor = SymFactor::new(&jittered.mat).map_err(|e| match e {
            Error::NotPositiveDefinite { min_eigenvalue, .. } => Error::NotPositiveDefinite {
                min_eigenvalue,
                jitter: self.jitter,
            },
            other => other,
        })?;
        self.theta = jittered;
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.spec.k()
    }

    pub fn n_train(&self) -> usize {
        self.spec.n()
    }

    pub fn n_test(&self) -> usize {
        self.g0_test.len() / self.k()
    }

    /// Absolute jitter added to the training kernel.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn condition_number(&self) -> f64 {
        self.factor.condition_number()
    }

    /// Jittered training kernel.
    pub fn theta(&self) -> &OutputKernel {
        &self.theta
    }

    pub fn cross(&self) -> &OutputKernel {
        &self.cross
    }

    /// `(Θ⁻¹ ⊗ I) v` with the jittered training kernel.
    pub fn theta_solve(&self, v: &DVector<f64>) -> DVector<f64> {
        if self.theta.full {
            self.factor.solve_mat(&DMatrix::from_column_slice(v.len(), 1, v.as_slice())).column(0).into_owned()
        } else {
            self.factor.solve_kron(v, self.k())
        }
    }

    /// Dense inverse of the jittered training kernel in `NK` form.
    pub fn theta_inverse_dense(&self) -> DMatrix<f64> {
        let inv = self.factor.inverse();
        if self.theta.full {
            inv
        } else {
            linalg::kron_expand(&inv, self.k())
        }
    }

    /// `Φ(z) = Θ∇C(z) + βz`.
    pub fn phi_apply(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        let g = self.spec.gradient(z)?;
        Ok(self.theta.apply(&g) + z * self.beta)
    }

    /// Jacobian `Θ∇²C(z) + βI` of `Φ`.
    pub fn phi_jacobian(&self, z: &DVector<f64>) -> Result<DMatrix<f64>> {
        let h = self.spec.hessian(z)?;
        let mut j = self.theta.dense() * h;
        for i in 0..j.nrows() {
            j[(i, i)] += self.beta;
        }
        Ok(j)
    }

    /// Stationarity residual `Θ∇C(g) + β(g − g₀)` on training points.
    pub fn stationarity_residual(&self, g: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.phi_apply(g)? - &self.g0_train * self.beta)
    }

    /// `C(g) + (β/2)(g − g₀)ᵀΘ⁻¹(g − g₀)`.
    pub fn map_objective(&self, g: &DVector<f64>) -> Result<f64> {
        let c = self.spec.value(g)?;
        if self.beta == 0.0 {
            return Ok(c);
        }
        let d = g - &self.g0_train;
        Ok(c + 0.5 * self.beta * d.dot(&self.theta_solve(&d)))
    }

    fn check_newton_applicable(&self) -> Result<()> {
        if self.beta == 0.0 && self.spec.kind == LossKind::Ce {
            // The CE Hessian annihilates per-block constants, so Θ∇²C is
            // singular; the centered route handles this case.
            return Err(Error::SingularNewton { iteration: 0 });
        }
        Ok(())
    }

    /// Solves `Φ(z) = rhs` by damped Newton.
    pub fn phi_inverse(&self, rhs: &DVector<f64>) -> Result<NewtonReport> {
        let start = if self.beta > 0.0 { rhs / self.beta } else { DVector::zeros(rhs.len()) };
        self.phi_inverse_from(rhs, start)
    }

    pub fn phi_inverse_from(&self, rhs: &DVector<f64>, start: DVector<f64>) -> Result<NewtonReport> {
        check_len("phi_inverse rhs", self.spec.dim(), rhs.len())?;
        check_len("phi_inverse start", self.spec.dim(), start.len())?;
        self.check_newton_applicable()?;
        let tol = self.newton.rel_tol * (1.0 + rhs.norm());
        let mut z = start;
        let mut r = self.phi_apply(&z)? - rhs;
        let mut rn = r.norm();
        let mut used_fallback = false;
        let mut iter = 0;
        while rn > tol {
            if iter >= self.newton.max_iter {
                return Err(Error::NewtonStagnation {
                    iterations: iter,
                    residual: rn,
                    last: z,
                });
            }
            let jac = self.phi_jacobian(&z)?;
            let step = linalg::lu_solve(&jac, &(-&r)).ok_or(Error::SingularNewton { iteration: iter })?;
            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..=self.newton.max_halvings {
                let cand = &z + &step * alpha;
                let rc = self.phi_apply(&cand)? - rhs;
                let rcn = rc.norm();
                if rcn.is_finite() && rcn < rn {
                    accepted = Some((cand, rc, rcn));
                    break;
                }
                alpha *= 0.5;
            }
            match accepted {
                Some((cand, rc, rcn)) => {
                    let moved = (&cand - &z).norm();
                    z = cand;
                    r = rc;
                    rn = rcn;
                    if moved < 1e-14 * (1.0 + z.norm()) && rn > tol {
                        return Err(Error::NewtonStagnation {
                            iterations: iter + 1,
                            residual: rn,
                            last: z,
                        });
                    }
                }
                None if iter == 0 && !used_fallback && self.newton.fallback_steps > 0 => {
                    used_fallback = true;
                    z = self.gradient_flow_precondition(rhs, z)?;
                    r = self.phi_apply(&z)? - rhs;
                    rn = r.norm();
                    continue;
                }
                None => {
                    return Err(Error::NewtonStagnation {
                        iterations: iter,
                        residual: rn,
                        last: z,
                    })
                }
            }
            iter += 1;
        }
        // A small residual alone does not certify a root: along directions
        // where ∇C decays exponentially (divergent logits) the residual
        // vanishes while full Newton steps stay O(1).
        if iter > 0 || used_fallback {
            let jac = self.phi_jacobian(&z)?;
            let step = linalg::lu_solve(&jac, &(-&r)).ok_or(Error::SingularNewton { iteration: iter })?;
            if step.norm() > NEWTON_STEP_TOL * (1.0 + z.norm()) {
                return Err(Error::NewtonStagnation {
                    iterations: iter,
                    residual: rn,
                    last: z,
                });
            }
        }
        Ok(NewtonReport {
            z,
            residual: rn,
            iterations: iter,
            used_fallback,
        })
    }

    /// A bounded number of integrator steps of `dz/dt = −(Φ(z) − rhs)`.
    fn gradient_flow_precondition(&self, rhs: &DVector<f64>, z: DVector<f64>) -> Result<DVector<f64>> {
        let scale = self.factor.max_eigenvalue().max(self.beta).max(1e-12);
        let opts = OdeOptions {
            max_steps: self.newton.fallback_steps,
            ..self.ode
        };
        let out = ode::integrate(
            |_, y| -(self.phi_apply(y).expect("dimension checked") - rhs),
            0.0,
            z,
            &[1e3 / scale],
            &opts,
            |_| StepControl::Continue,
        )?;
        Ok(out.y)
    }

    /// Right-hand side of the joint train/test flow.
    fn rhs(&self, y: &DVector<f64>) -> DVector<f64> {
        let nk = self.spec.dim();
        let g = y.rows(0, nk).into_owned();
        let grad = self.spec.gradient(&g).expect("dimension checked");
        let mut out = DVector::zeros(y.len());
        let train = self.theta.apply(&grad) + (&g - &self.g0_train) * self.beta;
        out.rows_mut(0, nk).copy_from(&(-self.eta0 * train));
        if !self.g0_test.is_empty() {
            let gt = y.rows(nk, y.len() - nk);
            let test = self.cross.apply(&grad) + (gt - &self.g0_test) * self.beta;
            out.rows_mut(nk, y.len() - nk).copy_from(&(-self.eta0 * test));
        }
        out
    }

    fn state_at(&self, t: f64, y: &DVector<f64>) -> Result<FlowState> {
        let nk = self.spec.dim();
        let g_train = y.rows(0, nk).into_owned();
        let grad_norm = self.stationarity_residual(&g_train)?.norm();
        Ok(FlowState {
            t,
            g_test: y.rows(nk, y.len() - nk).into_owned(),
            g_train,
            grad_norm,
        })
    }

    fn identity_violation(&self, y: &DVector<f64>) -> f64 {
        if self.g0_test.is_empty() {
            return 0.0;
        }
        let nk = self.spec.dim();
        let d_train = y.rows(0, nk) - &self.g0_train;
        let predicted = self.cross.apply(&self.theta_solve(&d_train));
        let actual = y.rows(nk, y.len() - nk) - &self.g0_test;
        (&actual - &predicted).amax() / (1.0 + predicted.amax())
    }

    fn initial_vector(&self) -> DVector<f64> {
        let nk = self.spec.dim();
        let mut y = DVector::zeros(nk + self.g0_test.len());
        y.rows_mut(0, nk).copy_from(&self.g0_train);
        y.rows_mut(nk, self.g0_test.len()).copy_from(&self.g0_test);
        y
    }

    /// Integrates the joint flow up to `t_end`, recording every
    /// `record_every`. Optionally stops once `grad_norm ≤ stop_tol`.
    pub fn integrate_flow(&self, t_end: f64, record_every: f64) -> Result<FlowTrajectory> {
        self.integrate_inner(t_end, record_every, None)
    }

    /// Integrates until the stationarity residual drops to `tol` or `t_max`
    /// is reached; the last state is always recorded.
    pub fn integrate_to_stationarity(&self, t_max: f64, record_every: f64, tol: f64) -> Result<FlowTrajectory> {
        self.integrate_inner(t_max, record_every, Some(tol))
    }

    fn integrate_inner(&self, t_end: f64, record_every: f64, stop_tol: Option<f64>) -> Result<FlowTrajectory> {
        if !(t_end > 0.0) {
            return Err(Error::InvalidArgument("t_end must be positive".into()));
        }
        let y0 = self.initial_vector();
        let nk = self.spec.dim();
        let first = self.state_at(0.0, &y0)?;
        let obj0 = self.map_objective(&first.g_train)?;
        let mut states = vec![first];
        let mut objective = vec![obj0];
        let mut prev_obj = obj0;
        let mut max_increase = f64::NEG_INFINITY;
        let mut max_violation: f64 = 0.0;
        let mut failure: Option<Error> = None;
        let grid = ode::checkpoint_grid(0.0, t_end, record_every);
        let out = ode::integrate(
            |_, y| self.rhs(y),
            0.0,
            y0,
            &grid,
            &self.ode,
            |step| {
                let g = step.y.rows(0, nk).into_owned();
                let obj = match self.map_objective(&g) {
                    Ok(v) => v,
                    Err(e) => {
                        failure = Some(e);
                        return StepControl::Stop;
                    }
                };
                max_increase = max_increase.max(obj - prev_obj);
                prev_obj = obj;
                let viol = self.identity_violation(step.y);
                max_violation = max_violation.max(viol);
                if viol > IDENTITY_TOL {
                    failure = Some(Error::IdentityViolation { violation: viol, t: step.t });
                    return StepControl::Stop;
                }
                let mut stop = false;
                if let Some(tol) = stop_tol {
                    let gn = self.stationarity_residual(&g).map(|r| r.norm()).unwrap_or(f64::INFINITY);
                    if gn <= tol {
                        stop = true;
                    }
                }
                if step.at_checkpoint || stop {
                    match self.state_at(step.t, step.y) {
                        Ok(s) => {
                            states.push(s);
                            objective.push(obj);
                        }
                        Err(e) => {
                            failure = Some(e);
                            return StepControl::Stop;
                        }
                    }
                }
                if stop {
                    StepControl::Stop
                } else {
                    StepControl::Continue
                }
            },
        )?;
        if let Some(e) = failure {
            return Err(e);
        }
        Ok(FlowTrajectory {
            states,
            objective,
            max_objective_increase: if max_increase.is_finite() { max_increase } else { 0.0 },
            max_identity_violation: max_violation,
            status: out.status,
            accepted_steps: out.accepted,
        })
    }

    /// Test predictions from a converged training solution, by formula A and
    /// (for `β > 0`) formula B, which must agree.
    pub fn predict_test(&self, g_inf_train: &DVector<f64>) -> Result<TestPrediction> {
        check_len("g_inf on train points", self.spec.dim(), g_inf_train.len())?;
        let d = g_inf_train - &self.g0_train;
        let a = &self.g0_test + self.cross.apply(&self.theta_solve(&d));
        if self.beta == 0.0 {
            return Ok(TestPrediction {
                formula_a: a,
                formula_b: None,
                difference: None,
            });
        }
        let grad = self.spec.gradient(g_inf_train)?;
        let b = &self.g0_test - self.cross.apply(&grad) / self.beta;
        let diff = if a.is_empty() { 0.0 } else { (&a - &b).amax() };
        let tol = FORMULA_TOL * (1.0 + if a.is_empty() { 0.0 } else { a.amax() });
        if diff > tol {
            return Err(Error::FormulaDisagreement { difference: diff, tolerance: tol });
        }
        Ok(TestPrediction {
            formula_a: a,
            formula_b: Some(b),
            difference: Some(diff),
        })
    }

    /// `Φ⁻¹(βg₀)` on the training points followed by formula A on the test
    /// points.
    pub fn solve(&self) -> Result<(NewtonReport, TestPrediction)> {
        let rhs = &self.g0_train * self.beta;
        let report = self.phi_inverse(&rhs)?;
        let pred = self.predict_test(&report.z)?;
        Ok((report, pred))
    }

    fn check_centered(&self) -> Result<()> {
        if self.spec.kind != LossKind::Ce {
            return Err(Error::InvalidArgument("centered machinery applies to CE without reference class".into()));
        }
        if !self.spec.targets.full_support() {
            return Err(Error::InvalidArgument("centered stationary point needs full-support targets".into()));
        }
        Ok(())
    }

    /// Integrates the flow and reports block-centered values `P g_t`.
    pub fn centered_flow(&self, t_end: f64, record_every: f64) -> Result<FlowTrajectory> {
        self.check_centered()?;
        let mut traj = self.integrate_flow(t_end, record_every)?;
        let k = self.k();
        for s in &mut traj.states {
            s.g_train = loss::center_project(&s.g_train, k)?;
            s.g_test = loss::center_project(&s.g_test, k)?;
        }
        Ok(traj)
    }

    /// Closed-form limit of the `β = 0` CE flow. The flow moves `g` by
    /// `Θw` with `w` block-centered, so the limit keeps the per-block means
    /// of `g₀` and matches `log p` after centering:
    /// `g∞ = (I − P)g₀ + P log p`, and on test points
    /// `g∞(x') = g₀(x') + Θ_{x',𝐱}Θ⁻¹(g∞ − g₀)`.
    pub fn centered_stationary_point(&self) -> Result<(DVector<f64>, DVector<f64>)> {
        self.check_centered()?;
        let k = self.k();
        let logp = DVector::from_iterator(self.spec.dim(), self.spec.targets.probs.transpose().iter().map(|p| p.ln()));
        let delta = loss::center_project(&(logp - &self.g0_train), k)?;
        let g_train = &self.g0_train + &delta;
        let g_test = &self.g0_test + self.cross.apply(&self.theta_solve(&delta));
        Ok((g_train, g_test))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StationaryKind {
    Min,
    Max,
    Saddle,
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryPoint {
    pub z: DVector<f64>,
    pub kind: StationaryKind,
    /// Eigenvalues of `∇²C(z) + βΘ⁻¹`, ascending.
    pub curvature: Vec<f64>,
    pub residual: f64,
}

/// Locates stationary points of `C(z) + (β/2)(z − g₀)ᵀΘ⁻¹(z − g₀)` by plain
/// damped Newton on `Φ(z) = βg₀` from every start point, keeping converged
/// runs, merging duplicates and classifying each point by the curvature of
/// the regularized objective.
pub fn stationary_points(problem: &FlowProblem, starts: &[DVector<f64>], merge_tol: f64) -> Result<Vec<StationaryPoint>> {
    let rhs = &problem.g0_train * problem.beta;
    let no_fallback = FlowProblem {
        newton: NewtonOptions {
            fallback_steps: 0,
            ..problem.newton
        },
        ..problem.clone()
    };
    let theta_inv = problem.theta_inverse_dense();
    let mut found: Vec<StationaryPoint> = Vec::new();
    for start in starts {
        let report = match no_fallback.phi_inverse_from(&rhs, start.clone()) {
            Ok(r) => r,
            Err(Error::NewtonStagnation { .. } | Error::SingularNewton { .. }) => continue,
            Err(e) => return Err(e),
        };
        if found.iter().any(|p| (&p.z - &report.z).amax() < merge_tol) {
            continue;
        }
        let curv = problem.spec.hessian(&report.z)? + &theta_inv * problem.beta;
        let eig = linalg::sym_eigenvalues(&curv);
        let scale = eig.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        let kind = if eig.iter().all(|&v| v > 1e-12 * scale) {
            StationaryKind::Min
        } else if eig.iter().all(|&v| v < -1e-12 * scale) {
            StationaryKind::Max
        } else if eig.iter().any(|&v| v.abs() <= 1e-12 * scale) {
            StationaryKind::Degenerate
        } else {
            StationaryKind::Saddle
        };
        found.push(StationaryPoint {
            z: report.z,
            kind,
            curvature: eig,
            residual: report.residual,
        });
    }
    found.sort_by(|a, b| a.z[0].total_cmp(&b.z[0]));
    Ok(found)
}

/// Serializable description of a function-space problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemDocument {
    pub arch: ArchSpec,
    pub arch_hash: String,
    pub train_points: Vec<DVector<f64>>,
    pub test_points: Vec<DVector<f64>>,
    pub spec: LossSpec,
    pub beta: f64,
    pub eta0: f64,
    pub g0_train: DVector<f64>,
    pub g0_test: DVector<f64>,
    #[serde(default = "default_jitter")]
    pub jitter: f64,
}

fn default_jitter() -> f64 {
    DEFAULT_JITTER
}

impl ProblemDocument {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        arch: &ArchSpec,
        train_points: Vec<DVector<f64>>,
        test_points: Vec<DVector<f64>>,
        spec: LossSpec,
        beta: f64,
        eta0: f64,
        g0_train: DVector<f64>,
        g0_test: DVector<f64>,
    ) -> Self {
        Self {
            arch: arch.clone(),
            arch_hash: arch.kernel_hash(),
            train_points,
            test_points,
            spec,
            beta,
            eta0,
            g0_train,
            g0_test,
            jitter: DEFAULT_JITTER,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: Self = serde_json::from_str(s)?;
        if doc.arch_hash != doc.arch.kernel_hash() {
            return Err(Error::InvalidArgument("arch_hash does not match the architecture".into()));
        }
        Ok(doc)
    }

    pub fn build(&self) -> Result<FlowProblem> {
        self.arch.validate()?;
        FlowProblem::from_arch(
            &self.arch,
            &self.train_points,
            &self.test_points,
            self.spec.clone(),
            self.beta,
            self.eta0,
            self.g0_train.clone(),
            self.g0_test.clone(),
        )?
        .with_jitter(self.jitter)
    }
}

/// Result of solving a problem document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionReport {
    pub arch_hash: String,
    pub g_inf_train: DVector<f64>,
    pub prediction_test: DVector<f64>,
    pub formula_b: Option<DVector<f64>>,
    pub formula_difference: Option<f64>,
    pub newton_residual: f64,
    pub newton_iterations: usize,
    pub stationarity_residual: f64,
    pub condition_number: f64,
    pub jitter: f64,
}

pub fn solve_document(doc: &ProblemDocument) -> Result<SolutionReport> {
    let problem = doc.build()?;
    let (report, pred) = problem.solve()?;
    Ok(SolutionReport {
        arch_hash: doc.arch_hash.clone(),
        stationarity_residual: problem.stationarity_residual(&report.z)?.norm(),
        g_inf_train: report.z,
        prediction_test: pred.formula_a,
        formula_b: pred.formula_b,
        formula_difference: pred.difference,
        newton_residual: report.residual,
        newton_iterations: report.iterations,
        condition_number: problem.condition_number(),
        jitter: problem.jitter(),
    })
}
