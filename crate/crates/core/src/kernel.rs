//! Analytic NNGP and NTK kernels of fully-connected erf networks.
//!
//! Each hidden layer computes `φ(W x / √n + b)` with `W ~ N(0, σ_w²)`,
//! `b ~ N(0, σ_b²)` and `φ = erf`; the readout is linear with the same
//! scaling. With `Σ` the pre-activation covariance and `T` the tangent kernel,
//!
//! ```text
//! Σ¹ = σ_w1² ⟨x,x'⟩/d + σ_b1²            T¹ = ⟨x,x'⟩/d + 1
//! Σˡ⁺¹ = σ_w² E[φ(u)φ(v)] + σ_b²         Tˡ⁺¹ = E[φ(u)φ(v)] + 1 + σ_w² E[φ'(u)φ'(v)] Tˡ
//! ```
//!
//! where `(u, v)` is centered Gaussian with the layer-`l` covariance. Both
//! erf expectations have arcsine closed forms, so no quadrature is involved.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_len, Error, Result};
use crate::linalg;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Erf,
}

impl Activation {
    pub fn apply(self, u: f64) -> f64 {
        match self {
            Activation::Erf => libm::erf(u),
        }
    }

    pub fn derivative(self, u: f64) -> f64 {
        match self {
            Activation::Erf => 2.0 / PI.sqrt() * (-u * u).exp(),
        }
    }

    pub fn second_derivative(self, u: f64) -> f64 {
        match self {
            Activation::Erf => -2.0 * u * self.derivative(u),
        }
    }

    /// `E[φ(u)φ(v)]` for `(u, v)` centered with variances `a`, `b` and
    /// covariance `c`.
    pub fn dual(self, a: f64, b: f64, c: f64) -> f64 {
        match self {
            Activation::Erf => {
                let rho = (2.0 * c / ((1.0 + 2.0 * a) * (1.0 + 2.0 * b)).sqrt()).clamp(-1.0, 1.0);
                2.0 / PI * rho.asin()
            }
        }
    }

    /// `E[φ'(u)φ'(v)]` for the same Gaussian pair.
    pub fn derivative_dual(self, a: f64, b: f64, c: f64) -> f64 {
        match self {
            Activation::Erf => {
                let det = (1.0 + 2.0 * a) * (1.0 + 2.0 * b) - 4.0 * c * c;
                4.0 / PI / det.max(f64::MIN_POSITIVE).sqrt()
            }
        }
    }
}

/// Architecture of a fully-connected network in NTK parametrization.
///
/// `sigma_w` and `sigma_b` hold one entry per affine map, i.e. `depth + 1`
/// entries (the last one is the readout).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub depth: usize,
    pub widths: Vec<usize>,
    pub input_dim: usize,
    pub output_dim: usize,
    pub sigma_w: Vec<f64>,
    pub sigma_b: Vec<f64>,
    #[serde(default)]
    pub activation: Activation,
}

impl ArchSpec {
    /// Equal widths and the same `(σ_w, σ_b)` in every layer.
    pub fn uniform(depth: usize, width: usize, input_dim: usize, output_dim: usize, sigma_w: f64, sigma_b: f64) -> Self {
        Self {
            depth,
            widths: vec![width; depth],
            input_dim,
            output_dim,
            sigma_w: vec![sigma_w; depth + 1],
            sigma_b: vec![sigma_b; depth + 1],
            activation: Activation::Erf,
        }
    }

    pub fn with_width(&self, width: usize) -> Self {
        Self {
            widths: vec![width; self.depth],
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.depth < 1 {
            return bad("depth must be at least 1".into());
        }
        if self.input_dim < 1 || self.output_dim < 1 {
            return bad("input_dim and output_dim must be positive".into());
        }
        if self.widths.len() != self.depth {
            return bad(format!("expected {} widths, got {}", self.depth, self.widths.len()));
        }
        if self.widths.iter().any(|&n| n < 1) {
            return bad("all widths must be at least 1".into());
        }
        if self.sigma_w.len() != self.depth + 1 || self.sigma_b.len() != self.depth + 1 {
            return bad(format!("sigma_w and sigma_b need {} entries (hidden layers plus readout)", self.depth + 1));
        }
        if self.sigma_w.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad("sigma_w must be positive and finite".into());
        }
        if self.sigma_b.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
            return bad("sigma_b must be nonnegative and finite".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the width-free fields; identifies the analytic kernel.
    pub fn kernel_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{:?}|{}|{}|{}", self.activation, self.depth, self.input_dim, self.output_dim));
        for s in self.sigma_w.iter().chain(&self.sigma_b) {
            h.update(s.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// NNGP and NTK values for one pair of inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelPair {
    pub nngp: f64,
    pub ntk: f64,
}

fn pair_recursion(arch: &ArchSpec, x: &DVector<f64>, y: &DVector<f64>) -> KernelPair {
    let d = arch.input_dim as f64;
    let (xx, yy, xy) = (x.dot(x) / d, y.dot(y) / d, x.dot(y) / d);
    let (sw0, sb0) = (arch.sigma_w[0] * arch.sigma_w[0], arch.sigma_b[0] * arch.sigma_b[0]);
    let mut a = sw0 * xx + sb0;
    let mut b = sw0 * yy + sb0;
    let mut c = sw0 * xy + sb0;
    let mut t = xy + 1.0;
    let act = arch.activation;
    for l in 1..=arch.depth {
        let sw = arch.sigma_w[l] * arch.sigma_w[l];
        let sb = arch.sigma_b[l] * arch.sigma_b[l];
        let e = act.dual(a, b, c);
        let e_dot = act.derivative_dual(a, b, c);
        t = e + 1.0 + sw * e_dot * t;
        let (ea, eb) = (act.dual(a, a, a), act.dual(b, b, b));
        a = sw * ea + sb;
        b = sw * eb + sb;
        c = sw * e + sb;
    }
    KernelPair { nngp: c, ntk: t }
}

fn check_inputs(arch: &ArchSpec, x: &DVector<f64>, y: &DVector<f64>) -> Result<()> {
    check_len("kernel input x", arch.input_dim, x.len())?;
    check_len("kernel input x'", arch.input_dim, y.len())
}

/// Both kernels for one pair. Symmetric in its arguments by construction:
/// every quantity in the recursion is symmetric in `(x, x')`.
pub fn kernel_pair(arch: &ArchSpec, x: &DVector<f64>, y: &DVector<f64>) -> Result<KernelPair> {
    check_inputs(arch, x, y)?;
    Ok(pair_recursion(arch, x, y))
}

pub fn nngp_kernel(arch: &ArchSpec, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
    Ok(kernel_pair(arch, x, y)?.nngp)
}

pub fn ntk_kernel(arch: &ArchSpec, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
    Ok(kernel_pair(arch, x, y)?.ntk)
}

/// `(𝒦(xs_i, ys_j), Θ(xs_i, ys_j))` as `|xs| × |ys|` matrices.
pub fn cross_kernels(arch: &ArchSpec, xs: &[DVector<f64>], ys: &[DVector<f64>]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let mut nngp = DMatrix::zeros(xs.len(), ys.len());
    let mut ntk = DMatrix::zeros(xs.len(), ys.len());
    for (i, x) in xs.iter().enumerate() {
        for (j, y) in ys.iter().enumerate() {
            let kp = kernel_pair(arch, x, y)?;
            nngp[(i, j)] = kp.nngp;
            ntk[(i, j)] = kp.ntk;
        }
    }
    Ok((nngp, ntk))
}

/// Scalar kernels on a point set; the full output kernel is `scalar ⊗ I_K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelPack {
    pub points: Vec<DVector<f64>>,
    pub nngp: DMatrix<f64>,
    pub ntk: DMatrix<f64>,
    pub output_dim: usize,
}

pub fn assemble_pack(arch: &ArchSpec, points: &[DVector<f64>]) -> Result<KernelPack> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("assemble_pack: empty point list".into()));
    }
    let n = points.len();
    let mut nngp = DMatrix::zeros(n, n);
    let mut ntk = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let kp = kernel_pair(arch, &points[i], &points[j])?;
            nngp[(i, j)] = kp.nngp;
            nngp[(j, i)] = kp.nngp;
            ntk[(i, j)] = kp.ntk;
            ntk[(j, i)] = kp.ntk;
        }
    }
    Ok(KernelPack {
        points: points.to_vec(),
        nngp,
        ntk,
        output_dim: arch.output_dim,
    })
}

impl KernelPack {
    /// Pack built from explicit matrices (e.g. an empirical NTK, or a rescaled
    /// prior kernel). Points are left empty.
    pub fn from_matrices(nngp: DMatrix<f64>, ntk: DMatrix<f64>, output_dim: usize) -> Result<Self> {
        if !nngp.is_square() || nngp.shape() != ntk.shape() {
            return Err(Error::DimensionMismatch {
                context: "KernelPack::from_matrices",
                expected: ntk.nrows(),
                got: nngp.nrows(),
            });
        }
        Ok(Self {
            points: Vec::new(),
            nngp,
            ntk,
            output_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.ntk.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ntk_expanded(&self) -> DMatrix<f64> {
        linalg::kron_expand(&self.ntk, self.output_dim)
    }

    pub fn nngp_expanded(&self) -> DMatrix<f64> {
        linalg::kron_expand(&self.nngp, self.output_dim)
    }

    /// Sub-pack on the given point indices.
    pub fn select(&self, idx: &[usize]) -> KernelPack {
        KernelPack {
            points: if self.points.is_empty() { Vec::new() } else { idx.iter().map(|&i| self.points[i].clone()).collect() },
            nngp: self.nngp.select_rows(idx).select_columns(idx),
            ntk: self.ntk.select_rows(idx).select_columns(idx),
            output_dim: self.output_dim,
        }
    }

    /// Checks symmetry and the PSD floor `λ_min ≥ −10⁻¹⁰·trace` of both
    /// matrices.
    pub fn check_invariants(&self) -> Result<()> {
        for m in [&self.nngp, &self.ntk] {
            let asym = linalg::asymmetry(m);
            if asym != 0.0 {
                return Err(Error::Asymmetric { asymmetry: asym, tolerance: 0.0 });
            }
            let floor = -1e-10 * linalg::trace(m).abs();
            let min = linalg::min_eigenvalue(m);
            if min < floor {
                return Err(Error::NotPositiveDefinite { min_eigenvalue: min, jitter: 0.0 });
            }
        }
        Ok(())
    }
}

/// Relative Frobenius error `‖emp − Θ‖_F / ‖Θ‖_F`.
pub fn empirical_ntk_error(pack: &KernelPack, emp: &DMatrix<f64>) -> Result<f64> {
    if emp.shape() != pack.ntk.shape() {
        return Err(Error::DimensionMismatch {
            context: "empirical_ntk_error",
            expected: pack.ntk.nrows(),
            got: emp.nrows(),
        });
    }
    let norm = pack.ntk.norm();
    if norm == 0.0 {
        return Err(Error::ZeroNormKernel);
    }
    Ok((emp - &pack.ntk).norm() / norm)
}
