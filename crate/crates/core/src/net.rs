//! Finite-width fully-connected erf networks in NTK parametrization.
//!
//! Layer `l` maps `a ↦ W a / √n_{l−1} + b` and hidden layers apply `erf`.
//! Parameters live in one flat vector, layer by layer: `W^l` column-major
//! (`n_l × n_{l−1}`) followed by `b^l`. Jacobian rows, like every
//! function-space vector, are point-major and class-minor.

use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::kernel::ArchSpec;

/// Largest dense Jacobian (in entries) that [`NetSnapshot::jacobian`] builds.
pub const MAX_JACOBIAN_ENTRIES: usize = 64_000_000;

/// Stacks points as the columns of a `d × N` matrix.
pub fn points_matrix(points: &[DVector<f64>], d: usize) -> Result<DMatrix<f64>> {
    let mut m = DMatrix::zeros(d, points.len());
    for (j, p) in points.iter().enumerate() {
        check_len("network input", d, p.len())?;
        m.set_column(j, p);
    }
    Ok(m)
}

/// Offsets of one affine map inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub rows: usize,
    pub cols: usize,
    pub w_offset: usize,
    pub b_offset: usize,
}

impl LayerShape {
    pub fn scale(&self) -> f64 {
        1.0 / (self.cols as f64).sqrt()
    }
}

pub fn layer_shapes(arch: &ArchSpec) -> Vec<LayerShape> {
    let mut dims = Vec::with_capacity(arch.depth + 2);
    dims.push(arch.input_dim);
    dims.extend(&arch.widths);
    dims.push(arch.output_dim);
    let mut off = 0;
    dims.windows(2)
        .map(|w| {
            let s = LayerShape {
                rows: w[1],
                cols: w[0],
                w_offset: off,
                b_offset: off + w[0] * w[1],
            };
            off = s.b_offset + s.rows;
            s
        })
        .collect()
}

pub fn param_count(arch: &ArchSpec) -> usize {
    layer_shapes(arch).last().map_or(0, |s| s.b_offset + s.rows)
}

/// Intermediate values of a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `acts[l]` is the input to affine map `l` (`acts[0]` = inputs).
    pub acts: Vec<DMatrix<f64>>,
    /// `φ'` of the pre-activations feeding `acts[l + 1]`, for hidden layers.
    pub dphi: Vec<DMatrix<f64>>,
    /// `K × N` outputs.
    pub out: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSnapshot {
    pub arch: ArchSpec,
    pub theta: DVector<f64>,
    pub theta0: DVector<f64>,
}

/// Result of the Hessian power iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HessianProbe {
    pub estimate: f64,
    pub converged: bool,
}

impl NetSnapshot {
    /// Draws `W ~ N(0, σ_w²)`, `b ~ N(0, σ_b²)` independently per layer.
    pub fn init(arch: &ArchSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = DVector::zeros(param_count(arch));
        for (l, s) in layer_shapes(arch).iter().enumerate() {
            let w = Normal::new(0.0, arch.sigma_w[l]).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            for v in theta.as_mut_slice()[s.w_offset..s.b_offset].iter_mut() {
                *v = w.sample(&mut rng);
            }
            let sb = arch.sigma_b[l];
            if sb > 0.0 {
                let b = Normal::new(0.0, sb).map_err(|e| Error::InvalidArgument(e.to_string()))?;
                for v in theta.as_mut_slice()[s.b_offset..s.b_offset + s.rows].iter_mut() {
                    *v = b.sample(&mut rng);
                }
            }
        }
        Ok(Self {
            arch: arch.clone(),
            theta0: theta.clone(),
            theta,
        })
    }

    pub fn from_theta(arch: &ArchSpec, theta: DVector<f64>) -> Result<Self> {
        arch.validate()?;
        check_len("parameter vector", param_count(arch), theta.len())?;
        Ok(Self {
            arch: arch.clone(),
            theta0: theta.clone(),
            theta,
        })
    }

    pub fn param_count(&self) -> usize {
        self.theta.len()
    }

    pub fn shapes(&self) -> Vec<LayerShape> {
        layer_shapes(&self.arch)
    }

    /// Per-layer `(W, b)` copies.
    pub fn unflatten(&self) -> Vec<(DMatrix<f64>, DVector<f64>)> {
        unflatten(&self.arch, &self.theta)
    }

    pub fn set_theta(&mut self, theta: &DVector<f64>) {
        assert_eq!(theta.len(), self.theta.len(), "set_theta: parameter count");
        self.theta.copy_from(theta);
    }

    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let xm = points_matrix(std::slice::from_ref(x), self.arch.input_dim)?;
        Ok(self.forward_batch(&xm)?.column(0).into_owned())
    }

    /// `K × N` outputs for the columns of `x`.
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(forward_with(&self.arch, self.theta.as_slice(), x, false)?.out)
    }

    /// Point-major flattened outputs on a point set.
    pub fn outputs(&self, points: &[DVector<f64>]) -> Result<DVector<f64>> {
        let x = points_matrix(points, self.arch.input_dim)?;
        Ok(flatten_outputs(&self.forward_batch(&x)?))
    }

    pub fn forward_cache(&self, x: &DMatrix<f64>) -> Result<ForwardCache> {
        forward_with(&self.arch, self.theta.as_slice(), x, true)
    }

    /// `J(x)ᵀ u` for a point-major cotangent `u` of length `N·K`.
    pub fn vjp(&self, x: &DMatrix<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let cache = self.forward_cache(x)?;
        self.vjp_cached(&cache, u)
    }

    pub fn vjp_cached(&self, cache: &ForwardCache, u: &DVector<f64>) -> Result<DVector<f64>> {
        let n = cache.out.ncols();
        let k = self.arch.output_dim;
        check_len("vjp cotangent", n * k, u.len())?;
        let shapes = self.shapes();
        let mut grad = DVector::zeros(self.theta.len());
        let mut delta = DMatrix::from_column_slice(k, n, u.as_slice());
        for l in (0..shapes.len()).rev() {
            let s = shapes[l];
            let g = grad.as_mut_slice();
            {
                let mut gw = DMatrixViewMut::from_slice(&mut g[s.w_offset..s.b_offset], s.rows, s.cols);
                gw.gemm(s.scale(), &delta, &cache.acts[l].transpose(), 0.0);
            }
            for (r, v) in g[s.b_offset..s.b_offset + s.rows].iter_mut().enumerate() {
                *v = delta.row(r).sum();
            }
            if l > 0 {
                let w = DMatrixView::from_slice(&self.theta.as_slice()[s.w_offset..s.b_offset], s.rows, s.cols);
                let back = (delta.transpose() * w).transpose() * s.scale();
                delta = back.component_mul(&cache.dphi[l - 1]);
            }
        }
        Ok(grad)
    }

    /// `J(x) v` for a parameter direction `v`.
    pub fn jvp(&self, x: &DMatrix<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        check_len("jvp direction", self.theta.len(), v.len())?;
        let cache = self.forward_cache(x)?;
        let shapes = self.shapes();
        let n = x.ncols();
        let mut tangent = DMatrix::<f64>::zeros(self.arch.input_dim, n);
        for (l, s) in shapes.iter().enumerate() {
            let w = DMatrixView::from_slice(&self.theta.as_slice()[s.w_offset..s.b_offset], s.rows, s.cols);
            let dw = DMatrixView::from_slice(&v.as_slice()[s.w_offset..s.b_offset], s.rows, s.cols);
            let mut dh = DMatrix::zeros(s.rows, n);
            dh.gemm(s.scale(), &dw, &cache.acts[l], 0.0);
            if l > 0 {
                dh.gemm(s.scale(), &w, &tangent, 1.0);
            }
            let db = &v.as_slice()[s.b_offset..s.b_offset + s.rows];
            for mut col in dh.column_iter_mut() {
                for (c, b) in col.iter_mut().zip(db) {
                    *c += b;
                }
            }
            tangent = if l + 1 < shapes.len() { dh.component_mul(&cache.dphi[l]) } else { dh };
        }
        Ok(flatten_outputs(&tangent))
    }

    /// Pre-activation sensitivities `δ^l` for every output coordinate: entry
    /// `l` is `n_l × (N·K)` with column `i·K + k` the derivative of output `k`
    /// at point `i` with respect to the outputs of affine map `l`.
    fn sensitivities(&self, cache: &ForwardCache) -> Vec<DMatrix<f64>> {
        let shapes = self.shapes();
        let n = cache.out.ncols();
        let k = self.arch.output_dim;
        let nl = shapes.len();
        let mut out = vec![DMatrix::zeros(0, 0); nl];
        let mut delta = DMatrix::zeros(k, n * k);
        for i in 0..n {
            for c in 0..k {
                delta[(c, i * k + c)] = 1.0;
            }
        }
        for l in (0..nl).rev() {
            let s = shapes[l];
            if l > 0 {
                let w = DMatrixView::from_slice(&self.theta.as_slice()[s.w_offset..s.b_offset], s.rows, s.cols);
                let mut back = (delta.transpose() * w).transpose() * s.scale();
                let dphi = &cache.dphi[l - 1];
                for (col, mut bc) in back.column_iter_mut().enumerate() {
                    bc.component_mul_assign(&dphi.column(col / k));
                }
                out[l] = std::mem::replace(&mut delta, back);
            } else {
                out[l] = std::mem::replace(&mut delta, DMatrix::zeros(0, 0));
            }
        }
        out
    }

    /// Dense `(N·K) × p` Jacobian; fails with [`Error::TooLarge`] above
    /// [`MAX_JACOBIAN_ENTRIES`].
    pub fn jacobian(&self, points: &[DVector<f64>]) -> Result<DMatrix<f64>> {
        let rows = points.len() * self.arch.output_dim;
        let entries = rows * self.theta.len();
        if entries > MAX_JACOBIAN_ENTRIES {
            return Err(Error::TooLarge {
                entries,
                limit: MAX_JACOBIAN_ENTRIES,
            });
        }
        let x = points_matrix(points, self.arch.input_dim)?;
        let cache = self.forward_cache(&x)?;
        let deltas = self.sensitivities(&cache);
        let k = self.arch.output_dim;
        let mut jac = DMatrix::zeros(rows, self.theta.len());
        for (l, s) in self.shapes().iter().enumerate() {
            let d = &deltas[l];
            let a = &cache.acts[l];
            for row in 0..rows {
                let i = row / k;
                for c in 0..s.cols {
                    let ac = a[(c, i)] * s.scale();
                    for r in 0..s.rows {
                        jac[(row, s.w_offset + c * s.rows + r)] = d[(r, row)] * ac;
                    }
                }
                for r in 0..s.rows {
                    jac[(row, s.b_offset + r)] = d[(r, row)];
                }
            }
        }
        Ok(jac)
    }

    /// Full `NK × NK` empirical NTK `J Jᵀ`, computed layer by layer without
    /// materializing `J`.
    pub fn empirical_ntk(&self, points: &[DVector<f64>]) -> Result<DMatrix<f64>> {
        let x = points_matrix(points, self.arch.input_dim)?;
        let cache = self.forward_cache(&x)?;
        Ok(self.empirical_ntk_cached(&cache))
    }

    pub fn empirical_ntk_cached(&self, cache: &ForwardCache) -> DMatrix<f64> {
        let deltas = self.sensitivities(cache);
        let k = self.arch.output_dim;
        let n = cache.out.ncols();
        let mut ntk = DMatrix::zeros(n * k, n * k);
        for (l, s) in self.shapes().iter().enumerate() {
            let d = &deltas[l];
            let dd = d.transpose() * d;
            let a = &cache.acts[l];
            let aa = (a.transpose() * a) / s.cols as f64;
            for r in 0..n * k {
                for c in 0..n * k {
                    ntk[(r, c)] += dd[(r, c)] * (aa[(r / k, c / k)] + 1.0);
                }
            }
        }
        crate::linalg::symmetrize(&ntk)
    }

    /// Gradient of output coordinate `k` at a single input.
    fn output_gradient(&self, x: &DMatrix<f64>, k: usize) -> Result<DVector<f64>> {
        let mut u = DVector::zeros(self.arch.output_dim);
        u[k] = 1.0;
        self.vjp(x, &u)
    }

    /// Power iteration on the parameter Hessian of each output coordinate at
    /// `x`, with Hessian-vector products from central differences of
    /// gradients (step `10⁻⁴·‖θ‖/‖v‖`). Returns the largest estimate over
    /// output coordinates.
    pub fn hessian_opnorm_probe(&self, x: &DVector<f64>, iters: usize, seed: u64) -> Result<HessianProbe> {
        if iters < 10 {
            return Err(Error::InvalidArgument("hessian probe needs at least 10 iterations".into()));
        }
        let xm = points_matrix(std::slice::from_ref(x), self.arch.input_dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut best = HessianProbe {
            estimate: 0.0,
            converged: true,
        };
        let theta_norm = self.theta.norm().max(1.0);
        let mut probe_net = self.clone();
        for k in 0..self.arch.output_dim {
            let mut v = DVector::from_fn(self.theta.len(), |_, _| normal.sample(&mut rng));
            v /= v.norm();
            let mut est = 0.0;
            let mut converged = false;
            for _ in 0..iters {
                let eps = 1e-4 * theta_norm / v.norm();
                probe_net.theta = &self.theta + &v * eps;
                let gp = probe_net.output_gradient(&xm, k)?;
                probe_net.theta = &self.theta - &v * eps;
                let gm = probe_net.output_gradient(&xm, k)?;
                let hv = (gp - gm) / (2.0 * eps);
                let new_est = hv.norm();
                if new_est == 0.0 {
                    est = 0.0;
                    converged = true;
                    break;
                }
                let rel = (new_est - est).abs() / new_est;
                est = new_est;
                v = hv / new_est;
                if rel < 1e-6 {
                    converged = true;
                    break;
                }
            }
            if est > best.estimate {
                best.estimate = est;
            }
            best.converged &= converged;
        }
        Ok(best)
    }

    /// Spectral norm of the `K × p` Jacobian at `x`, `√λ_max(Θ̂(x, x))`.
    pub fn jacobian_norm(&self, x: &DVector<f64>) -> Result<f64> {
        let ntk = self.empirical_ntk(std::slice::from_ref(x))?;
        Ok(crate::linalg::sym_eigenvalues(&ntk).last().copied().unwrap_or(0.0).max(0.0).sqrt())
    }
}

/// `N × N` class-averaged diagonal blocks of a point-major `NK × NK` kernel,
/// for comparison with a scalar analytic kernel.
pub fn class_collapse(full: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let n = full.nrows() / k;
    DMatrix::from_fn(n, n, |i, j| (0..k).map(|c| full[(i * k + c, j * k + c)]).sum::<f64>() / k as f64)
}

/// Frobenius norms of the off-diagonal and diagonal class blocks, i.e. of
/// the entries `(i·K + a, j·K + b)` with `a ≠ b` and with `a = b`.
pub fn class_block_norms(full: &DMatrix<f64>, k: usize) -> (f64, f64) {
    let (mut off, mut diag) = (0.0, 0.0);
    for c in 0..full.ncols() {
        for r in 0..full.nrows() {
            let v = full[(r, c)] * full[(r, c)];
            if r % k == c % k {
                diag += v;
            } else {
                off += v;
            }
        }
    }
    (f64::sqrt(off), f64::sqrt(diag))
}

/// Column-major `K × N` outputs to a point-major vector.
pub fn flatten_outputs(out: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(out.as_slice())
}

pub fn unflatten(arch: &ArchSpec, theta: &DVector<f64>) -> Vec<(DMatrix<f64>, DVector<f64>)> {
    layer_shapes(arch)
        .iter()
        .map(|s| {
            let w = DMatrix::from_column_slice(s.rows, s.cols, &theta.as_slice()[s.w_offset..s.b_offset]);
            let b = DVector::from_column_slice(&theta.as_slice()[s.b_offset..s.b_offset + s.rows]);
            (w, b)
        })
        .collect()
}

pub fn flatten(layers: &[(DMatrix<f64>, DVector<f64>)]) -> DVector<f64> {
    let mut v = Vec::new();
    for (w, b) in layers {
        v.extend_from_slice(w.as_slice());
        v.extend_from_slice(b.as_slice());
    }
    DVector::from_vec(v)
}

fn forward_with(arch: &ArchSpec, theta: &[f64], x: &DMatrix<f64>, keep: bool) -> Result<ForwardCache> {
    if x.nrows() != arch.input_dim {
        return Err(Error::DimensionMismatch {
            context: "network input",
            expected: arch.input_dim,
            got: x.nrows(),
        });
    }
    let shapes = layer_shapes(arch);
    check_len("parameter vector", param_count(arch), theta.len())?;
    let n = x.ncols();
    let mut acts = Vec::with_capacity(shapes.len());
    let mut dphi = Vec::with_capacity(shapes.len());
    let mut a = x.clone();
    for (l, s) in shapes.iter().enumerate() {
        let w = DMatrixView::from_slice(&theta[s.w_offset..s.b_offset], s.rows, s.cols);
        let b = &theta[s.b_offset..s.b_offset + s.rows];
        let mut h = DMatrix::zeros(s.rows, n);
        h.gemm(s.scale(), &w, &a, 0.0);
        for mut col in h.column_iter_mut() {
            for (c, bv) in col.iter_mut().zip(b) {
                *c += bv;
            }
        }
        let prev = std::mem::replace(&mut a, DMatrix::zeros(0, 0));
        if keep || l + 1 == shapes.len() {
            acts.push(prev);
        }
        if l + 1 == shapes.len() {
            a = h;
        } else {
            if keep {
                dphi.push(h.map(|u| arch.activation.derivative(u)));
            }
            a = h.map(|u| arch.activation.apply(u));
        }
    }
    if !keep {
        acts.clear();
    }
    Ok(ForwardCache { acts, dphi, out: a })
}
