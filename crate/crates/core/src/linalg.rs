//! Small dense linear-algebra helpers shared by the kernel, flow and ensemble
//! modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative jitter added to kernel matrices before inversion, as a multiple of
/// `trace / N`.
pub const DEFAULT_JITTER: f64 = 1e-8;

/// Applies `(kernel ⊗ I_K)` to a point-major, class-minor vector.
///
/// `kernel` is `rows × cols`; `v` has length `cols * k` and the result has
/// length `rows * k`.
pub fn kron_apply(kernel: &DMatrix<f64>, v: &DVector<f64>, k: usize) -> DVector<f64> {
    assert_eq!(v.len(), kernel.ncols() * k, "kron_apply: vector length");
    // Column-major K × cols view: column j holds the K outputs of point j.
    let as_mat = DMatrix::from_column_slice(k, kernel.ncols(), v.as_slice());
    let out = as_mat * kernel.transpose();
    DVector::from_column_slice(out.as_slice())
}

/// Dense `kernel ⊗ I_K`.
pub fn kron_expand(kernel: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    kernel.kronecker(&DMatrix::<f64>::identity(k, k))
}

pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let mut vals: Vec<f64> = SymmetricEigen::new(symmetrize(m)).eigenvalues.iter().copied().collect();
    vals.sort_by(|a, b| a.total_cmp(b));
    vals
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).first().copied().unwrap_or(0.0)
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

pub fn max_abs_vec(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
}

pub fn trace(m: &DMatrix<f64>) -> f64 {
    m.diagonal().sum()
}

/// Absolute jitter `rel * trace / N` for a square matrix.
pub fn jitter_for(m: &DMatrix<f64>, rel: f64) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    rel * trace(m) / m.nrows() as f64
}

/// Symmetric eigendecomposition of a (jittered) kernel matrix, used to apply
/// its inverse.
#[derive(Debug, Clone)]
pub struct SymFactor {
    values: DVector<f64>,
    vectors: DMatrix<f64>,
}

impl SymFactor {
    /// Factors `m`, which must already contain any jitter. Fails unless the
    /// smallest eigenvalue is strictly positive.
    pub fn new(m: &DMatrix<f64>) -> Result<Self> {
        let eig = SymmetricEigen::new(symmetrize(m));
        let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
        if m.nrows() > 0 && min <= 0.0 {
            return Err(Error::NotPositiveDefinite {
                min_eigenvalue: min,
                jitter: 0.0,
            });
        }
        Ok(Self {
            values: eig.eigenvalues,
            vectors: eig.eigenvectors,
        })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn condition_number(&self) -> f64 {
        self.max_eigenvalue() / self.min_eigenvalue()
    }

    /// `m⁻¹ B` for a matrix with `dim()` rows.
    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut proj = self.vectors.transpose() * b;
        for (i, mut row) in proj.row_iter_mut().enumerate() {
            row /= self.values[i];
        }
        &self.vectors * proj
    }

    /// `(m⁻¹ ⊗ I_K) v` for a point-major vector.
    pub fn solve_kron(&self, v: &DVector<f64>, k: usize) -> DVector<f64> {
        assert_eq!(v.len(), self.dim() * k, "solve_kron: vector length");
        let as_mat = DMatrix::from_column_slice(k, self.dim(), v.as_slice());
        // (m⁻¹ Vᵀ)ᵀ = V m⁻¹ since m is symmetric.
        let solved = self.solve_mat(&as_mat.transpose()).transpose();
        DVector::from_column_slice(solved.as_slice())
    }

    /// Dense inverse.
    pub fn inverse(&self) -> DMatrix<f64> {
        let mut scaled = self.vectors.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col /= self.values[j];
        }
        &scaled * self.vectors.transpose()
    }
}

/// Cholesky factorization with jitter escalation. `levels` are relative
/// jitters (multiples of `trace / N`) tried in order; the returned jitter is
/// absolute.
pub fn cholesky_escalating(m: &DMatrix<f64>, levels: &[f64]) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let sym = symmetrize(m);
    let mut last = 0.0;
    for &rel in levels {
        let jitter = jitter_for(&sym, rel);
        last = jitter;
        let shifted = &sym + DMatrix::<f64>::identity(sym.nrows(), sym.ncols()) * jitter;
        if let Some(chol) = Cholesky::new(shifted) {
            return Ok((chol, jitter));
        }
    }
    Err(Error::Factorization { jitter: last })
}

/// Solves a general square system with partial-pivot LU; `None` when the
/// matrix is numerically singular.
pub fn lu_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let lu = a.clone().lu();
    let x = lu.solve(b)?;
    if x.iter().all(|v| v.is_finite()) {
        Some(x)
    } else {
        None
    }
}

pub fn lu_solve_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let lu = a.clone().lu();
    let x = lu.solve(b)?;
    if x.iter().all(|v| v.is_finite()) {
        Some(x)
    } else {
        None
    }
}
