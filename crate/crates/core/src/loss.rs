//! Function-space losses `C(z)` on stacked network outputs.
//!
//! All four kinds are sums of per-point terms, so gradients are per-block and
//! Hessians are block-diagonal with `N` blocks of size `K × K`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    Ce,
    CeRef,
    BrierRef,
}

impl LossKind {
    /// Number of target columns for `k` logits.
    pub fn target_columns(self, k: usize) -> usize {
        match self {
            LossKind::Mse | LossKind::Ce => k,
            LossKind::CeRef | LossKind::BrierRef => k + 1,
        }
    }

    pub fn logit_dim(self, columns: usize) -> usize {
        match self {
            LossKind::Mse | LossKind::Ce => columns,
            LossKind::CeRef | LossKind::BrierRef => columns.saturating_sub(1),
        }
    }
}

/// Training targets: one row per point. For the reference-class kinds the
/// row has `K + 1` entries and column 0 is the reference class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSet {
    pub probs: DMatrix<f64>,
    #[serde(default)]
    pub labels: Option<Vec<usize>>,
}

impl TargetSet {
    pub fn new(probs: DMatrix<f64>) -> Self {
        Self { probs, labels: None }
    }

    /// One-hot rows over `classes` columns.
    pub fn one_hot(labels: &[usize], classes: usize) -> Result<Self> {
        Self::smoothed(labels, classes, 0.0)
    }

    /// Label-smoothed rows `(1 − ε)·onehot + ε/classes`.
    pub fn smoothed(labels: &[usize], classes: usize, eps: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&eps) {
            return Err(Error::InvalidArgument(format!("smoothing {eps} outside [0, 1]")));
        }
        let mut probs = DMatrix::from_element(labels.len(), classes, eps / classes as f64);
        for (i, &l) in labels.iter().enumerate() {
            if l >= classes {
                return Err(Error::InvalidArgument(format!("label {l} out of range for {classes} classes")));
            }
            probs[(i, l)] += 1.0 - eps;
        }
        Ok(Self {
            probs,
            labels: Some(labels.to_vec()),
        })
    }

    /// Reads one row per point; a non-numeric first row is treated as a header.
    pub fn from_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)?;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
            match parsed {
                Ok(r) => rows.push(r),
                Err(_) if line == 0 => continue,
                Err(e) => return Err(Error::InvalidArgument(format!("targets csv row {}: {e}", line + 1))),
            }
        }
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) || cols == 0 {
            return Err(Error::InvalidArgument("targets csv rows must be nonempty and of equal length".into()));
        }
        let flat: Vec<f64> = rows.concat();
        Ok(Self::new(DMatrix::from_row_slice(rows.len(), cols, &flat)))
    }

    pub fn len(&self) -> usize {
        self.probs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn columns(&self) -> usize {
        self.probs.ncols()
    }

    pub fn full_support(&self) -> bool {
        self.probs.iter().all(|&p| p > 0.0)
    }

    fn validate_probabilities(&self) -> Result<()> {
        for (i, row) in self.probs.row_iter().enumerate() {
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(Error::InvalidArgument(format!("target row {i} has entries outside [0, 1]")));
            }
            let s: f64 = row.sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidArgument(format!("target row {i} sums to {s}")));
            }
        }
        Ok(())
    }

    /// Sum of row entropies (`0·log 0 = 0`).
    pub fn total_entropy(&self) -> f64 {
        self.probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "LossSpecDoc", try_from = "LossSpecDoc")]
pub struct LossSpec {
    pub kind: LossKind,
    pub targets: TargetSet,
    pub inf_value: f64,
    n: usize,
    k: usize,
}

#[derive(Serialize, Deserialize)]
struct LossSpecDoc {
    kind: LossKind,
    targets: TargetSet,
}

impl From<LossSpec> for LossSpecDoc {
    fn from(s: LossSpec) -> Self {
        Self {
            kind: s.kind,
            targets: s.targets,
        }
    }
}

impl TryFrom<LossSpecDoc> for LossSpec {
    type Error = Error;

    fn try_from(doc: LossSpecDoc) -> Result<Self> {
        LossSpec::new(doc.kind, doc.targets)
    }
}

/// Numerically stable `log Σ_k e^{z_k}`.
pub fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Softmax over `K` logits plus a reference logit fixed at zero. Returns the
/// `K` class probabilities and the reference probability.
pub fn softmax_ref(z: &[f64]) -> (Vec<f64>, f64) {
    let m = z.iter().copied().fold(0.0f64, f64::max);
    let e0 = (-m).exp();
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s = e0 + e.iter().sum::<f64>();
    (e.into_iter().map(|v| v / s).collect(), e0 / s)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `diag(s) − s sᵀ`.
fn softmax_hessian(s: &[f64]) -> DMatrix<f64> {
    let k = s.len();
    DMatrix::from_fn(k, k, |a, b| if a == b { s[a] - s[a] * s[a] } else { -s[a] * s[b] })
}

/// Jacobian of one point's class probabilities with respect to its logits:
/// `K × K` for MSE and CE, `(K+1) × K` with the reference class in row 0 for
/// the reference-class losses.
pub fn probability_jacobian(kind: LossKind, z: &[f64]) -> DMatrix<f64> {
    match kind {
        LossKind::Mse | LossKind::Ce => softmax_hessian(&softmax(z)),
        LossKind::CeRef | LossKind::BrierRef => {
            let (p, p0) = softmax_ref(z);
            let mut s = Vec::with_capacity(p.len() + 1);
            s.push(p0);
            s.extend(p);
            softmax_hessian(&s).columns(1, z.len()).into_owned()
        }
    }
}

impl LossSpec {
    pub fn new(kind: LossKind, targets: TargetSet) -> Result<Self> {
        let cols = targets.columns();
        let n = targets.len();
        if n == 0 || cols == 0 {
            return Err(Error::InvalidArgument("empty target set".into()));
        }
        let k = kind.logit_dim(cols);
        if k == 0 {
            return Err(Error::InvalidArgument(format!("{kind:?} needs at least two target columns")));
        }
        match kind {
            LossKind::Mse => {
                if targets.probs.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidArgument("MSE targets must be finite".into()));
                }
            }
            LossKind::Ce | LossKind::CeRef => targets.validate_probabilities()?,
            LossKind::BrierRef => {
                targets.validate_probabilities()?;
                if k != 1 {
                    return Err(Error::InvalidArgument("Brier with reference class is defined for K = 1 only".into()));
                }
            }
        }
        let inf_value = match kind {
            LossKind::Mse | LossKind::BrierRef => 0.0,
            LossKind::Ce | LossKind::CeRef => targets.total_entropy(),
        };
        Ok(Self {
            kind,
            targets,
            inf_value,
            n,
            k,
        })
    }

    /// MSE with regression targets given as an `N × K` matrix.
    pub fn mse(y: DMatrix<f64>) -> Result<Self> {
        Self::new(LossKind::Mse, TargetSet::new(y))
    }

    /// Number of training points.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Logit dimension `K`.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.n * self.k
    }

    /// MSE targets flattened point-major.
    pub fn target_vector(&self) -> DVector<f64> {
        DVector::from_iterator(self.dim(), self.targets.probs.transpose().iter().copied())
    }

    /// A copy with different targets of the same shape.
    pub fn with_targets(&self, targets: TargetSet) -> Result<Self> {
        Self::new(self.kind, targets)
    }

    fn check(&self, z: &DVector<f64>) -> Result<()> {
        check_len("loss input z", self.dim(), z.len())
    }

    fn row(&self, i: usize) -> Vec<f64> {
        self.targets.probs.row(i).iter().copied().collect()
    }

    fn point_value(&self, i: usize, zi: &[f64]) -> f64 {
        let p = self.row(i);
        match self.kind {
            LossKind::Mse => 0.5 * zi.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
            LossKind::Ce => -zi.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>() + log_sum_exp(zi),
            LossKind::CeRef => {
                let mut ext = Vec::with_capacity(zi.len() + 1);
                ext.push(0.0);
                ext.extend_from_slice(zi);
                -zi.iter().zip(&p[1..]).map(|(a, b)| a * b).sum::<f64>() + log_sum_exp(&ext)
            }
            LossKind::BrierRef => {
                let r = sigmoid(zi[0]) - p[1];
                0.5 * r * r
            }
        }
    }

    fn point_gradient(&self, i: usize, zi: &[f64]) -> Vec<f64> {
        let p = self.row(i);
        match self.kind {
            LossKind::Mse => zi.iter().zip(&p).map(|(a, b)| a - b).collect(),
            LossKind::Ce => softmax(zi).iter().zip(&p).map(|(s, q)| s - q).collect(),
            LossKind::CeRef => softmax_ref(zi).0.iter().zip(&p[1..]).map(|(s, q)| s - q).collect(),
            LossKind::BrierRef => {
                let s = sigmoid(zi[0]);
                vec![(s - p[1]) * s * (1.0 - s)]
            }
        }
    }

    fn point_hessian(&self, i: usize, zi: &[f64]) -> DMatrix<f64> {
        match self.kind {
            LossKind::Mse => DMatrix::identity(self.k, self.k),
            LossKind::Ce => softmax_hessian(&softmax(zi)),
            LossKind::CeRef => softmax_hessian(&softmax_ref(zi).0),
            LossKind::BrierRef => {
                let y = self.targets.probs[(i, 1)];
                let s = sigmoid(zi[0]);
                let ds = s * (1.0 - s);
                DMatrix::from_element(1, 1, ds * ds + (s - y) * ds * (1.0 - 2.0 * s))
            }
        }
    }

    pub fn value(&self, z: &DVector<f64>) -> Result<f64> {
        self.check(z)?;
        Ok(z.as_slice().chunks(self.k).enumerate().map(|(i, zi)| self.point_value(i, zi)).sum())
    }

    pub fn gradient(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(z)?;
        let mut g = Vec::with_capacity(self.dim());
        for (i, zi) in z.as_slice().chunks(self.k).enumerate() {
            g.extend(self.point_gradient(i, zi));
        }
        Ok(DVector::from_vec(g))
    }

    /// The `N` diagonal `K × K` blocks of the Hessian.
    pub fn hessian_blocks(&self, z: &DVector<f64>) -> Result<Vec<DMatrix<f64>>> {
        self.check(z)?;
        Ok(z.as_slice().chunks(self.k).enumerate().map(|(i, zi)| self.point_hessian(i, zi)).collect())
    }

    /// Dense block-diagonal Hessian.
    pub fn hessian(&self, z: &DVector<f64>) -> Result<DMatrix<f64>> {
        let blocks = self.hessian_blocks(z)?;
        Ok(block_diagonal(&blocks))
    }
}

pub fn block_diagonal(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let total: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(total, total);
    let mut off = 0;
    for b in blocks {
        let k = b.nrows();
        out.view_mut((off, off), (k, k)).copy_from(b);
        off += k;
    }
    out
}

/// Applies `P = I_K − (1/K)·11ᵀ` to every length-`K` block.
pub fn center_project(z: &DVector<f64>, k: usize) -> Result<DVector<f64>> {
    if k == 0 || z.len() % k != 0 {
        return Err(Error::DimensionMismatch {
            context: "center_project block size",
            expected: k,
            got: z.len(),
        });
    }
    let mut out = z.clone();
    for block in out.as_mut_slice().chunks_mut(k) {
        let m = block.iter().sum::<f64>() / k as f64;
        block.iter_mut().for_each(|v| *v -= m);
    }
    Ok(out)
}

/// Sublevel-set probe of a loss: Monte-Carlo estimates of the constants in the
/// bounded-gradient, gradient-growth and PL assumptions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SublevelProbe {
    pub k0: f64,
    pub samples: Vec<DVector<f64>>,
    /// `max ‖∇C‖`.
    pub k1: f64,
    /// `max ‖∇C‖² / (2(C − inf C))`.
    pub k2: f64,
    /// `min ‖∇C‖² / (2(C − inf C))`.
    pub mu_c: f64,
    /// `½·min e^{−K0/p_ik}`, reported for CE with full-support targets.
    pub mu_c_analytic: Option<f64>,
    pub proposals: usize,
    /// Accepted samples excluded from the ratio estimates (`C − inf C < 10⁻¹²`).
    pub skipped: usize,
}

/// Proposal scales cycled through during rejection sampling.
pub const PROPOSAL_SCALES: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

/// Rejection-samples `z ~ N(0, s²I)` with `C(z) ≤ K0` and reports empirical
/// assumption constants.
pub fn audit_assumptions(spec: &LossSpec, k0: f64, n_samples: usize, seed: u64) -> Result<SublevelProbe> {
    if !(k0 > spec.inf_value) {
        return Err(Error::InvalidArgument(format!("K0 = {k0} must exceed inf C = {}", spec.inf_value)));
    }
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
    }
    let max_proposals = 1000 * n_samples + 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n_samples);
    let (mut k1, mut k2, mut mu) = (0.0f64, 0.0f64, f64::INFINITY);
    let mut proposals = 0;
    let mut skipped = 0;
    while samples.len() < n_samples && proposals < max_proposals {
        let s = PROPOSAL_SCALES[proposals % PROPOSAL_SCALES.len()];
        proposals += 1;
        let normal = Normal::new(0.0, s).expect("positive scale");
        let z = DVector::from_fn(spec.dim(), |_, _| normal.sample(&mut rng));
        let c = spec.value(&z)?;
        if c > k0 {
            continue;
        }
        let g2 = spec.gradient(&z)?.norm_squared();
        k1 = k1.max(g2.sqrt());
        let excess = c - spec.inf_value;
        if excess < 1e-12 {
            skipped += 1;
        } else {
            let ratio = g2 / (2.0 * excess);
            k2 = k2.max(ratio);
            mu = mu.min(ratio);
        }
        samples.push(z);
    }
    if samples.is_empty() {
        return Err(Error::NoAcceptedSamples { proposals });
    }
    let mu_c_analytic = (spec.kind == LossKind::Ce && spec.targets.full_support())
        .then(|| 0.5 * spec.targets.probs.iter().map(|&p| (-k0 / p).exp()).fold(f64::INFINITY, f64::min));
    Ok(SublevelProbe {
        k0,
        samples,
        k1,
        k2,
        mu_c: if mu.is_finite() { mu } else { f64::NAN },
        mu_c_analytic,
        proposals,
        skipped,
    })
}
