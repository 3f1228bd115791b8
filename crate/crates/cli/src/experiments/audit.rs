//! Numeric audit of the loss assumptions on a sublevel set.

use anyhow::{ensure, Result};
use ntklab::loss::{audit_assumptions, SublevelProbe};
use ntklab::{linalg, LossKind, LossSpec, TargetSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{AuditConfig, ExperimentConfig};
use crate::report::{Assertion, Outcome, RunDir};

/// Tolerance of the MSE identities `K₂ = μ_C = 1`.
pub const MSE_TOL: f64 = 1e-9;
/// Spectral bound of a cross-entropy Hessian block.
pub const CE_HESSIAN_BOUND: f64 = 0.5;

pub struct KindAudit {
    pub kind: LossKind,
    pub spec: LossSpec,
    pub probe: SublevelProbe,
    /// Extreme eigenvalues of `∇²C` over the accepted samples.
    pub hessian_min: f64,
    pub hessian_max: f64,
}

fn kind_name(kind: LossKind) -> String {
    serde_json::to_value(kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
}

/// Random labels over `classes` columns (two for the Brier loss), smoothed.
pub fn audit_spec(a: &AuditConfig, kind: LossKind) -> Result<LossSpec> {
    let classes = if kind == LossKind::BrierRef { 2 } else { a.classes };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let labels: Vec<usize> = (0..a.n_points).map(|_| rng.random_range(0..classes)).collect();
    Ok(LossSpec::new(kind, TargetSet::smoothed(&labels, classes, a.smoothing)?)?)
}

pub fn audit_kind(a: &AuditConfig, kind: LossKind) -> Result<KindAudit> {
    let spec = audit_spec(a, kind)?;
    ensure!(a.k0 > spec.inf_value, "audit.k0 = {} must exceed inf C = {} for {kind:?}", a.k0, spec.inf_value);
    let probe = audit_assumptions(&spec, a.k0, a.samples, a.seed)?;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for z in &probe.samples {
        let eig = linalg::sym_eigenvalues(&spec.hessian(z)?);
        lo = lo.min(eig[0]);
        hi = hi.max(eig[eig.len() - 1]);
    }
    Ok(KindAudit {
        kind,
        spec,
        probe,
        hessian_min: lo,
        hessian_max: hi,
    })
}

pub fn checks(r: &KindAudit) -> Vec<Assertion> {
    let name = kind_name(r.kind);
    let p = &r.probe;
    let n = r.spec.n() as f64;
    let mut out = Vec::new();
    match r.kind {
        LossKind::Ce | LossKind::CeRef => {
            out.push(Assertion::at_most(format!("{name}_k1"), p.k1, (2.0 * n).sqrt(), "max ‖∇C‖ vs √(2N)"));
            if r.kind == LossKind::Ce {
                out.push(Assertion::at_most(
                    format!("{name}_hessian_norm"),
                    r.hessian_max,
                    CE_HESSIAN_BOUND,
                    "largest Hessian eigenvalue over the samples",
                ));
                if let Some(bound) = p.mu_c_analytic {
                    out.push(Assertion::at_least(format!("{name}_mu_c"), p.mu_c, bound, "empirical μ_C vs analytic lower bound"));
                }
            } else {
                out.push(Assertion::above(
                    format!("{name}_hessian_pd"),
                    r.hessian_min,
                    0.0,
                    "smallest Hessian eigenvalue over the samples",
                ));
            }
        }
        LossKind::Mse => {
            out.push(Assertion::at_most(format!("{name}_k2"), (p.k2 - 1.0).abs(), MSE_TOL, "|K₂ − 1|"));
            out.push(Assertion::at_most(format!("{name}_mu_c"), (p.mu_c - 1.0).abs(), MSE_TOL, "|μ_C − 1|"));
        }
        LossKind::BrierRef => {}
    }
    out
}

pub fn run(cfg: &ExperimentConfig, dir: &mut RunDir, out: &mut Outcome) -> Result<()> {
    let mut w = dir.csv("audit.csv")?;
    w.write_record([
        "kind",
        "k0",
        "k1",
        "k2",
        "mu_c",
        "mu_c_analytic",
        "hessian_min",
        "hessian_max",
        "accepted",
        "skipped",
        "proposals",
    ])?;
    for &kind in &cfg.audit.kinds {
        let r = audit_kind(&cfg.audit, kind)?;
        let p = &r.probe;
        w.serialize((
            kind_name(kind),
            p.k0,
            p.k1,
            p.k2,
            p.mu_c,
            p.mu_c_analytic,
            r.hessian_min,
            r.hessian_max,
            p.samples.len(),
            p.skipped,
            p.proposals,
        ))?;
        if p.samples.len() < cfg.audit.samples {
            out.notes.push(format!("{}: only {} of {} samples accepted", kind_name(kind), p.samples.len(), cfg.audit.samples));
        }
        for a in checks(&r) {
            out.check(a);
        }
    }
    w.flush()?;
    Ok(())
}
