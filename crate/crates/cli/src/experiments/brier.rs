//! One-point Brier landscape with a reference class: all stationary points
//! of the regularized objective, located by Newton from a grid of starts.

use anyhow::Result;
use nalgebra::{DMatrix, DVector};
use ntklab::flow::{self, FlowProblem, OutputKernel, StationaryKind, StationaryPoint};
use ntklab::{data, LossKind, LossSpec, TargetSet};

use crate::config::{BrierCase, ExperimentConfig};
use crate::report::{Assertion, Outcome, RunDir};

/// Newton iterates closer than this are the same stationary point.
pub const MERGE_TOL: f64 = 1e-6;

/// The scalar problem `C(z) + (β/2Θ)(z − z₀)²` with `C` the Brier loss of
/// target `(1 − y, y)`.
pub fn scalar_problem(theta: f64, y: f64, beta: f64, z0: f64) -> Result<FlowProblem> {
    let spec = LossSpec::new(LossKind::BrierRef, TargetSet::new(DMatrix::from_row_slice(1, 2, &[1.0 - y, y])))?;
    Ok(FlowProblem::from_kernels(
        OutputKernel::scalar(DMatrix::from_element(1, 1, theta), 1),
        OutputKernel::scalar(DMatrix::zeros(0, 1), 1),
        spec,
        beta,
        1.0,
        DVector::from_element(1, z0),
        DVector::zeros(0),
    )?
    .with_jitter(0.0)?)
}

pub fn kind_name(kind: StationaryKind) -> &'static str {
    match kind {
        StationaryKind::Min => "min",
        StationaryKind::Max => "max",
        StationaryKind::Saddle => "saddle",
        StationaryKind::Degenerate => "degenerate",
    }
}

pub fn locate(cfg: &ExperimentConfig, case: &BrierCase) -> Result<(FlowProblem, Vec<StationaryPoint>)> {
    let b = &cfg.brier;
    let p = scalar_problem(b.theta, b.y, case.beta, case.z0)?;
    let starts = data::grid_1d(b.starts.lo, b.starts.hi, b.starts.count);
    let pts = flow::stationary_points(&p, &starts, MERGE_TOL)?;
    Ok((p, pts))
}

/// Largest distance to the expected points, or `None` when the count or the
/// classification differs.
pub fn match_expected(case: &BrierCase, pts: &[StationaryPoint]) -> Option<f64> {
    if pts.len() != case.expected.len() {
        return None;
    }
    let mut worst = 0.0f64;
    for (p, e) in pts.iter().zip(&case.expected) {
        if kind_name(p.kind) != e.kind {
            return None;
        }
        worst = worst.max((p.z[0] - e.z).abs());
    }
    Some(worst)
}

pub fn run(cfg: &ExperimentConfig, dir: &mut RunDir, out: &mut Outcome) -> Result<()> {
    let b = &cfg.brier;
    let mut land = dir.csv("brier_landscape.csv")?;
    land.write_record(["case", "beta", "z", "objective", "residual"])?;
    let mut stat = dir.csv("brier_stationary.csv")?;
    stat.write_record(["case", "beta", "z", "kind", "curvature", "residual"])?;
    for (i, case) in b.cases.iter().enumerate() {
        let (p, pts) = locate(cfg, case)?;
        for x in data::grid_1d(b.landscape.lo, b.landscape.hi, b.landscape.count) {
            land.serialize((i, case.beta, x[0], p.map_objective(&x)?, p.stationarity_residual(&x)?[0]))?;
        }
        for s in &pts {
            stat.serialize((i, case.beta, s.z[0], kind_name(s.kind), s.curvature[0], s.residual))?;
        }
        let found: Vec<String> = pts.iter().map(|s| format!("{:.6} ({})", s.z[0], kind_name(s.kind))).collect();
        let name = format!("case{i}_beta{}", case.beta);
        match match_expected(case, &pts) {
            Some(err) => out.check(Assertion::at_most(name, err, case.tolerance, format!("found {}", found.join(", ")))),
            None => out.check(Assertion::holds(
                name,
                false,
                format!("expected {} points, found {}", case.expected.len(), found.join(", ")),
            )),
        }
    }
    land.flush()?;
    stat.flush()?;
    Ok(())
}
