//! Adaptive Dormand–Prince 5(4) integrator for autonomous-or-not systems
//! `dy/dt = f(t, y)`.
//!
//! Requested checkpoint times are hit exactly (steps are shortened to land on
//! them), and a per-step callback sees every accepted step and may stop the
//! integration early.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Initial step; chosen automatically when `None`.
    pub h0: Option<f64>,
    /// Steps are abandoned (step underflow) below `h_min_rel · max(1, |t|)`.
    pub h_min_rel: f64,
    pub h_max: f64,
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-6,
            atol: 1e-9,
            h0: None,
            h_min_rel: 1e-13,
            h_max: f64::INFINITY,
            max_steps: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OdeStatus {
    Completed,
    Stopped,
    StepUnderflow,
    MaxSteps,
}

#[derive(Debug, Clone)]
pub struct OdeOutcome {
    pub t: f64,
    pub y: DVector<f64>,
    pub status: OdeStatus,
    pub accepted: usize,
    pub rejected: usize,
    pub rhs_evals: usize,
}

impl OdeOutcome {
    /// Converts the two failure statuses into errors.
    pub fn into_result(self, max_steps: usize) -> Result<Self> {
        match self.status {
            OdeStatus::StepUnderflow => Err(Error::StepUnderflow { t: self.t }),
            OdeStatus::MaxSteps => Err(Error::MaxSteps { max_steps, t: self.t }),
            _ => Ok(self),
        }
    }
}

/// Returned by the per-step callback.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepControl {
    Continue,
    Stop,
}

/// A single accepted step, as seen by the step callback.
pub struct StepInfo<'a> {
    pub t_prev: f64,
    pub y_prev: &'a DVector<f64>,
    pub t: f64,
    pub y: &'a DVector<f64>,
    /// True when `t` is one of the requested checkpoints.
    pub at_checkpoint: bool,
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
// Differences between the 5th- and 4th-order weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

fn error_norm(err: &DVector<f64>, y0: &DVector<f64>, y1: &DVector<f64>, opts: &OdeOptions) -> f64 {
    if err.is_empty() {
        return 0.0;
    }
    let s: f64 = err
        .iter()
        .zip(y0.iter().zip(y1.iter()))
        .map(|(e, (a, b))| {
            let sc = opts.atol + opts.rtol * a.abs().max(b.abs());
            (e / sc) * (e / sc)
        })
        .sum();
    (s / err.len() as f64).sqrt()
}

fn initial_step<F>(f: &mut F, t0: f64, y0: &DVector<f64>, f0: &DVector<f64>, opts: &OdeOptions) -> f64
where
    F: FnMut(f64, &DVector<f64>) -> DVector<f64>,
{
    let scale = y0.map(|v| opts.atol + opts.rtol * v.abs());
    let d0 = y0.component_div(&scale).norm() / (y0.len().max(1) as f64).sqrt();
    let d1 = f0.component_div(&scale).norm() / (y0.len().max(1) as f64).sqrt();
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let y1 = y0 + f0 * h0;
    let f1 = f(t0 + h0, &y1);
    let d2 = (&f1 - f0).component_div(&scale).norm() / (y0.len().max(1) as f64).sqrt() / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / 5.0)
    };
    (100.0 * h0).min(h1)
}

/// Integrates from `t0` through every time in `checkpoints` (strictly
/// increasing, all `> t0`). `on_step` is called after every accepted step.
pub fn integrate<F, S>(
    mut f: F,
    t0: f64,
    y0: DVector<f64>,
    checkpoints: &[f64],
    opts: &OdeOptions,
    mut on_step: S,
) -> Result<OdeOutcome>
where
    F: FnMut(f64, &DVector<f64>) -> DVector<f64>,
    S: FnMut(&StepInfo<'_>) -> StepControl,
{
    if checkpoints.windows(2).any(|w| w[1] <= w[0]) || checkpoints.first().is_some_and(|&c| c <= t0) {
        return Err(Error::InvalidArgument("checkpoints must be strictly increasing and after t0".into()));
    }
    let mut t = t0;
    let mut y = y0;
    let mut k1 = f(t, &y);
    let mut rhs_evals = 1;
    let mut h = match opts.h0 {
        Some(h) => h,
        None => {
            rhs_evals += 1;
            initial_step(&mut f, t, &y, &k1, opts)
        }
    }
    .min(opts.h_max);
    let (mut accepted, mut rejected) = (0, 0);
    let mut next_cp = 0;
    let outcome = |t, y, status, accepted, rejected, rhs_evals| OdeOutcome {
        t,
        y,
        status,
        accepted,
        rejected,
        rhs_evals,
    };

    while next_cp < checkpoints.len() {
        if accepted + rejected >= opts.max_steps {
            return Ok(outcome(t, y, OdeStatus::MaxSteps, accepted, rejected, rhs_evals));
        }
        let target = checkpoints[next_cp];
        let mut hit = false;
        let mut step = h;
        if t + step >= target || (target - t - step) < 1e-12 * target.abs().max(1.0) {
            step = target - t;
            hit = true;
        }
        if step < opts.h_min_rel * t.abs().max(1.0) && !hit {
            return Ok(outcome(t, y, OdeStatus::StepUnderflow, accepted, rejected, rhs_evals));
        }

        let k2 = f(t + C2 * step, &(&y + &k1 * (A21 * step)));
        let k3 = f(t + C3 * step, &(&y + (&k1 * A31 + &k2 * A32) * step));
        let k4 = f(t + C4 * step, &(&y + (&k1 * A41 + &k2 * A42 + &k3 * A43) * step));
        let k5 = f(t + C5 * step, &(&y + (&k1 * A51 + &k2 * A52 + &k3 * A53 + &k4 * A54) * step));
        let k6 = f(t + step, &(&y + (&k1 * A61 + &k2 * A62 + &k3 * A63 + &k4 * A64 + &k5 * A65) * step));
        let y_new = &y + (&k1 * B1 + &k3 * B3 + &k4 * B4 + &k5 * B5 + &k6 * B6) * step;
        let k7 = f(t + step, &y_new);
        rhs_evals += 6;
        let err = (&k1 * E1 + &k3 * E3 + &k4 * E4 + &k5 * E5 + &k6 * E6 + &k7 * E7) * step;
        let en = error_norm(&err, &y, &y_new, opts);

        if en <= 1.0 && y_new.iter().all(|v| v.is_finite()) {
            let t_new = if hit { target } else { t + step };
            let info = StepInfo {
                t_prev: t,
                y_prev: &y,
                t: t_new,
                y: &y_new,
                at_checkpoint: hit,
            };
            let control = on_step(&info);
            accepted += 1;
            t = t_new;
            y = y_new;
            k1 = k7;
            if hit {
                next_cp += 1;
            }
            let fac = if en == 0.0 { 5.0 } else { (0.9 * en.powf(-0.2)).clamp(0.2, 5.0) };
            // A step truncated to land on a checkpoint says little about the
            // natural step size; keep the previous proposal in that case.
            h = if hit { h.max(step * fac) } else { step * fac }.min(opts.h_max);
            if control == StepControl::Stop {
                return Ok(outcome(t, y, OdeStatus::Stopped, accepted, rejected, rhs_evals));
            }
        } else {
            rejected += 1;
            let fac = if en.is_finite() { (0.9 * en.powf(-0.2)).clamp(0.1, 0.9) } else { 0.1 };
            h = step * fac;
            if h < opts.h_min_rel * t.abs().max(1.0) {
                return Ok(outcome(t, y, OdeStatus::StepUnderflow, accepted, rejected, rhs_evals));
            }
        }
    }
    Ok(outcome(t, y, OdeStatus::Completed, accepted, rejected, rhs_evals))
}

/// Evenly spaced checkpoints `every, 2·every, …` ending exactly at `t_end`.
pub fn checkpoint_grid(t0: f64, t_end: f64, every: f64) -> Vec<f64> {
    if !(every > 0.0) || t_end <= t0 {
        return vec![t_end];
    }
    let n = ((t_end - t0) / every).ceil().max(1.0) as usize;
    let mut v: Vec<f64> = (1..n).map(|i| t0 + every * i as f64).filter(|&t| t < t_end).collect();
    v.push(t_end);
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay_hits_checkpoints() {
        let mut seen = Vec::new();
        let out = integrate(
            |_, y| -y,
            0.0,
            DVector::from_vec(vec![1.0, 2.0]),
            &[0.5, 1.0, 3.0],
            &OdeOptions::default(),
            |s| {
                if s.at_checkpoint {
                    seen.push((s.t, s.y[0]));
                }
                StepControl::Continue
            },
        )
        .unwrap();
        assert_eq!(out.status, OdeStatus::Completed);
        assert_eq!(seen.iter().map(|p| p.0).collect::<Vec<_>>(), vec![0.5, 1.0, 3.0]);
        for (t, v) in seen {
            assert!((v - (-t).exp()).abs() < 1e-7);
        }
        assert!((out.y[1] - 2.0 * (-3.0f64).exp()).abs() < 1e-7);
    }

    #[test]
    fn harmonic_oscillator_is_accurate() {
        let out = integrate(
            |_, y| DVector::from_vec(vec![y[1], -y[0]]),
            0.0,
            DVector::from_vec(vec![1.0, 0.0]),
            &[10.0],
            &OdeOptions { rtol: 1e-10, atol: 1e-12, ..Default::default() },
            |_| StepControl::Continue,
        )
        .unwrap();
        assert!((out.y[0] - 10f64.cos()).abs() < 1e-8);
        assert!((out.y[1] + 10f64.sin()).abs() < 1e-8);
    }

    #[test]
    fn callback_can_stop_and_max_steps_is_reported() {
        let out = integrate(|_, y| -y, 0.0, DVector::from_element(1, 1.0), &[100.0], &OdeOptions::default(), |s| {
            if s.y[0] < 0.5 {
                StepControl::Stop
            } else {
                StepControl::Continue
            }
        })
        .unwrap();
        assert_eq!(out.status, OdeStatus::Stopped);
        assert!(out.t < 100.0);

        let opts = OdeOptions { max_steps: 3, ..Default::default() };
        let out = integrate(|_, y| -y, 0.0, DVector::from_element(1, 1.0), &[100.0], &opts, |_| StepControl::Continue).unwrap();
        assert_eq!(out.status, OdeStatus::MaxSteps);
        assert!(matches!(out.into_result(3), Err(Error::MaxSteps { .. })));
    }

    #[test]
    fn finite_time_blowup_underflows() {
        // y' = y², y(0) = 1 blows up at t = 1.
        let out = integrate(
            |_, y| y.map(|v| v * v),
            0.0,
            DVector::from_element(1, 1.0),
            &[2.0],
            &OdeOptions::default(),
            |_| StepControl::Continue,
        )
        .unwrap();
        assert!(out.t < 1.0 + 1e-3 && out.y[0] > 1e6);
        assert!(matches!(out.status, OdeStatus::StepUnderflow | OdeStatus::MaxSteps));
    }

    #[test]
    fn grid_ends_exactly() {
        assert_eq!(checkpoint_grid(0.0, 1.0, 0.25), vec![0.25, 0.5, 0.75, 1.0]);
        assert_eq!(checkpoint_grid(0.0, 1.0, 0.3).last(), Some(&1.0));
        assert_eq!(checkpoint_grid(0.0, 1.0, 0.0), vec![1.0]);
    }
}
