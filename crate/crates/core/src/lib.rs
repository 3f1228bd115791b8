//! Numerical laboratory for wide networks trained on classification losses.
//!
//! The crate is organized around the objects that appear when a network in
//! NTK parametrization is trained by gradient flow on a function-space loss:
//!
//! * [`kernel`]: analytic NNGP and NTK kernels of erf networks.
//! * [`loss`]: function-space losses (MSE, cross-entropy with and without a
//!   reference class, Brier with a reference class) and their audits.
//! * [`net`] / [`train`]: finite-width networks, Jacobians, empirical NTKs and
//!   parameter-space gradient flow next to its linearization.
//! * [`flow`]: the infinite-width function-space ODE, the operator
//!   `Φ(z) = Θ∇C(z) + βz`, its Newton inverse and test-point predictions.
//! * [`ensemble`]: the initialization-induced distribution over trained
//!   predictors and its Gaussian / Laplace approximations.
//!
//! Function-space vectors use a point-major, class-minor layout: entry
//! `i * K + k` is output coordinate `k` at point `i`.

pub mod data;
pub mod ensemble;
pub mod error;
pub mod flow;
pub mod kernel;
pub mod linalg;
pub mod loss;
pub mod net;
pub mod ode;
pub mod par;
pub mod stats;
pub mod train;

pub use error::{Error, Result};
pub use kernel::{Activation, ArchSpec, KernelPack};
pub use loss::{LossKind, LossSpec, TargetSet};
pub use net::NetSnapshot;
