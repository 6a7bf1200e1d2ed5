//! Online Gradient Descent with Buffer Zones (OGD-BZ) for constrained online
//! control of linear systems under bounded disturbances.
//!
//! The library is organized around the pipeline of a single experiment:
//!
//! 1. [`system`] — the LTI plant `x_{t+1} = A x_t + B u_t + w_t`, affine
//!    constraints `D_x x <= d_x`, `D_u u <= d_u`, and strong-stability
//!    certification of the base feedback gain.
//! 2. [`policy`] — disturbance-action policies `u_t = -K x_t + sum_i M[i] w_{t-i}`
//!    and the coefficient maps that make states/actions affine in the policy.
//! 3. [`constraints`] — worst-case (robust) constraint values over box-bounded
//!    disturbances, buffer-size calculus, and the lifted polytope `Omega_eps`.
//! 4. [`qp`] — Euclidean projection onto the lifted polytope (ADMM with an
//!    active-set polish) and the phase-one feasibility LP.
//! 5. [`ogd`] — the OGD-BZ driver: online gradient steps plus projection.
//! 6. [`sim`] — rollout engine, disturbance generators, safety audits,
//!    hindsight benchmarks and regret accounting.

pub mod constraints;
pub mod error;
pub mod linalg;
pub mod ogd;
pub mod policy;
pub mod qp;
pub mod sim;
pub mod sparse;
pub mod system;

pub use error::{Error, Result};
