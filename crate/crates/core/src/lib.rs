//! Minimal control time, control synthesis and observability diagnostics for
//! one-dimensional linear hyperbolic balance laws
//!
//! ```text
//! ∂t y + Λ(x) ∂x y = M(x) y + 1_ω(x) u,     x ∈ (0, 1)
//! y₋(t, 1) = Q₁ y₊(t, 1),   y₊(t, 0) = Q₀ y₋(t, 0)
//! ```
//!
//! with as many controls as states, acting on an open set `ω`.
//!
//! * [`model`]: problem data, hypothesis checks, interval algebra on `ω`.
//! * [`canon`]: canonical form `L·Q·U = Q⁰` of boundary coupling matrices.
//! * [`times`]: travel times, boundary control times and the minimal control time.
//! * [`pde`]: upwind solvers (forward, backward, boundary-controlled, adjoint)
//!   and an exact characteristics reference for constant speeds.
//! * [`synth`]: control construction by time/space cut-off gluing.
//! * [`obsv`]: observability Gramians and the rank-deficiency counterexample family.
//! * [`cli`]: configuration parsing and the `hyperctl` subcommands.

pub mod canon;
pub mod cli;
pub mod error;
pub mod model;
pub mod obsv;
pub mod pde;
pub mod synth;
pub mod times;

pub use error::{Error, Result};
