//! Finite-difference toolkit for weakly coupled systems of Kolmogorov
//! operators
//!
//! ```text
//! (A u)_j = sum_{h,k} q_hk D_hk u_j + sum_k b_k D_k u_j + sum_k sum_i (B_k)_ji D_k u_i
//! ```
//!
//! with unbounded coefficients: semigroup evolution on truncated boxes,
//! forward (adjoint) kernel evolution, Cesaro averages, resolvents,
//! hypothesis audits, estimate checks and systems of invariant measures.

pub mod audit;
pub mod density;
mod error;
pub mod estimates;
pub mod expr;
pub mod grid;
pub mod invariant;
pub mod ode;
pub mod operator;
pub mod solver;
pub mod sparse;

pub use error::{Error, Result};
pub use expr::{parse, Expr, ExprError, Params, Scope};
pub use grid::{Boundary, Grid};
pub use operator::{OperatorSpec, VectorField};
