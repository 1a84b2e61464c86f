//! LVRT-constrained stability region estimation for lossless classical
//! multi-machine power systems.
//!
//! Pipeline: [`netmodel`] builds the reduced network and equilibria,
//! [`dynamics`] holds the COA-frame deviation model, [`lff`] searches the
//! Lyapunov function family, [`feasreg`] builds the polytopic inner
//! approximation of the feasibility region, [`csr`] expands certified level
//! sets and assesses faults, and [`oracle`] provides brute-force ground truth.

// negated float comparisons are the NaN-rejecting form throughout
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod barrier;
pub mod csr;
pub mod error;
pub mod exec;
pub mod feasreg;
pub mod lff;
pub mod linalg;
pub mod netmodel;
pub mod ode;
pub mod oracle;
pub mod report;
pub mod dynamics;

pub use error::{Error, Result};
pub use exec::Mode;
pub use nalgebra;
