//! Optimal-PhiBE: continuous-time policy iteration from discrete-time
//! trajectory data, with exact LQR and Merton environments and analytic oracles.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod basis;
pub mod coefficients;
pub mod environments;
pub mod error;
pub mod experiments;
pub mod matcore;
pub mod oracles;
pub mod policy_eval;
pub mod policy_iteration;
pub mod q_approx;
pub mod windows;

mod lsq;

pub use error::{Error, Result};
