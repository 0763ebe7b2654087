//! Scenario-tree laboratory for BSDEs driven by cylindrical martingales.
//!
//! The crate builds finite filtered probability spaces (exhaustive scenario
//! trees) carrying a family of martingales `M^x` indexed by bond maturities,
//! with covariance prescribed by a finite-rank kernel `Q` against a
//! deterministic clock `A`. On top of that it provides
//!
//! * the dual covariance geometry of measure-valued integrands
//!   ([`measure`], [`kernel`], [`frame`]),
//! * exact conditional expectations and martingale representation
//!   ([`tree`], [`stochastic`]),
//! * backward solvers for the full and small-market BSDEs together with
//!   weighted-norm certificates and Galerkin convergence studies ([`bsde`]),
//! * the bond-market layer: structure condition, Föllmer–Schweizer
//!   decomposition, locally risk-minimizing strategies ([`hedging`]),
//! * a configuration-driven experiment harness with CSV/JSON emission
//!   ([`harness`]).
//!
//! Everything is exact on the tree: conditional expectations are finite sums,
//! so the identities under test are pass/fail up to floating-point roundoff
//! rather than statistical.

// Negated comparisons like `!(x > 0.0)` double as NaN guards; indexed double
// loops are the clearest form for the moment sums.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod bsde;
pub mod error;
pub mod frame;
pub mod harness;
pub mod hedging;
pub mod kernel;
pub mod measure;
pub mod stochastic;
pub mod tree;

pub use error::{Error, Result};
pub use kernel::CovarianceKernel;
pub use measure::{FiniteMeasure, Maturity};
pub use tree::{Clock, ScenarioTree};
