//! Deterministic equivalents for resolvents of sample-covariance matrices
//! with independent, non-identically distributed columns, statistics of
//! fixed-point regression estimators, and Monte-Carlo concentration checks.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod concentration;
pub mod cplx_diag;
pub mod error;
pub mod linalg;
pub mod model;
pub mod quadrature;
pub mod regression;
pub mod resolvent;
pub mod rng;

pub use error::{Error, ErrorKind, Result};
