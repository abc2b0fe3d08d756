//! Specification tests for quantile regression models whose regressors may
//! change with the quantile level.
//!
//! The pipeline: a [`specdsl::PiecewiseSpec`] describes the transformation
//! vector, [`qreg`] fits the quantile process on a grid, [`cdfkit`] turns it
//! into conditional and joint CDFs, [`stats`] measures Cramér–von Mises
//! distances and [`bootstrap`] calibrates them. [`mcstudy`] and
//! [`decompose`] drive simulation studies and counterfactual decompositions.

pub mod basis;
pub mod bootstrap;
pub mod cdfkit;
pub mod data;
pub mod decompose;
pub mod error;
pub mod linalg;
pub mod mcstudy;
pub mod par;
pub mod qreg;
pub mod rng;
pub mod specdsl;
pub mod stats;

pub use data::{Dataset, Table};
pub use error::{QspecError, Result};
pub use par::Parallelism;
pub use specdsl::{parse_spec, DesignBuilder, PiecewiseSpec, TermSpec};
