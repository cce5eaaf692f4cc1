//! Poisson spatio-temporal areal models with ICAR, RW1 and Type IV random
//! effects, fitted by penalized quasi-likelihood, plus the two confounding
//! remedies: restricted regression and orthogonality constraints.

pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod io;
pub mod linalg;
pub mod model;
pub mod pql;
pub mod projections;
pub mod simulate;
pub mod structures;

/// 0.975 quantile of the standard normal, for 95% Wald intervals.
pub const Z_975: f64 = 1.959964;

pub use error::{Error, Result};
pub use model::{build_design, BlockLabel, Dataset, DesignBundle, ModelSpec, RandomBlock, Variant};
pub use structures::{SpatialGraph, Structures};
pub use pql::{fit, fit_model, FitOptions, FitResult, VarianceComponents};
pub use simulate::{Scenario, TruthRecord};
