//! Minimum information dependence models for mixed-domain multivariate data.
//!
//! A minimum information dependence model couples arbitrary marginal densities
//! `r_i` through a canonical statistic `h`:
//!
//! ```text
//! p(x; θ) = exp(θᵀh(x) − Σ a_i(x_i) − ψ(θ)) · Π r_i(x_i)
//! ```
//!
//! where the adjusting functions `a_i` and the potential `ψ` are fixed by the
//! marginal constraints. The crate is organised around the two halves of the
//! problem:
//!
//! * Construction: [`finite`] solves for `a_i` and `ψ` on finite product
//!   grids by iterative proportional fitting, and [`oracle`] holds the closed
//!   form Gaussian case together with data generators.
//! * Inference: [`rank`] splits a sample into marginal order statistics
//!   and rank permutations; conditional on the former the permutations follow
//!   an exponential family on `S_n^d`. [`exchange`] samples it with single
//!   transposition moves, [`cle`] fits it by exact enumeration or Monte Carlo
//!   Fisher scoring, and [`ple`] fits the pseudo-likelihood surrogate.
//!
//! [`statlang`] parses the small expression language used to declare `h` in
//! configuration files, and [`experiments`] drives the simulation studies.

pub mod cle;
pub mod exchange;
pub mod experiments;
pub mod finite;
mod linalg;
mod lp;
pub mod model;
pub mod oracle;
pub mod ple;
pub mod rank;
pub mod seed;
pub mod stats;
pub mod statlang;

pub use cle::{fit_cle, map_estimate, CleError, CleOptions, FitReport, Method};
pub use exchange::{run_chain, ChainConfig, ChainOutput, ChainState};
pub use model::{
    validate_model, CanonicalStatistic, Column, ColumnKind, Dataset, MarginalSpec, ModelSpec,
    ParametricFamily, Value,
};
pub use ple::{fit_ple, PleFit, PleOptions};
pub use rank::{decompose, recompose, OrderPolicy, RankDecomposition};
