//! Shared domain types: grids, scenario layouts, solution ensembles,
//! coefficient sets, domination weights and norms.

pub mod coeff;
pub mod ensemble;
pub mod grid;
pub mod norms;
pub mod weights;

pub use coeff::{BlackBox, CoefficientDoc, CoefficientSet, LinearCoefficients, TimeMatrix};
pub use ensemble::{level_mean, PerturbationTriple, Process, SolutionEnsemble};
pub use grid::{Dimensions, Instant, Layout, TimeGrid};
pub use norms::{decompose, h_norm, m2_gap, m2_norm, operator_norm};
pub use weights::{
    check_wlog, example32, reference_coefficients, Case, DominationWeights, WeightsDoc,
    WlogReport,
};
