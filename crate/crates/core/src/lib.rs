//! Expected-utility maximization on finite scenario-tree market models.
//!
//! The library solves max_phi E U(V_T^{c,phi}) by backward induction with
//! piecewise-linear concave value functions and an exact-utility polish
//! stage, certifies absence of arbitrage quantitatively, extracts the
//! equivalent (super)martingale measure from the optimal strategy, and
//! prices bounded claims by indifference.

pub mod config;
pub mod demo;
pub mod engine;
pub mod geometry;
pub mod measure;
pub mod onestep;
pub mod pl;
pub mod report;
pub mod simplex;
pub mod tree;
pub mod utility;

pub use config::{AePolicy, Config};
pub use engine::{
    expected_utility_of, solve, solve_with, verify_optimality, verify_uniqueness, SolveError,
    SolveOptions, SolveResult,
};
pub use geometry::{check_na, na_certificate, support_subspace, validate_tree, NaOutcome, Subspace};
pub use measure::{
    envelope_check, martingale_measure, price_claim, supermartingale_check, Claim, MeasureError,
    MeasureReport,
};
pub use pl::PLConcave;
pub use report::{dump_csv, dump_measure_csv, to_json_pretty, SolveReport};
pub use tree::{ConditionalDist, Node, ScenarioTree, TreeError};
pub use utility::{check_ae_minus, check_ae_plus, SamplingPlan, UtilitySpec};
