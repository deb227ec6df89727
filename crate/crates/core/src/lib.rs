//! Synthetic control estimation as entropy balancing.
//!
//! Weights for control units come from the convex dual of an
//! entropy-plus-imbalance problem, solved by damped Newton. Around that
//! solver sit the panel data model, event-study estimators (synthetic
//! control and two-way fixed effects), unit bootstrap, simulation designs
//! with their latent quantities, population-level oracle objects, balance
//! diagnostics and a Monte Carlo harness.

pub mod balancer;
pub mod data;
pub mod dgp;
pub mod diagnostics;
pub mod error;
pub mod estimators;
pub mod features;
pub mod inference;
pub mod montecarlo;
pub mod rng;
pub mod stats;
pub mod theory;

pub use balancer::{
    dual_objective, kkt_report, solve_dual, solve_dual_matrix, solve_primal_reference, BalanceSolution, KktReport,
    SolverOptions,
};
pub use data::{load_panel_csv, write_panel_csv, EstimateResult, PanelDataset};
pub use error::{Error, Result};
pub use features::{FeatureMatrix, FeatureRecipe, FeatureSpec};
