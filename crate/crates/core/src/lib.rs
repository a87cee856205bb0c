//! Multivariate generalized propensity score weighting for continuous,
//! multivariate exposures: weight estimation, covariate balance diagnostics,
//! estimable regions, dose-response fitting and a simulation study driver.

pub mod balance;
pub mod dose_response;
pub mod entropy;
pub mod error;
pub mod geometry;
pub mod gps;
pub mod simulation;
pub mod stats;
pub mod study;

pub use balance::{balance_report, BalanceReport, BalanceScope, PairCorrelation};
pub use dose_response::{
    fit_dose_response, predict_surface, rmse_on_region, total_abs_bias, DoseResponseFit, Formula,
};
pub use entropy::{entropy_balance, EntropyOptions};
pub use error::{Error, Result};
pub use geometry::{bounding_box, convex_hull, region_grid, trimmed_hull, Region};
pub use gps::{
    evaluate_weights, fit_mvgps, fit_univariate_gps, trim_weights, Dataset, Method, MvgpsOptions,
    PolyTerm, PropensityFit, WeightSet,
};
pub use simulation::{builtin_scenario, generate, implied_marginal_cov, Scenario, ScenarioConfig};
pub use study::{run_study, StudyConfig, StudyResult};

/// Formats a float with 17 significant digits, enough to round-trip exactly.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}
