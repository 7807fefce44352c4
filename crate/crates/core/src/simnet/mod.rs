//! Simulated network of sites: synthetic multi-site worlds, the end-to-end
//! pipeline from local fits to the target-site ensemble, and the metrics.

mod config;
mod metrics;
mod run;
mod world;

pub use config::{
    Design, Grouping, LocalKind, LocalPruning, SimConfig, SiteSizes, PropensitySpec,
};
pub use metrics::{decision_rule, ipw_value, mse, summarize, SummaryRow};
pub use run::{
    fit_site_model, fit_target_ensemble, run_replicate, run_replicates, weight_profiles, Estimator,
    ReplicateResult, RunOptions,
};
pub use world::{generate_world, SiteWorld, Truth};
