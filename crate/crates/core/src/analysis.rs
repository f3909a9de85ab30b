//! Run configuration, end-to-end pipelines, ablation tables and Pareto analysis.

pub mod config;
pub mod pareto;
pub mod pipeline;

pub use config::{RunConfig, SEED_ENV};
pub use pareto::{emit_plots, frontiers_by_family, pareto_frontier, ParetoPoint};
pub use pipeline::{ablation_run, AblationRow};
