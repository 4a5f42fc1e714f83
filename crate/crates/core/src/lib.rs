//! Seasonal structure of sparse fecal-coliform monitoring series.
//!
//! Raw shellfish-water samples are folded onto a 52-week year, modelled by
//! sparse functional principal component analysis (local-linear smoothing
//! plus conditional-expectation scores) and summarised with rank
//! correlations, decile maps and curve plots.
//!
//! | module        | role                                                  |
//! |---------------|-------------------------------------------------------|
//! | [`store`]     | CSV ingestion of samples, sites and covariates        |
//! | [`preprocess`]| exclusion rules, weekly pooling, windows, log10        |
//! | [`smooth`]    | local-linear 1D/2D smoothers, CV bandwidths            |
//! | [`fpca`]      | mean, covariance, eigenpairs, scores, reconstruction  |
//! | [`association`]| Spearman, OLS, decile bins, extrema groups           |
//! | [`synth`]     | Karhunen–Loève simulator and recovery metrics         |
//! | [`pipeline`]  | config-driven end-to-end run                          |
//! | [`export`]    | GeoJSON, SVG and JSON writers                         |
//!
//! The `examples/` directory of this crate holds one runnable program per
//! capability; `cargo run --example full_pipeline` exercises all of them.

pub mod association;
pub mod export;
pub mod fpca;
pub mod pipeline;
pub mod preprocess;
pub mod smooth;
pub mod store;
pub mod synth;

pub use association::{spearman, AssociationResult, ExtremaGroups};
pub use fpca::{fit, FpcaConfig, FpcaModel, ScoreVector};
pub use pipeline::{run_pipeline, RunConfig};
pub use preprocess::{WeeklySeries, Window};
pub use store::{LongitudinalStore, Province, SampleRecord, SiteRegistry};
