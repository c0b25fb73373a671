//! Risk-weighted pseudo-posterior synthesis with privacy accounting under
//! plain, range-averaged and range-truncated asymptotic differential privacy.
//!
//! The usual flow is [`pipeline::run_pipeline`] driven by a
//! [`PipelineConfig`]; each step is also available on its own.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accounting;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod model;
pub mod pipeline;
pub mod range;
pub mod rng;
pub mod stats;
pub mod utility;
pub mod weights;

#[cfg(test)]
mod properties;

pub use accounting::{
    account, compare_accounts, AccountingInputs, OrderingReport, PrivacyAccount, StandardKind, VariantKey,
};
pub use config::KeyValues;
pub use data::{load_csv, simulate, CsvSchema, Dataset, PredictorSpec, SimulationConfig, Transform};
pub use error::{Error, Result};
pub use model::{fit_pseudo_posterior, PosteriorDraws, PriorConfig, ScaleMode, Stage, ThetaDraw};
pub use pipeline::{execute, run_pipeline, PipelineConfig, Prepared, RunReport, Through};
pub use range::{estimate_lambda, KnowledgeProbs, RangeSpec, RecordRange};
pub use rng::{replicate_seeds, RngContract};
pub use utility::{ecdf_metrics, synthesize, utility_report, SynthesisMode, SyntheticDataset, UtilityReport};
pub use weights::{compute_alpha, loglik_matrix, RiskWeights};
