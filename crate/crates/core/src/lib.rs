//! Forecasting of inpatient pain episodes (NRS >= 4) at 48 and 72 hours.
//!
//! The crate combines a tabular learner zoo with a retrieval-augmented
//! language-model estimate, fused at the decision level only for patients
//! whose learner probability falls in a marginal-confidence band.
//!
//! Module map:
//! - [`record`]: patient record schema, ingestion, exclusion filtering
//! - [`text_extract`]: rule-based NRS extraction per 24/48/72 h window
//! - [`ladder`]: analgesic-ladder drug tiers and per-window dosing features
//! - [`features`]: feature matrix assembly, imputation, SMOTE
//! - [`learners`]: classifier zoo, stratified cross-validation
//! - [`metrics`]: confusion metrics, ROC/AUC, group comparison
//! - [`retrieval`]: embeddings, knowledge base, exact top-k search
//! - [`llm`]: prompt construction, chat-completion client, response parsing
//! - [`fusion`]: indicator-gated probability fusion
//! - [`synth`]: seeded synthetic cohorts
//! - [`pipeline`]: file-composed commands driven by a run configuration

pub mod error;
pub mod features;
pub mod fusion;
pub mod ladder;
pub mod learners;
pub mod llm;
pub mod metrics;
pub mod pipeline;
pub mod record;
pub mod retrieval;
pub mod seed;
pub mod synth;
pub mod text_extract;

pub use error::{Error, Result};
