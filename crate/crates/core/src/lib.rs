//! Session-type modelling of smartphone app usage.
//!
//! The pipeline segments each subject's app-open stream into unlock/lock
//! sessions, embeds apps with a CBOW model trained on per-user app
//! sequences, averages app vectors into session vectors, clusters those into
//! session types with k-means, and classifies subjects from per-day session
//! type counts with an L1-regularized logistic regression. Evaluation is
//! nested leave-one-out with AUROC, alongside six ablation baselines and
//! the linear-model introspection reports.

pub mod classifier;
pub mod cli;
pub mod clustering;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod ingest;
pub mod introspect;
pub mod pipeline;
pub mod seed;
pub mod session_repr;
pub mod sessionizer;
pub mod synthgen;

pub use error::{Error, Result};
