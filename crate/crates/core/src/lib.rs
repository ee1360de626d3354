//! Black-box individual fairness testing for tabular binary classifiers.
//!
//! The search looks for *individual discriminatory instances*: inputs whose
//! predicted label changes when only protected attributes (age, race,
//! gender, ...) are altered. Guidance comes from gradients of the
//! predicted-class confidence, estimated with forward differences so that
//! the model under test can stay a black box. Exact backprop gradients are
//! available for in-process models and serve as white-box baselines and as
//! the fidelity oracle for the estimates.
//!
//! Module map:
//!
//! - [`model`]: fully-connected networks, exact gradients, model handles
//!   (in-process, closure, or an external process speaking line-delimited
//!   JSON).
//! - [`gradient`]: naive and vectored zero-order estimators, similarity
//!   metrics.
//! - [`schema`]: attribute schemas, dataset ingestion, similar sets, clipping
//!   and the discrimination check.
//! - [`cluster`]: k-means and round-robin seed selection.
//! - [`search`]: global and local generation.
//! - [`pca`]: two-component projection of gradient populations.
//! - [`experiment`]: configuration, experiment drivers and report emission.
//! - [`exec`]: data-parallel helpers with a sequential fallback.

pub mod cluster;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod gradient;
pub mod model;
pub mod pca;
pub mod schema;
pub mod search;

pub use error::{Error, Result};
pub use exec::Execution;
pub use gradient::{EstimationConfig, GradientKind, GradientSource, GradientVector};
pub use model::{Activation, LayerSpec, MlpModel, ModelHandle, Precision, ProcessSpec};
pub use schema::{AttributeSpec, DatasetSchema, DiscriminationWitness, Instance};
pub use search::{DiscriminatoryStore, GlobalConfig, LocalConfig};

/// Version string embedded in reports.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
