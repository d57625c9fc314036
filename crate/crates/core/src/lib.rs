//! Model search over partitioned dataset sketches.
//!
//! Models are registered with a sketch of their training data: per-partition
//! bin counts of every feature. A query dataset is sketched the same way and
//! matched in two stages, first by MinHash feature overlap and then by
//! adaptivity, JS divergence or centre distance over the shared bins.

pub mod error;
pub mod eval;
pub mod hashing;
pub mod lsh;
pub mod metrics;
pub mod registry;
pub mod search;
pub mod sketch;

pub use error::{Error, Result};
pub use eval::{AccuracyRow, AccuracyTable, CompareConfig, EvalMetric, MetricsReport, SyntheticWorkloadSpec};
pub use lsh::{JsLshParams, MinHashParams, Signature};
pub use metrics::{AdaptivityMode, MetricKind, MetricValue};
pub use registry::{ModelRecord, Registry, RegistryParams};
pub use search::{ExactRescoring, Metric, OverlapCandidate, SearchConfig, SearchResponse, SearchResult};
pub use sketch::{DatasetSketch, FeatureDescriptor, FeatureId, FeatureKind, IngestOptions, ProbabilityVector};
