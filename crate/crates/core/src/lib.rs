//! Test-retest reliability, cross-run consistency and cross-model agreement
//! analysis for replicated model outputs.

pub mod agreement;
pub mod consistency;
pub mod error;
pub mod ingest;
pub mod model;
pub mod pipeline;
pub mod reliability;
pub mod report;
pub mod screening;
pub mod simulate;
pub mod thresholds;

pub use error::{Error, ErrorCategory, Result};
pub use ingest::{Dataset, NumericGrid, ReplicateMatrix};
pub use model::{CellStatus, MeasurementCell, MetricClass, MetricSpec, MetricValue, Registry, ValueKind};
pub use reliability::{IccKind, IccMode, MeanSquares, ReliabilityResult};
pub use screening::{ScreenDecision, ScreenOutcome};
pub use thresholds::{AgreementClass, ReliabilityClass, ThresholdConfig};
