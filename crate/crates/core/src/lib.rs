//! Abstraction alignment: measure how well model outputs or dataset labels
//! agree with a human concept hierarchy.
//!
//! The pipeline is: parse a hierarchy into an [`AbstractionDag`], read
//! per-instance evidence ([`InstanceRecord`]), propagate it into
//! [`WeightedDag`]s, then compute metrics or run pattern queries.

pub mod dag;
pub mod error;
pub mod ingest;
pub mod metrics;
pub mod propagate;
pub mod query;
pub mod report;
pub mod session;

pub use dag::{AbstractionDag, Direction, NodeId, NodeIx, NodeSpec, SubgraphSelector};
pub use error::{DagError, IngestError, MetricError, QueryError, SessionError};
pub use ingest::{Evidence, EvidenceKind, HierarchyFormat, InstanceRecord, OutputMapping, Truths};
pub use metrics::{EntropyBase, MetricReport, MetricValue, PairMode, ValueKind};
pub use propagate::{propagate, PropagationMode, WeightedDag};
pub use query::PatternQuery;
pub use session::{Session, SessionConfig};
