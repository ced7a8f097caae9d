//! Hierarchical all-gather and reduce-scatter collectives with in-process,
//! socket, and simulated transports, an alpha-beta cost model, and a
//! virtual-time network simulator.

pub mod collectives;
pub mod costmodel;
pub mod error;
pub mod harness;
pub mod hierarchy;
pub mod simnet;
pub mod topology;
pub mod transport;

pub use collectives::{CollectiveKind, FlatAlgorithm, ReduceOp};
pub use costmodel::{CalibrationTable, CostParams, Selector};
pub use error::{Error, Result};
pub use harness::{Backend, RunRecord, SweepConfig};
pub use hierarchy::{Algorithm, HierPlan, InterAlgorithm};
pub use topology::{build_topology, GroupSpec, RankId, Topology};
pub use transport::{Communicator, Context, LogEntry, Tag, Transport};
