//! Hierarchical quality-of-results prediction for pragma-annotated loop
//! kernels: graph construction, feature annotation, an analytical reference
//! scheduler, graph neural networks, and Pareto design-space exploration.

pub mod corpus;
pub mod dataset;
pub mod dse;
pub mod error;
pub mod features;
pub mod gnn;
pub mod graph;
pub mod hierarchy;
pub mod ir;
pub mod oracle;

pub use error::{Error, Result};
