//! Streaming origin-destination demand forecasting with continuous-time multi-level
//! memories.

pub mod autodiff;
pub mod checks;
pub mod cli;
pub mod error;
pub mod evaluation;
pub mod ingest;
pub mod matrix;
pub mod memory;
pub mod model;
pub mod multilevel;
pub mod nn;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use ingest::{EventBatch, NodeCatalog, OdMatrix, TransactionEvent};
pub use matrix::Matrix;
pub use model::{Ablation, HyperParams, MemoryBank, Model, ModelParams};
