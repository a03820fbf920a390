//! Deterministic desk-scale simulator of FedIN: federated clients with
//! heterogeneous intermediate layers that share extractor/classifier
//! weights and intermediate feature pairs.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod grad;
pub mod gradcheck;
pub mod harness;
pub mod model;
pub mod optim;
pub mod partition;
pub mod protocol;
pub mod resolve;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use grad::{GradientSet, Group};
pub use model::{build_model, ArchSpec, SplitModel, Variant};
pub use protocol::RunMode;
pub use tensor::Tensor;
