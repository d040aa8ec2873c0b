//! Coupled state-space sequence models.
//!
//! State chains per modality are coupled by summing hidden states across
//! modalities before each transition. Three provably equivalent execution
//! engines evaluate the recurrence: a sequential step loop, a
//! work-efficient associative scan, and (for time-invariant factors) a
//! global convolution kernel. On top of the engines sit the gated block,
//! the multi-layer model with fusion baselines, a synthetic multi-modal
//! training harness, and a sequence-length scaling benchmark.

pub mod alloc;
pub mod attention;
pub mod block;
pub mod check;
pub mod coupled;
pub mod data;
pub mod error;
pub mod kernel;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod scan;
pub mod store;
pub mod sweep;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod zoh;

pub use error::{CoreError, Result};
pub use store::{AdamConfig, ParameterStore};
pub use tensor::{DType, Scalar, Tensor};
