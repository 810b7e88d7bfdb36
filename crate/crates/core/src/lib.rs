//! ConvLSTM precipitation nowcasting on small gridded domains.
//!
//! The crate covers the whole modelling path: dense tensor primitives, the
//! ConvLSTM cell and two-layer network, exact gradients by backpropagation
//! through time with an Adam training loop, ingestion and windowing of
//! hourly gridded series, verification metrics (CC, NSE, NRMSE) and a
//! synthetic data generator with naive reference implementations used as
//! test oracles.

pub mod checkpoint;
pub mod convlstm;
pub mod datapipe;
pub mod error;
pub mod metrics;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
