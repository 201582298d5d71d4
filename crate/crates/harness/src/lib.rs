//! Training, evaluation and experiment harness for the dual-stream
//! visible-infrared detector built on `wmnet-core`.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod head;
pub mod model;
pub mod plot;
pub mod train;

pub use config::{DatasetSpec, ExperimentConfig, ModelFlags};
pub use error::{Error, Result};
