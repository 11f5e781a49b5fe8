//! Feature interaction weighted hybrid network (FIWHN) for lightweight
//! single-image super-resolution, with the data, training, evaluation and
//! profiling harness around it.

pub mod bicubic;
pub mod checkpoint;
pub mod cli;
pub mod complexity;
pub mod core_blocks;
pub mod datapipe;
pub mod error;
pub mod evaluation;
pub mod layers;
pub mod network;
pub mod params;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
pub use network::{build_topology, Fiwhn, FiwhnConfig, Topology};
