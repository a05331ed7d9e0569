//! File formats, checkpoints, configuration and the stage runners of the
//! DualMAR pipeline. The computation itself lives in `dualmar-core`; this
//! crate adds everything that touches the file system.

pub mod artifact;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod formats;
pub mod fsio;
pub mod logging;
pub mod stages;

pub use config::PipelineConfig;
pub use error::{Error, Result};
