//! File formats, the staged pipeline, the command-line interface and the
//! annotation service built on `panicle-core`.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod formats;
pub mod pipeline;
pub mod service;
pub mod synth;

pub use config::Config;
pub use dataset::Dataset;
pub use error::{Error, Result};
