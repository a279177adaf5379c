//! Library side of the `datamix` command: configuration loading, artifact
//! formats, run manifests and the pipeline commands.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod persist;

pub use commands::{replay, run, Context};
pub use config::{load_config, parse_config, render_config};
pub use manifest::{Invocation, RunManifest};
