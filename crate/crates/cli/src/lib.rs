//! Configuration, scenario runner and file formats for the `claeo`
//! command-line tool.

pub mod config;
pub mod error;
pub mod manifest;
pub mod scenarios;
pub mod trace_csv;

pub use config::{RunSpec, Scenario};
pub use error::{CliError, ConfigError};
pub use manifest::RunManifest;
pub use scenarios::{execute, run_scenario, RunReport};
