//! Configuration, orchestration and CSV/JSON output for the `eqfree` binary.

pub mod config;
pub mod error;
pub mod output;
pub mod run;

pub use config::{load_config, parse_config, Command, RunConfig};
pub use error::{CliError, Result};
pub use run::{config_hash, run, RunSummary};
