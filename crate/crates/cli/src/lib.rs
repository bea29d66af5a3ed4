//! Configuration, file formats and task dispatch for the `mfgtube`
//! command-line tool.

pub mod config;
pub mod demos;
pub mod error;
pub mod output;
pub mod run;

pub use config::{RunConfig, Task, SCHEMA};
pub use demos::{bundled_demos, demo};
pub use error::{CliError, Result};
pub use output::RunManifest;
pub use run::run;
