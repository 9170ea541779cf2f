//! Library side of the `p3sgd` command: configuration, metrics records and
//! the subcommand implementations.

pub mod commands;
pub mod config;
pub mod records;

pub use commands::{Failure, Outcome};
