//! Pipeline driver and intervention service.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod service;

pub use commands::{run, Cli, Command, Context};
