//! Command implementations behind the `leaves` binary.

pub mod commands;
pub mod config;
pub mod error;
