//! Service and command-line front end for `raad-core`.

pub mod commands;
pub mod config;
pub mod server;
