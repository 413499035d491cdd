//! Command-line workflows and the HTTP service around `artigen-core`.

pub mod commands;
pub mod config;
pub mod service;
