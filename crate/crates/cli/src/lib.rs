//! Command-line workflows and the HTTP service for the adherence models.

pub mod commands;
pub mod server;
pub mod wire;
