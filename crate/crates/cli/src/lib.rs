//! Command-line pipeline around the `parvecmf` library.

pub mod commands;
pub mod config;
pub mod workdir;
