//! Command-line runner for `nrdm` experiments.
//!
//! Every command reads a [`config::RunConfig`], writes CSV tables and SVG
//! plots into a fresh run directory and seals it with a manifest of content
//! hashes.

pub mod cli;
pub mod commands;
pub mod config;
pub mod run;
pub mod svg;
