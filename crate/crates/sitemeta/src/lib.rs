//! File formats, configuration and the command line around
//! [`sitemeta_core`].

pub mod binfmt;
pub mod cli;
pub mod config;
pub mod report;

pub use sitemeta_core as core;
