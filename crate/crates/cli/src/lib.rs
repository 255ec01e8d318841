//! Command-line pipeline and HTTP service for valence-arousal facial affect
//! synthesis.

pub mod augment;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod gallery;
pub mod generate;
pub mod manifest;
pub mod pipeline;
pub mod service;
pub mod synth;

pub use error::{CliError, Result, Stage};
