//! Config handling, bundle formats and the `generate` / `reconstruct` /
//! `verify` workflow behind the `idsm` binary.

pub mod bundle;
pub mod commands;
pub mod config;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("data bundle does not match the config: {0}")]
    Mismatch(String),

    #[error("verification failed: {invariant}: {detail}")]
    Verify { invariant: &'static str, detail: String },

    #[error("{0}")]
    Run(String),

    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Mismatch(_) => 3,
            Self::Verify { .. } | Self::Run(_) | Self::Io(_) => 1,
        }
    }
}
