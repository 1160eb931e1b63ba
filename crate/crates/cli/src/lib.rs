//! Command-line front end for the kernel engine: run configuration, the five
//! subcommands, and bit-exact kernel persistence.

pub mod commands;
pub mod config;
pub mod kernel_file;

use nngp_core::error::Error as CoreError;

/// Command-level error, carrying the process exit code: 2 for configuration
/// errors, 3 for numerical failures, 4 for I/O.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CliError {
    Config(String),
    Numerical(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match &e {
            CoreError::CholeskyFailure { .. }
            | CoreError::LadderExhausted { .. }
            | CoreError::SpatialCollapse { .. }
            | CoreError::NegativeVariance { .. } => CliError::Numerical(e.to_string()),
            CoreError::Io(_) | CoreError::Dataset(_) => CliError::Io(e.to_string()),
            CoreError::InvalidArch(_)
            | CoreError::InvalidInput(_)
            | CoreError::ShapeMismatch(_)
            | CoreError::TrackUnavailable(_) => CliError::Config(e.to_string()),
        }
    }
}
