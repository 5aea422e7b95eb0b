//! Command-line front end for the market simulator.

pub mod commands;
pub mod config;
pub mod generate;

/// Failures mapped to process exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Unreadable, malformed or invalid config. Exit code 1.
    #[error("config error: {0}")]
    Config(String),
    /// Clearing or output failure while running. Exit code 2.
    #[error("runtime error: {0}")]
    Runtime(String),
    /// Stdout closed by the reader (e.g. `| head`). Not reported.
    #[error("broken pipe")]
    BrokenPipe,
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::BrokenPipe => 0,
        }
    }
}

impl From<dermarket::error::Error> for CliError {
    fn from(e: dermarket::error::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            return CliError::BrokenPipe;
        }
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}
