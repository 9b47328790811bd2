//! Batch harness around `longgen-core`: oracle-equivalence and gradient
//! suites, kernel benchmarks, toy training ablations and cost reports.
//!
//! Every subcommand is a plain function here so that tests can drive it
//! without spawning the binary. Exit codes: 0 success, 1 correctness
//! failure, 2 usage error.

pub mod bench;
pub mod cost;
pub mod equiv;
pub mod gradcheck;
pub mod report;
pub mod settings;
pub mod task;
pub mod toy;
pub mod train;

use thiserror::Error;

pub const TOOL_NAME: &str = "longgen";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("check failed: {0}")]
    Failed(String),

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error(transparent)]
    Core(#[from] longgen_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Core(longgen_core::Error::InvalidConfig(_)) => EXIT_USAGE,
            _ => EXIT_FAILURE,
        }
    }
}
