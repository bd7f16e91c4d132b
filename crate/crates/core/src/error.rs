use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("corrupt data: {0}")]
    Corrupt(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("numerical fault: {0}")]
    Numerical(String),

    /// No eligible output remains for a bit move.
    #[error("allocation saturated: {0}")]
    Saturated(String),

    #[error("vector codebook infeasible: {0}")]
    Infeasible(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Infeasible(_) | Error::Saturated(_) => 2,
            Error::Dimension(_)
            | Error::Input(_)
            | Error::Corrupt(_)
            | Error::Version { .. }
            | Error::Io(_) => 3,
            Error::Numerical(_) => 4,
        }
    }
}

pub(crate) fn dim_check(what: &str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::Dimension(format!(
            "{what}: expected {expected}, found {found}"
        )));
    }
    Ok(())
}
