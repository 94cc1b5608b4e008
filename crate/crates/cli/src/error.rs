use std::fmt;
use std::path::Path;

/// Failure of a command, carrying the process exit status it maps to.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration (exit 1).
    Usage(String),
    /// A verification run found failures (exit 2).
    Verify(String),
    /// Reading or writing a file failed (exit 3).
    Io(String),
    Core(r2u3d_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use r2u3d_core::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::Verify(_) => 2,
            CliError::Io(_) => 3,
            CliError::Core(E::Io { .. } | E::Format { .. }) => 3,
            CliError::Core(_) => 1,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Verify(m) | CliError::Io(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<r2u3d_core::Error> for CliError {
    fn from(e: r2u3d_core::Error) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
