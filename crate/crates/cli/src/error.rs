use std::fmt;
use std::path::Path;

/// Failure of a subcommand, carrying its process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, unreadable or malformed input files. Exit code 2.
    Usage(String),
    /// Numeric or runtime failure. Exit code 1.
    Runtime(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn open(path: &Path, err: impl fmt::Display) -> Self {
        CliError::Usage(format!("cannot open {}: {err}", path.display()))
    }

    pub fn write(path: &Path, err: impl fmt::Display) -> Self {
        CliError::Runtime(format!("cannot write {}: {err}", path.display()))
    }

    /// Error from reading the file at `path`.
    pub fn parse(path: &Path, err: lognet::Error) -> Self {
        match err {
            lognet::Error::Io(e) => CliError::open(path, e),
            e => CliError::Usage(format!("{}: {e}", path.display())),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<lognet::Error> for CliError {
    fn from(e: lognet::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Runtime(format!("csv: {e}"))
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
