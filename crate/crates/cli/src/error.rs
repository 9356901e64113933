use std::fmt;

/// Failure of a subcommand, split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or inputs, detected before any output is written.
    Validation(String),
    /// Failure while running.
    Runtime(String),
}

impl CliError {
    pub fn validation(e: impl fmt::Display) -> Self {
        CliError::Validation(e.to_string())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<epan::Error> for CliError {
    fn from(e: epan::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Maps library errors met while checking inputs to validation failures.
pub trait Validate<T> {
    fn or_invalid(self) -> CliResult<T>;
}

impl<T> Validate<T> for epan::Result<T> {
    fn or_invalid(self) -> CliResult<T> {
        self.map_err(CliError::validation)
    }
}
