use std::fmt;

use capsnet::Error;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_CHECKPOINT: i32 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }

    pub fn checkpoint(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_CHECKPOINT,
            message: message.into(),
        }
    }

    pub fn from_core(e: Error) -> Self {
        let code = match &e {
            Error::NonFinite(_) => EXIT_NUMERIC,
            Error::Checkpoint(_) => EXIT_CHECKPOINT,
            Error::Shape { .. }
            | Error::Contract(_)
            | Error::Format { .. }
            | Error::Consistency(_)
            | Error::Io { .. }
            | Error::Image(_) => EXIT_INPUT,
            Error::Json(_) => EXIT_FAILURE,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::from_core(e)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}
