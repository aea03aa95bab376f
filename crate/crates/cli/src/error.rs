use std::fmt;
use std::io;

use specunet::Error;

/// Process exit status for each failure class.
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { code: EXIT_DATA, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

fn io_code(e: &io::Error) -> u8 {
    match e.kind() {
        io::ErrorKind::NotFound | io::ErrorKind::PermissionDenied => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidArgument(_) => EXIT_USAGE,
            Error::Numeric(_) => EXIT_NUMERIC,
            Error::Io(io) => io_code(io),
            Error::Wav(hound::Error::IoError(io)) => io_code(io),
            Error::InvalidState(_) | Error::Format(_) | Error::ShapeMismatch { .. } | Error::Wav(_) | Error::Json(_) => {
                EXIT_DATA
            }
        };
        Self { code, message: e.to_string() }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        Error::from(e).into()
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::data(e.to_string())
    }
}
