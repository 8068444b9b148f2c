use kexp_core::Error;

/// A failure with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

pub const EXIT_OTHER: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_RESOURCE: u8 = 4;

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    pub fn other(message: impl Into<String>) -> Self {
        Self { code: EXIT_OTHER, message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = if e.is_resource() {
            EXIT_RESOURCE
        } else if e.is_numeric() {
            EXIT_NUMERIC
        } else if matches!(
            e,
            Error::InvalidConfig(_)
                | Error::Unsupported(_)
                | Error::DimensionMismatch { .. }
                | Error::ShapeMismatch(_)
                | Error::Parse { .. }
                | Error::Json(_)
        ) {
            EXIT_USAGE
        } else {
            EXIT_OTHER
        };
        Self { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::other(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::usage(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::usage(e.to_string())
    }
}
