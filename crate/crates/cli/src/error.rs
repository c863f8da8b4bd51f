use std::path::PathBuf;

pub const EXIT_OTHER: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

/// Failures raised by the command layer itself.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("config {path}: {msg}")]
    Config { path: PathBuf, msg: String },

    #[error("{path}: {msg}")]
    Path { path: PathBuf, msg: String },
}

pub(crate) fn usage(msg: impl Into<String>) -> anyhow::Error {
    CliError::Usage(msg.into()).into()
}

pub(crate) fn path_error(path: impl Into<PathBuf>, msg: impl Into<String>) -> anyhow::Error {
    CliError::Path {
        path: path.into(),
        msg: msg.into(),
    }
    .into()
}

/// Process exit status for an error chain: 2 argument/config, 3 I/O,
/// 4 numeric, 1 anything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    use acrnn_core::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Usage(_) | CliError::Config { .. } => EXIT_USAGE,
                CliError::Path { .. } => EXIT_IO,
            };
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Io { .. } | E::Format(_) | E::Corrupt { .. } => EXIT_IO,
                E::Argument(_) | E::Config(_) | E::Manifest(_) | E::Parse { .. } | E::EmptyInput(_) => EXIT_USAGE,
                E::Numeric(_) | E::Diverged { .. } => EXIT_NUMERIC,
                E::Shape(_) => EXIT_OTHER,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_OTHER
}
