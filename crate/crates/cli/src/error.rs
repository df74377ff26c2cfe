use std::process::ExitCode;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] crossrank_core::Error),

    #[error("{0}")]
    Usage(String),

    #[error("gradient check failed: {0}")]
    GradCheckFailed(String),

    #[error("cannot build thread pool: {0}")]
    ThreadPool(#[from] rayon::ThreadPoolBuildError),
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_FORMAT: u8 = 4;
pub const EXIT_CONTRACT: u8 = 5;
pub const EXIT_DATA: u8 = 6;
pub const EXIT_GRADCHECK: u8 = 7;
pub const EXIT_INTERNAL: u8 = 70;

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        use crossrank_core::Error as E;
        let code = match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::GradCheckFailed(_) => EXIT_GRADCHECK,
            CliError::ThreadPool(_) => EXIT_INTERNAL,
            CliError::Core(e) => match e {
                E::Io { .. } => EXIT_IO,
                E::Csv(c) if matches!(c.kind(), csv::ErrorKind::Io(_)) => EXIT_IO,
                E::Manifest { .. }
                | E::UnsupportedDtype(_)
                | E::PayloadSizeMismatch { .. }
                | E::DuplicateId(_)
                | E::LabelCountMismatch { .. }
                | E::IdCountMismatch { .. }
                | E::Labels { .. }
                | E::ZeroDimension
                | E::ZeroNormRow { .. }
                | E::NonFinite { .. }
                | E::Csv(_)
                | E::Json(_) => EXIT_FORMAT,
                E::NoRelevantItems { .. } | E::TripletMining { .. } | E::EmptyResults => EXIT_DATA,
                _ => EXIT_CONTRACT,
            },
        };
        ExitCode::from(code)
    }
}
