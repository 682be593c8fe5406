use std::fmt;
use std::path::Path;

use leaves::augment::AugmentError;
use leaves::data::DataError;
use leaves::encoder::EncoderError;
use leaves::gradsuite::SuiteError;
use leaves::trainer::TrainError;

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;

/// A message plus the process exit code it maps to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_DATA,
            message: message.into(),
        }
    }

    pub fn failure(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_FAILURE,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, e: impl fmt::Display) -> Self {
        Self::failure(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        Self::data(e.to_string())
    }
}

impl From<EncoderError> for CliError {
    fn from(e: EncoderError) -> Self {
        match e {
            EncoderError::Config(_) => Self::usage(e.to_string()),
            EncoderError::Checkpoint(_) | EncoderError::Io(_) => Self::data(e.to_string()),
            _ => Self::failure(e.to_string()),
        }
    }
}

impl From<AugmentError> for CliError {
    fn from(e: AugmentError) -> Self {
        match e {
            AugmentError::InvalidBounds(_) => Self::usage(e.to_string()),
            AugmentError::Checkpoint(_) | AugmentError::Io(_) => Self::data(e.to_string()),
            _ => Self::failure(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => Self::usage(e.to_string()),
            TrainError::Data(d) => d.into(),
            TrainError::Encoder(x) => x.into(),
            TrainError::Augment(x) => x.into(),
            TrainError::SingleClass => Self::data(e.to_string()),
            _ => Self::failure(e.to_string()),
        }
    }
}

impl From<SuiteError> for CliError {
    fn from(e: SuiteError) -> Self {
        Self::failure(e.to_string())
    }
}
