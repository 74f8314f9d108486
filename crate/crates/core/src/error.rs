use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure classes, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Validation,
    Degenerate,
    Io,
}

impl ErrorClass {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Config => 2,
            ErrorClass::Validation => 3,
            ErrorClass::Degenerate => 4,
            ErrorClass::Io => 5,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} {index} out of range (limit {limit})")]
    Range {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("inconsistent inputs: {0}")]
    Consistency(String),

    #[error("no signal: background-subtracted histograms are zero in every bin")]
    NoSignal,

    #[error("degenerate map{}: {reason}", pixel.map(|p| format!(" for pixel {p}")).unwrap_or_default())]
    DegenerateMap { pixel: Option<usize>, reason: String },

    #[error("only {valid} of {total} patch detections are valid (need {required:.1}%)")]
    TooFewDetections {
        valid: usize,
        total: usize,
        required: f64,
    },

    #[error("iou undefined: both support masks are empty")]
    UndefinedIou,

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("incomplete dataset: {what} missing scan indices {missing:?}")]
    IncompleteDataset {
        what: String,
        missing: Vec<usize>,
    },

    #[error("duplicate scan index {index} in {what}")]
    DuplicateIndex { what: String, index: usize },

    #[error("missing file {}", path.display())]
    MissingFile { path: PathBuf },

    #[error("shape mismatch in {}: {msg}", path.display())]
    Shape { path: PathBuf, msg: String },

    #[error("count {value} exceeds max_count {max} in {} (scan {index}, row {row}, bin {bin})", path.display())]
    CountOverflow {
        path: PathBuf,
        index: usize,
        row: usize,
        bin: usize,
        value: i64,
        max: u32,
    },

    #[error("negative count {value} in {} (scan {index}, row {row}, bin {bin})", path.display())]
    NegativeCount {
        path: PathBuf,
        index: usize,
        row: usize,
        bin: usize,
        value: i64,
    },

    #[error("parse error in {}: {msg}", path.display())]
    Parse { path: PathBuf, msg: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Range { .. } | Error::Domain(_) => ErrorClass::Config,
            Error::NoSignal
            | Error::DegenerateMap { .. }
            | Error::UndefinedIou
            | Error::TooFewDetections { .. }
            | Error::DegenerateInput(_) => ErrorClass::Degenerate,
            Error::Io { .. } => ErrorClass::Io,
            Error::Consistency(_)
            | Error::IncompleteDataset { .. }
            | Error::DuplicateIndex { .. }
            | Error::MissingFile { .. }
            | Error::Shape { .. }
            | Error::CountOverflow { .. }
            | Error::NegativeCount { .. }
            | Error::Parse { .. }
            | Error::Precondition(_)
            | Error::Image { .. } => ErrorClass::Validation,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn degenerate(pixel: Option<usize>, reason: impl Into<String>) -> Self {
        Error::DegenerateMap {
            pixel,
            reason: reason.into(),
        }
    }
}
