use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("segment too short: {frames} frames available, at least {needed} required")]
    SegmentTooShort { frames: usize, needed: usize },
    #[error("{op}: empty sequence")]
    EmptySequence { op: &'static str },
    #[error("batch norm needs at least 2 rows in train mode, got {rows}")]
    DegenerateBatch { rows: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward was already run on this tape")]
    BackwardTwice,
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("malformed wav header: {0}")]
    MalformedWav(String),
    #[error("unsupported audio encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("audio file contains no samples")]
    EmptyAudio,
    #[error("expected sample rate {expected} Hz, got {actual} Hz")]
    WrongSampleRate { expected: u32, actual: u32 },
    #[error("signal too short: {samples} samples, need at least {needed}")]
    SignalTooShort { samples: usize, needed: usize },
    #[error("utterance too short: {frames} frames, crop needs {needed}")]
    UtteranceTooShort { frames: usize, needed: usize },
    #[error("invalid count: {0}")]
    InvalidCount(String),

    #[error("signal has zero power")]
    ZeroPower,
    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    SampleRateMismatch(u32, u32),
    #[error("split needs at least 2 speakers, found {0}")]
    InsufficientSpeakers(usize),
    #[error("unknown utterance id {0}")]
    UnknownUtterance(String),

    #[error("no bank entry for speaker {0}")]
    MissingBankEntry(String),
    #[error("speaker {0} has no usable segments")]
    NoUsableSegments(String),
    #[error("unknown de-mixing variant {0:?}")]
    UnknownVariant(String),
    #[error("unknown direction {0:?}")]
    UnknownDirection(String),

    #[error("cosine of a zero vector")]
    ZeroVector,
    #[error("evaluation set is empty")]
    EmptyTestSet,
    #[error("missing heads: {0}")]
    MissingHeads(String),

    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("provenance mismatch: {0}")]
    ProvenanceMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::NonFinite { .. } | Error::GradCheck(_) => ErrorKind::Numerical,
            Error::UnknownVariant(_) | Error::UnknownDirection(_) | Error::Config(_) => {
                ErrorKind::Usage
            }
            _ => ErrorKind::Data,
        }
    }
}
