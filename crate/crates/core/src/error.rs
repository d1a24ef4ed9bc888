use std::fmt;

/// Broad failure class, used to pick a process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Io,
    Validation,
    Numeric,
}

/// Pipeline stage that produced an error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Permute,
    Pyramid,
    Importance,
    Mask,
    SimilarityCap,
    Attention,
    Schedule,
    Compare,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Stage::Config => "config",
            Stage::Permute => "permute",
            Stage::Pyramid => "pyramid",
            Stage::Importance => "importance",
            Stage::Mask => "mask",
            Stage::SimilarityCap => "similarity-cap",
            Stage::Attention => "attention",
            Stage::Schedule => "schedule",
            Stage::Compare => "compare",
        };
        f.write_str(name)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    DimensionMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("empty input to {0}")]
    Empty(&'static str),

    #[error("invalid block layout: {0}")]
    Layout(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("reference has zero Frobenius norm")]
    ZeroNormReference,

    #[error("bad magic: expected \"PSAT\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported tensor file version {found} (expected 1)")]
    UnsupportedVersion { found: u32 },

    #[error("truncated tensor file: {0}")]
    Truncated(String),

    #[error("malformed tensor file: {0}")]
    Malformed(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("{stage} stage failed")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn mismatch(op: &'static str, expected: impl fmt::Display, got: impl fmt::Display) -> Self {
        Error::DimensionMismatch {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io(_)
            | Error::BadMagic { .. }
            | Error::UnsupportedVersion { .. }
            | Error::Truncated(_)
            | Error::Malformed(_) => ErrorKind::Io,
            Error::NonFinite { .. } | Error::ZeroNormReference => ErrorKind::Numeric,
            Error::Stage { source, .. } => source.kind(),
            _ => ErrorKind::Validation,
        }
    }

    /// Innermost stage, if the error was raised inside the pipeline.
    pub fn stage(&self) -> Option<Stage> {
        match self {
            Error::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait StageExt<T> {
    fn at(self, stage: Stage) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn at(self, stage: Stage) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e),
        })
    }
}
