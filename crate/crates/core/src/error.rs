use alloc::boxed::Box;
use alloc::string::String;

/// Errors produced anywhere in the core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("insufficient events: need {needed} distinct uncensored times, found {found}")]
    InsufficientEvents { needed: usize, found: usize },
    #[error("too few records: need at least {needed}, got {got}")]
    TooFewRecords { needed: usize, got: usize },
    #[error("empty instance bag")]
    EmptyBag,
    #[error("bin label {label} outside 1..={bins}")]
    InvalidBin { label: usize, bins: usize },
    #[error("empty routing trace")]
    EmptyTrace,
    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),
    #[error("degenerate test: {0}")]
    DegenerateTest(&'static str),
    #[error("{0} produced a non-finite value")]
    NonFiniteValue(&'static str),
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        source: Box<Error>,
    },
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// The innermost error beneath any stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self.root(), Error::NonFiniteValue(_) | Error::NonFinite { .. })
    }
}

/// Attach a pipeline stage name to an error.
pub(crate) trait StageContext<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageContext<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|source| Error::Stage {
            stage,
            source: Box::new(source),
        })
    }
}
