use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand dimensions do not conform.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Caller-supplied values violate a precondition.
    #[error("invalid input to {op}: {detail}")]
    Input { op: &'static str, detail: String },

    /// An internal contract was broken, e.g. a forward cache reused after the
    /// model it came from was updated.
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    #[error(transparent)]
    Wire(#[from] crate::wire::WireError),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("round {round}: {source}")]
    Round {
        round: u32,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("log parse error at line {line}: {detail}")]
    LogParse { line: u64, detail: String },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn input(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Input { op, detail: detail.into() }
    }

    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract { op, detail: detail.into() }
    }

    pub(crate) fn in_round(self, round: u32) -> Self {
        match self {
            e @ Error::Round { .. } => e,
            e => Error::Round { round, source: Box::new(e) },
        }
    }
}
