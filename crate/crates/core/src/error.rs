use thiserror::Error;

/// Errors raised by the identification toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid covariance: {0}")]
    InvalidCovariance(String),

    #[error("channel {channel} unusable: {flagged} of {total} samples flagged as outliers")]
    ChannelUnusable {
        channel: usize,
        flagged: usize,
        total: usize,
    },

    /// The linear system has no unique solution. `null_directions` spans the
    /// unresolved parameter combinations (in the solver's parameter order).
    #[error("parameters unidentifiable: {reason} ({} null directions)", null_directions.len())]
    Unidentifiable {
        reason: String,
        null_directions: Vec<Vec<f64>>,
    },

    #[error("no residue: the stacked observation matrix has full row rank ({rows} rows); increase L")]
    NoResidue { rows: usize },

    #[error("drifts unidentifiable with L = {l}: drift map rank {rank} < {needed}; try L >= {suggested}")]
    DriftUnidentifiable {
        l: usize,
        rank: usize,
        needed: usize,
        suggested: usize,
    },

    #[error("solver diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by malformed user input rather than the data.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_)
                | Error::InvalidCovariance(_)
                | Error::ChannelUnusable { .. }
                | Error::Io(_)
                | Error::Csv(_)
                | Error::Json(_)
        )
    }

    /// True when the data cannot determine the requested parameters.
    pub fn is_unidentifiable(&self) -> bool {
        matches!(
            self,
            Error::Unidentifiable { .. } | Error::NoResidue { .. } | Error::DriftUnidentifiable { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
