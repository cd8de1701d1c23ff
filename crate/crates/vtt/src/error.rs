use thiserror::Error;

pub type VttResult<T> = std::result::Result<T, VttError>;

#[derive(Debug, Error)]
pub enum VttError {
    #[error("{0}")]
    Malformed(String),
    #[error("{0}")]
    InvalidRequest(String),
    #[error("pool of {truth} images holds {available}, {requested} requested (short by {shortfall})")]
    InsufficientPool {
        truth: &'static str,
        available: usize,
        requested: usize,
        shortfall: usize,
    },
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("unknown item {0}")]
    UnknownItem(String),
    #[error("no endpoint at {0}")]
    NoRoute(String),
    #[error("item {item_id} is not the current item (cursor at {cursor})")]
    OutOfOrder { item_id: String, cursor: usize },
    #[error("item {0} was already rated with a different judgment")]
    ConflictingRating(String),
    #[error("session is complete")]
    SessionComplete,
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
    #[error("{context}: {source}")]
    Json {
        context: String,
        source: serde_json::Error,
    },
}

impl VttError {
    /// Stable machine-readable code used in error bodies.
    pub fn code(&self) -> &'static str {
        match self {
            VttError::Malformed(_) => "malformed_request",
            VttError::InvalidRequest(_) => "invalid_request",
            VttError::InsufficientPool { .. } => "insufficient_pool",
            VttError::UnknownSession(_) => "unknown_session",
            VttError::UnknownItem(_) => "unknown_item",
            VttError::NoRoute(_) => "not_found",
            VttError::OutOfOrder { .. } => "out_of_order",
            VttError::ConflictingRating(_) => "conflicting_rating",
            VttError::SessionComplete => "session_complete",
            VttError::Io { .. } => "io_error",
            VttError::Json { .. } => "storage_error",
        }
    }

    pub fn status(&self) -> u16 {
        match self {
            VttError::Malformed(_) | VttError::InvalidRequest(_) | VttError::InsufficientPool { .. } => 400,
            VttError::UnknownSession(_) | VttError::UnknownItem(_) | VttError::NoRoute(_) => 404,
            VttError::OutOfOrder { .. } | VttError::ConflictingRating(_) | VttError::SessionComplete => 409,
            VttError::Io { .. } | VttError::Json { .. } => 500,
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        VttError::Io {
            context: context.into(),
            source,
        }
    }
}
