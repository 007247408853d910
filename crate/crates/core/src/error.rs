use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller handed over inputs that violate an operation's preconditions
    /// (shape mismatches, non-unit embeddings, out-of-range masks).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid codebook: {0}")]
    InvalidCodebook(String),

    #[error("all guidance weights are zero")]
    DegenerateWeights,

    #[error("backend error: {0}")]
    Backend(String),

    #[error("protocol error at byte {offset}: {message}")]
    Protocol { offset: usize, message: String },

    /// A non-finite value appeared while stepping; `stage` names where.
    #[error("run diverged in stage `{stage}`")]
    Diverged { stage: &'static str },

    #[error("illegal transition from {from} on `{event}`")]
    IllegalTransition { from: String, event: String },

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn backend(msg: impl Into<String>) -> Self {
        Error::Backend(msg.into())
    }

    pub fn protocol(offset: usize, msg: impl Into<String>) -> Self {
        Error::Protocol {
            offset,
            message: msg.into(),
        }
    }
}
