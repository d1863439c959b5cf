use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent shapes, missing heads, unaligned parameter names.
    #[error("configuration error: {0}")]
    Config(String),

    /// An API was called outside its contract (non-scalar loss, empty grid, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// Non-finite values or a gradient norm above the configured limit.
    #[error("gradient explosion at `{param}`: {detail}")]
    Explosion { param: String, detail: String },

    #[error("generation error: {0}")]
    Generation(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn is_explosion(&self) -> bool {
        matches!(self, Error::Explosion { .. })
    }
}
