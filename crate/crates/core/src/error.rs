use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("image decode error: {0}")]
    Decode(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    /// A spike addressed a neuron outside the presynaptic layer.
    #[error("topology error: {0}")]
    Topology(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported model version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("state error: {0}")]
    State(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by malformed input data or files rather than
    /// by configuration or a failed computation.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Decode(_)
                | Error::Format(_)
                | Error::UnsupportedVersion { .. }
                | Error::Io { .. }
        )
    }
}
