use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("invalid rotation: {0}")]
    InvalidRotation(String),

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("singular information matrix: {0}")]
    Singular(String),

    #[error("source cannot be localized: {0}")]
    Unlocalizable(String),

    #[error("model parse error at byte {offset}: {message}")]
    ModelParse { offset: usize, message: String },

    #[error("model shape error: {0}")]
    ModelShape(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
