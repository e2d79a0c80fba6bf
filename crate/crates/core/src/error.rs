use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("{what} index {index} out of range (limit {limit})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid phantom or spectrum: {0}")]
    InvalidSpec(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("mixing matrix is rank deficient (rank {rank} < {materials} materials)")]
    RankDeficient { rank: usize, materials: usize },

    #[error("more materials ({materials}) than energy bins ({bins})")]
    Underdetermined { bins: usize, materials: usize },

    #[error("negative line integral {value} at sinogram index {index}")]
    NegativeLineIntegral { index: usize, value: f64 },

    #[error("tensor format: {0}")]
    Format(String),

    #[error("truncated tensor payload: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("metric: {0}")]
    Metric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn shape_err(expected: impl ToString, actual: impl ToString) -> Error {
    Error::ShapeMismatch {
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}
