use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Every violated invariant, collected.
    #[error("invalid configuration: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("geometry: {0}")]
    Geometry(String),

    #[error("correlation matrix not PSD (min eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("path loss distance {distance} m is below the reference distance {reference} m")]
    DistanceBelowReference { distance: f64, reference: f64 },

    #[error("requested {requested} streams but the channel supports at most {available}")]
    TooManyStreams { requested: usize, available: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("stale gradient cache (cache revision {cached}, stack revision {current})")]
    StaleCache { cached: u64, current: u64 },

    #[error("negative power entry {value} at stream {index}")]
    NegativePower { index: usize, value: f64 },

    #[error("water-filling needs at least one positive gain")]
    AllGainsZero,

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{0}")]
    Format(String),
}

impl Error {
    /// True for errors caused by user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Parse { .. } | Error::Validation(_))
    }
}
