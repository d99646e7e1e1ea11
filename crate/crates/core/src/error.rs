use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("driver lost: vehicle is {distance:.2} m from the track (capture radius {radius:.2} m)")]
    DriverLost { distance: f64, radius: f64 },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("mixture fit failed: {0}")]
    FitFailed(String),

    #[error("synthetic batch failed: {0} of {1} draws fell outside the regression support")]
    SynthExhausted(usize, usize),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
