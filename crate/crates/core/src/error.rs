use thiserror::Error;

/// Errors produced anywhere in the simulator / decoder pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A field was requested at a point where the cuboid model does not apply.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    /// Correlation-based initialisation found more than one plausible start angle.
    #[error("ambiguous start angle: candidates {first_deg:.3} deg and {second_deg:.3} deg")]
    Ambiguous { first_deg: f64, second_deg: f64 },

    #[error("tracking lost at sample {sample}: {reason}")]
    TrackingLoss { sample: usize, reason: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl From<csv::Error> for Error {
    fn from(err: csv::Error) -> Self {
        let line = err.position().map(|p| p.line()).unwrap_or(0);
        match err.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Parse {
                line,
                message: format!("{other:?}"),
            },
        }
    }
}
