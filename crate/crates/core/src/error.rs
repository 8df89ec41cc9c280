use std::path::PathBuf;

/// Errors produced by the detection library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller-supplied value violated a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A timestamp fell outside the queryable span of a trajectory.
    #[error("time {t} s outside queryable range [{min} s, {max} s]")]
    TimeOutOfRange { t: f64, min: f64, max: f64 },

    /// The query point sits on (or within 1e-6 m of) the hub rotation
    /// axis, where the time Jacobian vanishes for every laser.
    #[error("degenerate geometry: point within {0} m of the hub rotation axis")]
    DegenerateGeometry(f64),

    /// No valid measurement close enough in time to the solved ray.
    #[error("no valid measurement near t={0} s on the solved laser")]
    NoValidMeasurement(f64),

    /// A reference scan without any valid return cannot anchor a comparison.
    #[error("reference scan {0} has no valid points; cannot compare")]
    EmptyReference(usize),

    /// Two grids that must be congruent are not.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// A file failed to parse. `line` is 1-based for text formats and a
    /// record index for binary ones.
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("missing data: {0}")]
    MissingData(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}
