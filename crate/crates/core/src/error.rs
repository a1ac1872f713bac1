use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point index {index} out of range for a space of {n} points")]
    InvalidPoint { index: usize, n: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid space: {0}")]
    InvalidSpace(String),

    #[error("non-finite value {value} at point {point}")]
    NonFinite { point: usize, value: f64 },

    #[error("objects live on different spaces")]
    SpaceMismatch,

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("radius {radius} is below the scale floor {floor} at point {point}")]
    BelowFloor {
        point: usize,
        radius: f64,
        floor: f64,
    },

    #[error("point {point} is isolated at every scale of the ladder")]
    Isolated { point: usize },

    #[error(
        "Lipschitz bound {bound} is below the Lipschitz constant {constant} of the data \
         (witness pair {a}, {b})"
    )]
    LipschitzBound {
        bound: f64,
        constant: f64,
        a: usize,
        b: usize,
    },

    #[error("inputs disagree at point {point}: {left} != {right}")]
    Disagreement { point: usize, left: f64, right: f64 },

    #[error("rank {found} at point {point}, expected {expected}")]
    RankMismatch {
        point: usize,
        found: usize,
        expected: usize,
    },

    #[error("|det B| = {det} below the floor {floor} at point {point}")]
    SingularMinor { point: usize, det: f64, floor: f64 },

    #[error(
        "no {size}x{size} minor clears the determinant floor at point {point}, \
         although the rank there is {size}: the rank tau and eps_floor are inconsistent"
    )]
    MinorNotFound { size: usize, point: usize },

    #[error("least-squares problem underdetermined at point {point}: {count} points in the ball")]
    Underdetermined { point: usize, count: usize },

    #[error("point {point} is not covered")]
    NotCovered { point: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("malformed csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
