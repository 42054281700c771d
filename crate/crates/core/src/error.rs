use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure modes shared across the crate.
///
/// Validation failures (bad input, violated invariants) are distinguished from
/// I/O failures so the command line can map them onto different exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed document: {0}")]
    Malformed(String),
    #[error("face {face}: vertex index {index} out of range (N = {n})")]
    FaceIndex { face: usize, index: usize, n: usize },
    #[error("face {face}: degenerate (area {area:e} mm^2)")]
    DegenerateFace { face: usize, area: f64 },
    #[error("non-manifold edge ({0}, {1}) shared by more than two faces (face {2})")]
    NonManifold(usize, usize, usize),
    #[error("mesh is not connected: vertex {0} unreachable from vertex 0")]
    Disconnected(usize),
    #[error("landmark set `{0}` missing or empty")]
    MissingLandmark(&'static str),
    #[error("landmark sets overlap at vertex {0}")]
    LandmarkOverlap(usize),
    #[error("fibre on face {face} invalid: {reason}")]
    Fibre { face: usize, reason: String },
    #[error("uac value at vertex {0} outside [0, 1]")]
    UacRange(usize),
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("eigensolver did not converge: {achieved} of {requested} eigenpairs within tolerance")]
    Eigen { achieved: usize, requested: usize },
    #[error("singular system: {0}")]
    Singular(String),
    #[error("vertex {0} unreachable from the pacing site")]
    Unreachable(usize),
    #[error("electrode too close to surface: {distance:.3} mm from face {face}")]
    ElectrodeTooClose { face: usize, distance: f64 },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("integrity check failed: {0}")]
    Integrity(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
