use raliflow_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point too close to the sensor for a line of sight")]
    DegeneratePoint,
    #[error("track id mismatch: {0} vs {1}")]
    TrackMismatch(u32, u32),
    #[error("duplicate track id {0} within one frame")]
    DuplicateTrackId(u32),
    #[error("invalid rigid transform")]
    InvalidTransform,
    #[error("invalid box for track {0}")]
    InvalidBox(u32),
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("frame mismatch: {0} vs {1}")]
    FrameMismatch(String, String),
    #[error("feature maps do not share one grid")]
    GridMismatch,
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("schema violation in {file}: {msg}")]
    Schema { file: String, msg: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config_invalid",
            Error::Schema { .. } | Error::Json(_) | Error::Csv(_) => "schema_violation",
            Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => "missing_file",
            Error::Io(_) => "io",
            Error::Tensor(_) => "tensor",
            _ => "invalid_input",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
