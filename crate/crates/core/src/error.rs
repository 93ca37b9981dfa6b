use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("file not found: {}", .0.display())]
    FileNotFound(PathBuf),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt image: {0}")]
    CorruptImage(String),
    #[error("i/o failure on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("expected {expected} channel(s), found {found}")]
    WrongChannelCount { expected: u8, found: u8 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("degenerate tiling: {0}")]
    DegenerateTiling(String),
    #[error("invalid structuring element: {0}")]
    InvalidElement(String),
    #[error("no valid patch center inside the field of view")]
    EmptyFov,
    #[error("invalid stride {0}")]
    InvalidStride(i64),
    #[error("patch {patch_h}x{patch_w} larger than image {image_h}x{image_w}")]
    PatchLargerThanImage {
        patch_h: usize,
        patch_w: usize,
        image_h: usize,
        image_w: usize,
    },
    #[error("pixel ({row}, {col}) not covered by any patch")]
    CountZero { row: usize, col: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("spatial mismatch: {0}")]
    SpatialMismatch(String),
    #[error("odd spatial dimensions {h}x{w}")]
    OddSpatialDims { h: usize, w: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("forward cache already consumed by a backward pass")]
    StaleCache,
    #[error("too few patches: {0}")]
    TooFewPatches(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("degenerate classes: {positives} positive and {negatives} negative samples")]
    DegenerateClasses { positives: usize, negatives: usize },
    #[error("missing files: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingFiles(Vec<PathBuf>),
    #[error("stale artifact: {0}")]
    StaleArtifact(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("malformed {kind} file: {message}")]
    Format { kind: &'static str, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::FileNotFound(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn format(kind: &'static str, message: impl Into<String>) -> Self {
        Error::Format {
            kind,
            message: message.into(),
        }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Parse { .. }
            | Error::InvalidStride(_)
            | Error::InvalidElement(_)
            | Error::DegenerateTiling(_) => 2,
            Error::FileNotFound(_) | Error::MissingFiles(_) | Error::StaleArtifact(_) => 3,
            Error::NonFinite(_) | Error::NonFiniteLoss { .. } | Error::DegenerateClasses { .. } => 4,
            _ => 1,
        }
    }
}
