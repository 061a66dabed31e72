use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {reason}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("manifest {0} has no records")]
    EmptyManifest(PathBuf),
    #[error("referenced file does not exist: {0}")]
    MissingFile(PathBuf),
    #[error("subject `{subject}` has only {frames} frame(s); at least 2 are needed to form a pair")]
    SingleFrameSubject { subject: String, frames: usize },
    #[error("pair index {index} is outside the configured range of {limit} samples")]
    IndexOutOfRange { index: u64, limit: u64 },
    #[error("cannot decode image {path}: {reason}")]
    Decode { path: PathBuf, reason: String },
    #[error("unsupported pixel format {format} in {path}; expected 8-bit gray or RGB(A)")]
    UnsupportedBitDepth { path: PathBuf, format: String },
    #[error("invalid keypoints: {0}")]
    InvalidKeypoints(String),
    #[error("invalid image buffer: {0}")]
    InvalidImage(String),
    #[error("invalid resolution level {0}; expected one of 64, 128, 256, 512, 1024")]
    InvalidLevel(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("sigma must be positive, got {0}")]
    InvalidSigma(f32),
    #[error("model is already at the maximum level 1024")]
    AtMaximumLevel,
    #[error("descriptor set is empty")]
    EmptyDescriptors,
    #[error("step {step} is outside [0, {total})")]
    StepOutOfRange { step: u64, total: u64 },
    #[error("unsupported discriminator crop side {0}; the default configuration accepts 128 only")]
    UnsupportedCropSide(usize),
    #[error("input of {got} px is too small for MS-SSIM; minimum side is {min} px")]
    TooSmall { got: usize, min: usize },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: String, expected: String },
    #[error("level mismatch: {0}")]
    LevelMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite loss at level {level}, step {step}; diagnostic checkpoint written to {snapshot}")]
    NonFiniteLoss {
        level: usize,
        step: u64,
        snapshot: PathBuf,
    },
    #[error("image encoding failed for {path}: {reason}")]
    Encode { path: PathBuf, reason: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
