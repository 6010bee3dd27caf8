//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed WAV at byte {offset}: {msg}")]
    WavParse { offset: usize, msg: String },

    #[error("unsupported WAV format: {0}")]
    UnsupportedFormat(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("buffer too short: have {have} samples, need {need}")]
    TooShort { have: usize, need: usize },

    #[error("diffusion step {t} outside valid range [{lo}, {hi}]")]
    StepOutOfRange { t: f64, lo: f64, hi: f64 },

    #[error("constraint violated: {0}")]
    Constraint(String),

    #[error("noise schedule search diverged: {0}")]
    SearchDiverged(String),

    #[error("autodiff usage error: {0}")]
    TapeUsage(String),

    #[error("checkpoint version mismatch: file has {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint tensor {name}: shape {found:?} does not match expected {expected:?}")]
    CheckpointShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("checkpoint blob truncated: need {need} bytes, have {have}")]
    CheckpointTruncated { need: usize, have: usize },

    #[error("checkpoint checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CheckpointChecksum { stored: u32, computed: u32 },

    #[error("checkpoint manifest: {0}")]
    CheckpointManifest(String),

    #[error("training aborted: {0}")]
    TrainingAborted(String),

    #[error("{0}")]
    Other(String),
}

impl Error {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
