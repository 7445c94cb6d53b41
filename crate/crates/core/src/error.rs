use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unreadable WAV file {path}: {reason}")]
    UnreadableWav { path: PathBuf, reason: String },

    #[error("unsupported WAV format in {path}: {reason}")]
    UnsupportedWav { path: PathBuf, reason: String },

    #[error("audio sampled at {actual} Hz, expected {expected} Hz")]
    SampleRate { expected: u32, actual: u32 },

    #[error("input too short: {len} samples, need at least {min}")]
    TooShort { len: usize, min: usize },

    #[error("insufficient decay: energy decay curve bottoms out at {floor_db:.1} dB, need {needed_db:.1} dB")]
    InsufficientDecay { floor_db: f64, needed_db: f64 },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("silent input: {0}")]
    Silent(String),

    #[error("empty data: {0}")]
    Empty(String),

    #[error("degenerate statistics: {0}")]
    Degenerate(String),

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
