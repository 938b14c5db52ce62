use std::path::PathBuf;

/// Every failure the library can report.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),
    #[error("malformed wav header: {0}")]
    MalformedHeader(String),
    #[error("clip has {len} samples, need at least {need}")]
    ClipTooShort { len: usize, need: usize },
    #[error("stft config does not satisfy constant overlap-add: {0}")]
    NonColaConfig(String),
    #[error("invalid stft config: {0}")]
    InvalidStft(String),
    #[error("clean signal is silent")]
    SilentClean,
    #[error("noise signal is silent")]
    SilentNoise,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("model dimension {dim} not divisible by {heads} heads")]
    HeadDivisibility { dim: usize, heads: usize },
    #[error("need at least {need} samples for k-means, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("codebook index {index} out of range for {size} codes")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("codebook has not been initialized")]
    UntrainedModel,
    #[error("empty input")]
    EmptyInput,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("validation set is empty")]
    EmptyValSet,
    #[error("manifest is empty")]
    EmptyManifest,
    #[error("need at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("degenerate sample: {0}")]
    DegenerateSample(String),
    #[error("dry/wet mix {0} outside [0, 1]")]
    InvalidAlpha(f32),
    #[error("attack steps must be at least 1")]
    InvalidAttack(String),
    #[error("checkpoint version {found} not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether this error stems from a numerical failure (NaN/Inf trip).
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_))
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
