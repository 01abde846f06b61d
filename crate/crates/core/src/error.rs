use thiserror::Error;

#[derive(Debug, Error)]
pub enum MobreError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch for `{name}`: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("signal too short: {got} samples, at least {required} required")]
    SignalTooShort { required: usize, got: usize },

    #[error("top_k = {top_k} exceeds number of experts {experts}")]
    TopKExceedsExperts { top_k: usize, experts: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("unknown task id {0}")]
    UnknownTask(usize),

    #[error("region index {region} out of range for {num_regions} regions")]
    RegionOutOfRange { region: usize, num_regions: usize },

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("missing parameters: {}", .0.join(", "))]
    MissingParams(Vec<String>),

    #[error("mask ratio {0} outside (0, 1)")]
    InvalidMaskRatio(f64),

    #[error("no masked tokens in batch")]
    NoMaskedTokens,

    #[error("unknown ablation variant `{0}`")]
    UnknownVariant(String),

    #[error("invalid held-out subject: {0}")]
    HeldOut(String),

    #[error("unsupported sample rate conversion {from} Hz -> {to} Hz")]
    Resample { from: f64, to: f64 },

    #[error("checkpoint integrity check failed: {0}")]
    Integrity(String),

    #[error("unsupported checkpoint format version {0}")]
    Version(String),

    #[error("malformed checkpoint: {0}")]
    CheckpointFormat(String),

    #[error("checkpoint stage `{got}` not accepted here (expected one of {expected})")]
    Stage { got: String, expected: String },

    #[error("malformed corpus: {0}")]
    Corpus(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, MobreError>;

impl MobreError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        MobreError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
