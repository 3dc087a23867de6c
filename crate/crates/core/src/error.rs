use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("mel dimensions {frames}x{bins} are not multiples of 8; pad the mel first (MelSpectrogram::pad_to_multiple_of_8)")]
    NotPadded { frames: usize, bins: usize },

    #[error("latent must have 8 channels, got {0}")]
    ChannelCount(usize),

    #[error("{what} length {len} exceeds the budget of {budget} tokens")]
    OverBudget {
        what: &'static str,
        len: usize,
        budget: usize,
    },

    #[error("song of {duration_s:.3} s ({frames} frames) cannot hold {tokens} lyric bursts (needs {needed} frames)")]
    SongTooShort {
        duration_s: f64,
        frames: usize,
        tokens: usize,
        needed: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown speaker id {id} (table has {size} entries)")]
    UnknownSpeaker { id: u32, size: usize },

    #[error("missing parameter {0:?}")]
    MissingParam(String),

    #[error("LoRA rank {rank} must be below min({rows}, {cols}) of target {name:?}")]
    LoraRank {
        name: String,
        rank: usize,
        rows: usize,
        cols: usize,
    },

    #[error("non-finite value in {what} at step {step}")]
    NonFinite { what: String, step: usize },

    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),

    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Stable machine-readable tag, printed by the CLI and mapped to FFI codes.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::NotPadded { .. } => "not_padded",
            Error::ChannelCount(_) => "channel_count",
            Error::OverBudget { .. } => "over_budget",
            Error::SongTooShort { .. } => "song_too_short",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::UnknownSpeaker { .. } => "unknown_speaker",
            Error::MissingParam(_) => "missing_param",
            Error::LoraRank { .. } => "lora_rank",
            Error::NonFinite { .. } => "non_finite",
            Error::Checkpoint(_) => "checkpoint",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
        }
    }
}
