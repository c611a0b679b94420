use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the beat-matching pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("audio file not found: {0}")]
    MissingFile(PathBuf),
    #[error("malformed RIFF/WAV data: {0}")]
    MalformedWav(String),
    #[error("unsupported audio codec: {0}")]
    UnsupportedCodec(String),
    #[error("empty signal")]
    EmptySignal,
    #[error("cut time {time}s outside [0, {duration}s]")]
    CutOutOfRange { time: f64, duration: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("sequence of {n} units exceeds capacity {max}")]
    Capacity { n: usize, max: usize },

    #[error("PN ratio undefined: label vector needs at least one positive and one negative")]
    UndefinedRatio,
    #[error("no eligible label vectors for sigma estimation")]
    NoEligibleSamples,

    #[error("synthetic spec yields zero beats")]
    NoBeats,
    #[error("empty manifest: {0}")]
    EmptyManifest(String),
    #[error("non-finite loss at epoch {epoch}, audio {audio}")]
    NonFiniteLoss { epoch: usize, audio: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
