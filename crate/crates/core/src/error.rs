use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised across the crate. Variants carry enough context to name the
/// offending input, so callers can surface them directly.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("invalid shape {shape:?} for {len} values")]
    InvalidShape { shape: Vec<usize>, len: usize },

    #[error("input too short: {got} samples, feature encoder needs at least {min}")]
    InputTooShort { min: usize, got: usize },

    #[error("layer index {got} out of range 1..={max}")]
    LayerOutOfRange { got: usize, max: usize },

    #[error("temperature must be positive in train mode, got {0}")]
    NonPositiveTemperature(f64),

    #[error("zero-norm vector in cosine similarity")]
    ZeroNorm,

    #[error("empty batch")]
    EmptyBatch,

    #[error("no other masked index available for distractor sampling at t={0}")]
    NoDistractorCandidates(usize),

    #[error("no utterance in the batch yields at least two masked frames")]
    BatchUnusable,

    #[error("mask length {mask} does not match frame count {frames}")]
    MaskLengthMismatch { mask: usize, frames: usize },

    #[error("invalid config: {key}: {reason}")]
    InvalidConfig { key: String, reason: String },

    #[error("trial list needs at least one target and one non-target")]
    DegenerateTrials,

    #[error("missing score for trial ({enroll}, {test})")]
    MissingScore { enroll: String, test: String },

    #[error("missing score column for language {0}")]
    MissingLanguage(String),

    #[error("{path}: unsupported sample rate {got} Hz (want {want})")]
    WavSampleRate { path: String, got: u32, want: u32 },

    #[error("{path}: unsupported channel count {got} (want mono)")]
    WavChannels { path: String, got: u16 },

    #[error("{path}: unsupported codec/bit depth (want PCM16), format tag {format}, {bits} bits")]
    WavCodec { path: String, format: u16, bits: u16 },

    #[error("{path}: not a RIFF/WAVE file")]
    WavNotRiff { path: String },

    #[error("{path}: truncated or malformed WAV: {reason}")]
    WavMalformed { path: String, reason: String },

    #[error("malformed line {line} in {path}: {reason}")]
    MalformedLine {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("utterance {id} is shorter than the minimum usable length {min} (has {got})")]
    UtteranceTooShort { id: String, min: usize, got: usize },

    #[error("label {got} out of range for {classes} classes")]
    LabelOutOfRange { got: usize, classes: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
