use thiserror::Error;

use crate::backend::MaskKind;

pub type Result<T> = std::result::Result<T, Error>;

/// Error type shared by every module in this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("backend load failure: {0}")]
    BackendLoad(String),

    #[error("invalid image reference {reference:?}: {detail}")]
    ImageRef { reference: String, detail: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("mask index {index} out of range for {n_tokens} visual tokens")]
    MaskIndexOutOfRange { index: usize, n_tokens: usize },

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("rescoring requires a non-empty fixed response")]
    EmptyResponse,

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("invalid trace: {0}")]
    InvalidTrace(String),

    #[error("layer band ({0}, {1}) outside exported attention layers 0..{2}")]
    BandOutsideExported(usize, usize, usize),

    #[error("hidden states for layer {0} not exported")]
    LayerUnavailable(usize),

    #[error("operation requires a full-condition trace, got condition {0}")]
    NonFullTrace(String),

    #[error("layout carries no evidence regions")]
    NoEvidenceRegions,

    #[error("{0} region contains no patches")]
    EmptyRegion(&'static str),

    #[error("entropy for condition {0} is missing")]
    MissingConditionEntropy(MaskKind),

    #[error("at least one generation step is required")]
    EmptySteps,

    #[error("need hidden states for at least 2 layers, got {0}")]
    InsufficientLayers(usize),

    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("need at least {need} responses, got {got}")]
    TooFewResponses { need: usize, got: usize },

    #[error("equivalence oracle is asymmetric on ({0:?}, {1:?})")]
    AsymmetricEquivalence(String, String),

    #[error("AUROC undefined: {0}")]
    UndefinedAuroc(String),

    #[error("scores and labels have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),

    #[error("insufficient labeled samples: have {have}, need {need}")]
    InsufficientLabeled { have: usize, need: usize },

    #[error("score {0} is not implemented: {1}")]
    UnsupportedScore(String, String),

    #[error("unknown score name {0:?}")]
    UnknownScore(String),

    #[error("cache format error: {0}")]
    CacheFormat(String),

    #[error("malformed dataset line {line}: {detail}")]
    MalformedRecord { line: usize, detail: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
