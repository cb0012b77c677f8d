use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("invalid policy: {0}")]
    InvalidPolicy(String),

    #[error("invalid sampling config: {0}")]
    InvalidSampling(String),

    /// A position would attend to a K/V entry that has not been computed yet.
    #[error("stale attention: position {position} at layer {layer} needs position {blocking}, which is complete only up to layer {blocking_depth}")]
    StaleAttention {
        position: usize,
        layer: usize,
        blocking: usize,
        blocking_depth: usize,
    },

    #[error("cache misuse: {0}")]
    Cache(String),

    #[error("position {position} exceeds max_seq_len {max_seq_len}")]
    PositionOverflow { position: usize, max_seq_len: usize },

    #[error("no head for layer {0}")]
    MissingHead(usize),

    #[error("distribution is not normalized (sum = {0})")]
    NotNormalized(f64),

    #[error("no closed-form depth for policy {0}; measure it empirically")]
    NoClosedForm(String),

    #[error("no admissible token under the modality mask")]
    EmptyAdmissibleSet,

    #[error("training diverged at layer {layer}, step {step}: loss {loss}")]
    Divergence { layer: usize, step: usize, loss: f64 },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("backbone parameters changed during head training")]
    BackboneMutated,

    #[error("container: {0}")]
    Container(String),

    #[error("run with policy {policy}: {source}")]
    Run {
        policy: String,
        #[source]
        source: Box<Error>,
    },

    #[error("{0} already exists; outputs are write-once")]
    AlreadyExists(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
