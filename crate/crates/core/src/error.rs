use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid agent: {0}")]
    InvalidAgent(String),

    #[error("degenerate box: half extents must be positive, got ({0}, {1})")]
    DegenerateBox(f64, f64),

    #[error("missing action for controlled agent {0}")]
    MissingAction(usize),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("horizon mismatch: need {needed} logged states, have {have}")]
    Horizon { needed: usize, have: usize },

    #[error("unsupported scenario kind `{0}`")]
    UnsupportedKind(String),

    #[error("histogram binning mismatch")]
    BinningMismatch,

    #[error("no evaluated agents in batch")]
    NoEvaluatedAgents,

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
