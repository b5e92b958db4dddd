use thiserror::Error;

use crate::ir::Violation;

pub type Result<T> = std::result::Result<T, Error>;

/// Category of a DSL front-end failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseErrorKind {
    Syntax,
    Undeclared,
    DimensionMismatch,
    Duplicate,
    Invalid,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{line}:{col}: {msg}")]
    Parse {
        line: usize,
        col: usize,
        kind: ParseErrorKind,
        msg: String,
    },

    #[error("invalid pragma configuration: {}", format_violations(.0))]
    InvalidConfig(Vec<Violation>),

    #[error("unknown optype `{0}`")]
    UnknownOptype(String),

    #[error("operation library has no entry for `{0}`")]
    MissingLibEntry(String),

    #[error("dependence cycle inside one iteration involving node {0}")]
    Cycle(usize),

    #[error("inner subgraph for loop instance {0} not found in graph")]
    SubgraphNotFound(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite activation in layer {layer}")]
    NonFinite { layer: usize },

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("dataset too small: {got} samples, need at least {need}")]
    DatasetTooSmall { got: usize, need: usize },

    #[error("{stage} validation MAPE {mape:.2}% exceeds abort threshold {threshold:.2}%")]
    StageAbort {
        stage: String,
        mape: f64,
        threshold: f64,
    },

    #[error("model bundle: {0}")]
    Bundle(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("empty design space")]
    EmptyDesignSpace,

    #[error("{0}")]
    Invalid(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
