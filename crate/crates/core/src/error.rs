use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid architecture: {0}")]
    InvalidSpec(String),

    #[error("architecture mismatch: {0}")]
    SpecMismatch(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invariance enumeration needs U = {count} operations, above the budget of {budget}")]
    BudgetExceeded { count: u128, budget: u64 },

    #[error("invalid invariance operation: {0}")]
    InvalidOp(String),

    #[error("invalid alignment: {0}")]
    InvalidAlignment(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("csv {path}: {msg}")]
    Csv { path: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
