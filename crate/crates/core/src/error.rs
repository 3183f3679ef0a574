use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("attention over an empty key set")]
    EmptyKeys,
    #[error("instance bank is empty")]
    EmptyBank,
    #[error("backward already ran on this graph; rebuild it with a new forward pass")]
    BackwardTwice,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown class name {0:?}")]
    Vocabulary(String),
    #[error("routing error: {0}")]
    Routing(String),
    #[error("assignment error: {0}")]
    Assignment(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("training diverged (seed {seed}, step {step}): {reason}")]
    Divergence {
        seed: u64,
        step: usize,
        reason: String,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LabError {
    pub fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        LabError::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// True for failures caused by bad input or configuration rather than by
    /// the numerics of a run.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            LabError::Config(_)
                | LabError::Vocabulary(_)
                | LabError::Format(_)
                | LabError::Io(_)
                | LabError::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
