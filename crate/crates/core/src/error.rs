use thiserror::Error;

pub type Result<T> = std::result::Result<T, ShareError>;

/// Coarse grouping used by front ends to map failures onto exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Validation,
    Numeric,
}

impl ErrorCategory {
    pub fn label(self) -> &'static str {
        match self {
            ErrorCategory::Usage => "usage",
            ErrorCategory::Validation => "validation",
            ErrorCategory::Numeric => "numeric",
        }
    }
}

#[derive(Debug, Error)]
pub enum ShareError {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("svd did not converge for a {rows}x{cols} matrix")]
    NumericFailure { rows: usize, cols: usize },

    #[error("ill-conditioned basis in layer {layer}: smallest singular value {smallest:e}")]
    IllConditioned { layer: String, smallest: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("consistency error in layer {layer}: {detail}")]
    Consistency { layer: String, detail: String },

    #[error("unknown layer {0}")]
    UnknownLayer(String),

    #[error("unknown task {0}")]
    UnknownTask(String),

    #[error("requested k={requested} exceeds achievable k={achievable}")]
    Rank { requested: usize, achievable: usize },

    #[error("training diverged (last finite loss {last_finite_loss:e})")]
    TrainingFailure { last_finite_loss: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt payload: {detail} (needs bytes {start}..{end}, available {available})")]
    Corruption { detail: String, start: u64, end: u64, available: u64 },

    #[error("validation failed for {field}: {detail}")]
    Validation { field: String, detail: String },

    #[error("task {name} already exists; rename it, e.g. {suggestion}")]
    TaskCollision { name: String, suggestion: String },

    #[error("continual-learning policy violation: {0}")]
    Policy(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub(crate) const UNNAMED_LAYER: &str = "<unnamed>";

impl ShareError {
    pub fn category(&self) -> ErrorCategory {
        match self {
            ShareError::Argument(_) => ErrorCategory::Usage,
            ShareError::NumericFailure { .. }
            | ShareError::IllConditioned { .. }
            | ShareError::Degenerate(_)
            | ShareError::Rank { .. }
            | ShareError::TrainingFailure { .. }
            | ShareError::NonFinite { .. } => ErrorCategory::Numeric,
            _ => ErrorCategory::Validation,
        }
    }

    /// Attach a layer name to errors raised by layer-agnostic kernels.
    pub fn in_layer(self, layer: &str) -> Self {
        match self {
            ShareError::IllConditioned { layer: l, smallest } if l == UNNAMED_LAYER => {
                ShareError::IllConditioned { layer: layer.to_string(), smallest }
            }
            ShareError::Consistency { layer: l, detail } if l == UNNAMED_LAYER => {
                ShareError::Consistency { layer: layer.to_string(), detail }
            }
            other => other,
        }
    }

    pub(crate) fn validation(field: impl Into<String>, detail: impl Into<String>) -> Self {
        ShareError::Validation { field: field.into(), detail: detail.into() }
    }

    pub(crate) fn consistency(layer: impl Into<String>, detail: impl Into<String>) -> Self {
        ShareError::Consistency { layer: layer.into(), detail: detail.into() }
    }
}
