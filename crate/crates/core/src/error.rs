use thiserror::Error;

/// Errors produced by the core data model and algorithms.
#[derive(Debug, Error)]
pub enum CoreError {
    /// A caller violated an operation contract (bad index, unnormalized
    /// distribution, mismatched lengths).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Tensor shape mismatch; names both offending shapes.
    #[error("shape mismatch: {op} got {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A scenario (or record inside one) failed schema validation.
    #[error("schema error{}: {msg}", scenario_id.as_deref().map(|s| format!(" in scenario '{s}'")).unwrap_or_default())]
    Schema {
        scenario_id: Option<String>,
        msg: String,
    },

    /// A serialized record could not be parsed; names the line.
    #[error("malformed record at line {line}: {msg}")]
    Malformed { line: usize, msg: String },

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Scene had no usable input for the encoder.
    #[error("scenario '{0}' has no valid encoder inputs")]
    EmptyScene(String),

    /// Training diverged (non-finite loss) at the given step.
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    /// Checkpoint file failed validation.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
