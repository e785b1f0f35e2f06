use thiserror::Error;

pub type Result<T, E = NumError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NumError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("tensor dimensions must be positive, got {rows}x{cols}")]
    EmptyShape { rows: usize, cols: usize },
    #[error("data length {len} does not match shape {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, len: usize },
    #[error("{op}: index {index} out of range for extent {extent}")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("softmax over an empty axis")]
    EmptyAxis,
    #[error("invalid axis {0}; expected 0 (columns) or 1 (rows)")]
    Axis(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("input is not a probability distribution (sum = {sum})")]
    NotADistribution { sum: f64 },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: (usize, usize) },
    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),
    #[error("parameter `{0}` already registered")]
    DuplicateParameter(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("invalid optimizer setting: {0}")]
    Optimizer(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("parse: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
