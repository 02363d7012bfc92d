use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),

    /// Dimension mismatch. `layer` is the 1-based layer index when the
    /// mismatch is attributable to a specific layer.
    #[error("shape error{}: {message}", layer.map(|l| format!(" at layer {l}")).unwrap_or_default())]
    Shape {
        layer: Option<usize>,
        message: String,
    },

    #[error("invalid value: {0}")]
    Value(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("dataset has unlabeled rows (first at row {row})")]
    UnlabeledData { row: usize },

    #[error("all labels belong to a single class")]
    DegenerateLabels,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unsupported layer at index {0} in verified region")]
    UnsupportedLayer(usize),

    #[error("interval propagation produced an infinite ReLU pre-activation bound at neuron {neuron}")]
    UnboundedBigM { neuron: usize },

    #[error("numerical breakdown in simplex: {0}")]
    NumericalBreakdown(String),

    #[error("delta must lie strictly between 0 and 1, got {0}")]
    InvalidDelta(f64),
}

impl Error {
    pub(crate) fn shape(message: impl Into<String>) -> Self {
        Error::Shape {
            layer: None,
            message: message.into(),
        }
    }

    pub(crate) fn shape_at(layer: usize, message: impl Into<String>) -> Self {
        Error::Shape {
            layer: Some(layer),
            message: message.into(),
        }
    }

    /// True for errors caused by bad user input rather than solver failure.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::NumericalBreakdown(_))
    }
}
