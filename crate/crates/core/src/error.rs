use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid hyperparameters or operand extents.
    #[error("configuration error in {context}: {message}")]
    Config { context: String, message: String },

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("degenerate variance in {op}: {count} element(s) per channel")]
    DegenerateVariance { op: String, count: usize },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("not an archive: {0}")]
    NotAnArchive(String),

    #[error("unsupported version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("unsupported dtype code {code} for entry `{name}`")]
    UnsupportedDtype { name: String, code: u8 },

    #[error("bounds error for `{name}`: {message}")]
    Bounds { name: String, message: String },

    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),

    #[error("invalid tensor name: {0}")]
    InvalidName(String),

    #[error("missing tensors: {}", .0.join(", "))]
    MissingTensors(Vec<String>),

    #[error("extent mismatch for `{name}`: model has {model:?}, archive has {archive:?}")]
    ExtentMismatch {
        name: String,
        model: Vec<usize>,
        archive: Vec<usize>,
    },

    #[error("import policy does not cover: {}", .0.join(", "))]
    PolicyGap(Vec<String>),

    #[error("invalid trial data: {0}")]
    InvalidData(String),

    #[error("label of trial {index} lies outside the {width}x{height} screen: ({x}, {y})")]
    LabelOutOfBounds {
        index: usize,
        x: f32,
        y: f32,
        width: f32,
        height: f32,
    },

    #[error("singular normal equations (use a positive ridge penalty)")]
    Singular,

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NumericalAbort { epoch: usize, batch: usize },

    #[error("{context}: {source}")]
    Io {
        context: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            context: context.into(),
            message: message.into(),
        }
    }

    pub(crate) fn shape(context: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            context: path.into(),
            source,
        }
    }

    /// Prefix the context of configuration and shape errors, so errors raised
    /// deep inside a layer name the layer they came from.
    pub fn within(self, layer: &str) -> Self {
        match self {
            Error::Config { context, message } => Error::Config {
                context: format!("{layer}/{context}"),
                message,
            },
            Error::Shape {
                context,
                expected,
                actual,
            } => Error::Shape {
                context: format!("{layer}/{context}"),
                expected,
                actual,
            },
            Error::NonFinite { op } => Error::NonFinite {
                op: format!("{layer}/{op}"),
            },
            other => other,
        }
    }
}
