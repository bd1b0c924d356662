use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("node {node} ({op}): {message}")]
    Node {
        node: usize,
        op: &'static str,
        message: String,
    },

    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("unknown leaf `{0}`")]
    UnknownLeaf(String),

    #[error("unbound leaf `{0}`")]
    UnboundLeaf(String),

    #[error("gradient requires a scalar output, node {node} has shape {shape:?}")]
    NonScalarOutput { node: usize, shape: Vec<usize> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("class {0} has no samples")]
    EmptyClass(usize),

    #[error("covariance is not positive definite even with regularization {reg:e}")]
    NotPositiveDefinite { reg: f64 },

    #[error("detector is not calibrated; run `calibrate` first")]
    Uncalibrated,

    #[error("detector has no {what}; run `{stage}` first")]
    MissingStage {
        what: &'static str,
        stage: &'static str,
    },

    #[error("{} not found; run `{stage}` first", path.display())]
    MissingArtifact {
        path: std::path::PathBuf,
        stage: &'static str,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code: 2 for configuration errors, 3 for bad input data, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Shape(_) => 3,
            _ => 1,
        }
    }

    pub(crate) fn node(node: usize, op: &'static str, message: impl Into<String>) -> Self {
        Error::Node {
            node,
            op,
            message: message.into(),
        }
    }
}
