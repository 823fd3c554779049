use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Malformed input document. `location` names the node/key at fault.
    Parse { location: String, message: String },
    CycleDetected { node: String },
    ShapeMismatch { node: String, field: String, message: String },
    UnknownOpClass { node: String, class: String },
    DuplicateNode { node: String },
    UnknownBenchmark(String),
    InvalidAccelerator(String),
    InvalidCut { block: usize, message: String },
    /// A tensor could not be placed even after evicting everything.
    Unschedulable { tensor: String, message: String },
    UnknownCore { op: String, core: usize },
    /// Internal invariant violated (no valid mapping, bad trace).
    Internal(String),
    Io(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Parse { location, message } => write!(f, "parse error at {location}: {message}"),
            Error::CycleDetected { node } => write!(f, "cycle detected through node '{node}'"),
            Error::ShapeMismatch { node, field, message } => {
                write!(f, "shape mismatch at node '{node}' ({field}): {message}")
            }
            Error::UnknownOpClass { node, class } => {
                write!(f, "unknown op class '{class}' on node '{node}'")
            }
            Error::DuplicateNode { node } => write!(f, "duplicate node id '{node}'"),
            Error::UnknownBenchmark(name) => write!(f, "unknown builtin benchmark '{name}'"),
            Error::InvalidAccelerator(msg) => write!(f, "invalid accelerator: {msg}"),
            Error::InvalidCut { block, message } => write!(f, "invalid cut for block {block}: {message}"),
            Error::Unschedulable { tensor, message } => {
                write!(f, "tensor {tensor} is unschedulable: {message}")
            }
            Error::UnknownCore { op, core } => {
                write!(f, "allocation maps '{op}' onto unknown core {core}")
            }
            Error::Internal(msg) => write!(f, "internal error: {msg}"),
            Error::Io(msg) => write!(f, "io error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
