//! Crate-wide error type.

/// Errors produced by tensor ops, model plumbing, training, and I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two tensor shapes that were required to agree did not.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A precondition of an operation was violated (bad axis, non-scalar
    /// loss, misaligned lists, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Bad configuration (unknown key, unparsable value, invalid field).
    #[error("config error: {0}")]
    Config(String),

    /// Dataset does not match the requested training stage.
    #[error("dataset/stage mismatch: {0}")]
    Dataset(String),

    /// Image/mask/model geometries disagree.
    #[error("geometry mismatch: {0}")]
    Geometry(String),

    /// A loss or gradient became NaN/Inf.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A checkpoint file failed validation.
    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    /// Malformed PPM or other structured input.
    #[error("parse error: {0}")]
    Parse(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code for the CLI surface.
    ///
    /// 2 = config error, 3 = dataset/stage or geometry mismatch,
    /// 4 = non-finite loss, 5 = corrupt checkpoint, 1 = anything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) => 2,
            Error::Dataset(_) | Error::Geometry(_) => 3,
            Error::NonFinite(_) => 4,
            Error::Checkpoint(_) => 5,
            _ => 1,
        }
    }
}
