use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: unknown behavior label `{label}`")]
    UnknownBehavior { line: usize, label: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("user {user} has {count} target interactions, leave-one-out needs at least 2")]
    TooFewTargets { user: usize, count: usize },

    #[error("{0}")]
    Capacity(String),

    #[error("index {index} out of range for {what} of size {len}")]
    OutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("training diverged at stage {stage}, epoch {epoch}: loss = {loss}")]
    Diverged { stage: u8, epoch: usize, loss: f64 },

    #[error("expected a stage {expected} checkpoint, found stage {found}")]
    StageMismatch { expected: u8, found: u8 },

    #[error("unknown prompt variant `{0}` (expected add, shallow or projection)")]
    UnknownVariant(String),

    #[error("held-out item {item} is not among the candidates of user {user}")]
    HeldOutMissing { user: usize, item: usize },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
