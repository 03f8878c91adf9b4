use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = VleError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum VleError {
    /// A caller broke an operation's precondition (shapes, variant, sizes).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("image error for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl VleError {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        VleError::Contract(msg.into())
    }

    pub(crate) fn shape(expected: &[usize], got: &[usize]) -> Self {
        VleError::Shape {
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    /// Short stable identifier, used for machine-parsable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            VleError::Contract(_) => "contract",
            VleError::Shape { .. } => "shape",
            VleError::NonFinite(_) => "non_finite",
            VleError::Config(_) => "config",
            VleError::EmptyDataset(_) => "empty_dataset",
            VleError::CorruptCheckpoint(_) => "corrupt_checkpoint",
            VleError::CheckpointVersion { .. } => "checkpoint_version",
            VleError::Image { .. } => "image",
            VleError::Io(_) => "io",
        }
    }
}
