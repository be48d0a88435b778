//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shape disagreement.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid argument outside shape concerns (rates, strides, sizes).
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// Architecture string could not be parsed.
    #[error("arch parse error at token {index} ({token:?}): {reason}")]
    ArchParse {
        index: usize,
        token: String,
        reason: String,
    },

    /// A model could not be built from its specs.
    #[error("model build error: {0}")]
    ModelBuild(String),

    /// IDX/CIFAR magic number did not match.
    #[error("bad magic number in {path}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        path: String,
        expected: u32,
        found: u32,
    },

    /// File ended before the declared payload.
    #[error("truncated file {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: String,
        expected: u64,
        found: u64,
    },

    /// Image and label files disagree on the record count.
    #[error("count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    /// File length is not a whole number of fixed-size records.
    #[error("bad record length in {path}: {len} bytes is not a multiple of {record}")]
    BadRecordLength {
        path: String,
        len: u64,
        record: u64,
    },

    /// A label fell outside [0, num_classes).
    #[error("label {label} out of range [0, {num_classes}) at record {index}")]
    LabelOutOfRange {
        index: usize,
        label: u32,
        num_classes: usize,
    },

    /// Checkpoint container is malformed or from an unknown version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training produced a non-finite loss.
    #[error("training diverged (non-finite loss) at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },

    /// Secure-region memory account exceeds the budget.
    #[error("secure region needs {total_bytes} bytes, budget is {budget_bytes}")]
    BudgetExceeded { total_bytes: u64, budget_bytes: u64 },

    /// Host/worker byte-stream desync or worker failure.
    #[error("partition protocol error: {0}")]
    Protocol(String),

    /// Dataset descriptor is malformed.
    #[error("dataset descriptor error: {0}")]
    Descriptor(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
