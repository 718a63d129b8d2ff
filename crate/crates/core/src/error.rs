use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("degenerate layer shape")]
    DegenerateShape,
    #[error("shape mismatch for `{name}`: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("coordinate {0} lies outside (-1, 1)")]
    OutOfRange(f64),
    #[error("empty training signal")]
    EmptyTrainingSignal,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("empty dispatch plan")]
    EmptyPlan,
    #[error("dispatch budget must be positive (cdn {0})")]
    InvalidBudget(usize),
    #[error("requested videos without a cluster: {0:?}")]
    Unassigned(Vec<u64>),
    #[error("training diverged at iteration {iteration}: loss {loss}")]
    Divergence { iteration: u64, loss: f64 },
    #[error("snapshot checksum mismatch for {0}")]
    Checksum(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("series too short: need at least {needed}, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("zero variance")]
    ZeroVariance,
    #[error("fewer than two clusters populated")]
    TooFewClusters,
}

impl Error {
    pub(crate) fn shape(name: &str, expected: &[usize], got: &[usize]) -> Self {
        Error::ShapeMismatch {
            name: name.into(),
            expected: expected.to_vec(),
            got: got.to_vec(),
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
