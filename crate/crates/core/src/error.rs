use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },
    #[error("gradient needs a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("variable #{0} is detached from this tape")]
    Detached(usize),
    #[error("unknown layer `{name}` (valid layers: {valid})")]
    UnknownLayer { name: String, valid: String },
    #[error("class {class} out of range for a {num_classes}-class model")]
    ClassOutOfRange { class: usize, num_classes: usize },
    #[error("training diverged at epoch {epoch} (loss is not finite)")]
    Diverged { epoch: usize },
    #[error("activation maximization diverged at step {step}")]
    DreamDiverged { step: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("need at least {needed} examples, got {got}")]
    InsufficientExamples { needed: usize, got: usize },
    #[error("inseparable: {0}")]
    Inseparable(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unknown concept generator `{0}`")]
    UnknownConcept(String),
    #[error("empty selection: {0}")]
    EmptySelection(String),
    #[error("images overlap the CAV's training data ({0})")]
    ProvenanceOverlap(String),
    #[error("report grids differ: {0}")]
    GridMismatch(String),
    #[error(
        "significance test aborted: {failed} of {runs} runs failed (last error: {last_error})"
    )]
    TooManyFailedRuns {
        failed: usize,
        runs: usize,
        last_error: String,
    },
}

impl Error {
    /// True for failures caused by non-finite numerics rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Diverged { .. } | Error::DreamDiverged { .. })
    }
}
