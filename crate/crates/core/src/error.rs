use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("{what} index {index} out of range (limit {limit})")]
    OutOfRange {
        what: &'static str,
        index: u64,
        limit: u64,
    },

    #[error("sample {0} is not in the corpus store")]
    MissingSample(u64),

    #[error("unknown sample ids: {0:?}")]
    UnknownIds(Vec<u64>),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("numeric fault: {0}")]
    NumericFault(String),

    #[error("corrupt artifact: {0}")]
    Corruption(String),

    #[error("format version {found} does not match supported version {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("pin drift: {0}")]
    PinDrift(String),

    #[error("structural mismatch: {0}")]
    ShapeMismatch(String),

    #[error("integrity failure: {0}")]
    Integrity(String),

    #[error("optimizer step {found} does not match WAL opt_step {expected} at logical step {logical_step}")]
    OptStepMismatch {
        logical_step: u32,
        expected: u64,
        found: u64,
    },

    #[error("id manifest: {0}")]
    Manifest(String),

    #[error("revert of {requested} steps exceeds ring window {window}")]
    WindowExceeded { requested: u32, window: u32 },

    #[error("ring buffer has no patch for step {0}")]
    PatchGap(u32),

    #[error("adapter for cohort {0} is merged into the base; route to exact replay")]
    MergedAdapter(u32),

    #[error("adapter for cohort {0} is absent")]
    AdapterAbsent(u32),

    #[error("adapter for cohort {0} was compacted; per-cohort deletion is no longer exact")]
    CompactedAdapter(u32),

    #[error("base parameters changed while training a cohort adapter")]
    FrozenViolation,

    #[error("candidate space 2^{0} is too large for exhaustive ranking")]
    CanarySpaceTooLarge(u32),

    #[error("hot path infeasible: {0}")]
    HotPathInfeasible(String),

    #[error("precondition violated: {0}")]
    Precondition(String),
}
