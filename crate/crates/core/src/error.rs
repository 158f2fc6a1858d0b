use thiserror::Error;

/// Errors surfaced by allocators and manager construction.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SmrError {
    #[error("bump region of process {pid} exhausted ({capacity} bytes); raise --bump-bytes")]
    OutOfMemory { pid: usize, capacity: usize },
    #[error("system allocator returned null for a {size}-byte record")]
    AllocFailed { size: usize },
    #[error("could not map a {bytes}-byte bump region: {reason}")]
    MapFailed { bytes: usize, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("could not install the neutralization signal handler: {0}")]
    Signal(String),
}

/// Returned from a poll point when the calling process was neutralized.
///
/// The process is already quiescent when this is observed; the operation must
/// unwind to its recovery code without touching any record it has not
/// recovery-protected.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Neutralized;
