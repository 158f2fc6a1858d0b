//! The reclaimer interface and its implementations.

mod debra;
mod debra_plus;
mod ebr;
mod hp;
mod none;

pub use debra::{Debra, DebraLocal};
pub use debra_plus::{DebraPlus, DebraPlusLocal};
pub use ebr::{ClassicEbr, EbrLocal};
pub use hp::{HazardPointers, HpLocal};
pub use none::{NoReclaim, NoReclaimLocal};

use crate::block::{BlockChain, BlockPool};
use crate::config::SmrConfig;
use crate::error::{Neutralized, SmrError};
use crate::neutralize::SignalContext;
use crate::record::Record;

/// Destination for records a reclaimer has proven unreachable.
pub trait RecordSink<T> {
    /// The calling process's block pool, for bag maintenance.
    fn blocks(&mut self) -> &mut BlockPool<T>;
    fn release(&mut self, r: *mut Record<T>);
    fn release_chain(&mut self, chain: BlockChain<T>);
    /// Marks the end of one reclamation batch (one rotation or scan).
    fn end_batch(&mut self);
}

/// Per-process instrumentation. Plain integers: only the owner updates them.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub struct ReclaimerCounters {
    pub leave_calls: u64,
    /// Announcement words of (possibly) other processes read by `leave_qstate`.
    pub foreign_reads: u64,
    pub retire_calls: u64,
    /// Blocks acquired while retiring.
    pub retire_block_ops: u64,
    pub rotations: u64,
    /// Successful epoch advances performed by this process.
    pub epoch_advances: u64,
    /// Protection scans (DEBRA+ limbo scans, hazard pointer scans).
    pub scans: u64,
    pub released_records: u64,
    /// Neutralizations this process delivered to others.
    pub neutralizations_sent: u64,
    /// Times this process was neutralized.
    pub neutralized: u64,
}

/// Records a handle still holds when it is torn down.
pub struct Drained<T> {
    /// Retired but not yet safe to reuse.
    pub limbo: Vec<*mut Record<T>>,
    /// Retired under a reclaimer that never reclaims.
    pub leaked: Vec<*mut Record<T>>,
}

impl<T> Default for Drained<T> {
    fn default() -> Self {
        Drained { limbo: Vec::new(), leaked: Vec::new() }
    }
}

/// A memory reclamation scheme.
///
/// Every process alternates `leave_qstate` and `enter_qstate`, starting with
/// `leave_qstate`. Records may only be accessed between the two calls and
/// must not be remembered across them.
pub trait Reclaimer<T>: Send + Sync + Sized {
    type Local: Send;
    const NAME: &'static str;
    /// True only for schemes that can neutralize a process and run its recovery code.
    const SUPPORTS_CRASH_RECOVERY: bool = false;
    /// True when `protect` must be called (with a validation) before a record is read.
    const USES_HAZARD_POINTERS: bool = false;

    fn new(n: usize, cfg: &SmrConfig) -> Result<Self, SmrError>;
    fn local(&self, pid: usize, blocks: &mut BlockPool<T>) -> Self::Local;

    /// Starts an operation. Returns true if the process's announcement changed.
    fn leave_qstate<S: RecordSink<T>>(&self, l: &mut Self::Local, sink: &mut S) -> bool;
    fn enter_qstate(&self, l: &mut Self::Local);
    fn is_quiescent(&self, l: &Self::Local) -> bool;
    fn retire<S: RecordSink<T>>(&self, l: &mut Self::Local, r: *mut Record<T>, sink: &mut S);

    #[inline]
    fn protect(&self, _l: &mut Self::Local, _r: *mut Record<T>, _validate: impl FnOnce() -> bool) -> bool {
        true
    }
    #[inline]
    fn unprotect(&self, _l: &mut Self::Local, _r: *mut Record<T>) {}
    #[inline]
    fn is_protected(&self, _l: &Self::Local, _r: *mut Record<T>) -> bool {
        true
    }

    #[inline]
    fn rprotect(&self, _l: &mut Self::Local, _r: *mut Record<T>) {}
    #[inline]
    fn runprotect_all(&self, _l: &mut Self::Local) {}
    #[inline]
    fn is_rprotected(&self, _l: &Self::Local, _r: *mut Record<T>) -> bool {
        false
    }

    /// Poll point. `Err` means the process has been neutralized and is quiescent.
    #[inline]
    fn poll(&self, _l: &mut Self::Local) -> Result<(), Neutralized> {
        Ok(())
    }
    /// Checkpoint used to run operation bodies under signal neutralization.
    #[inline]
    fn signal_context(&self, _l: &Self::Local) -> Option<SignalContext> {
        None
    }
    /// Bookkeeping after a body was abandoned by a neutralization jump.
    fn after_neutralized(&self, _l: &mut Self::Local) {}
    /// Asks process `pid` to neutralize itself at its next poll point.
    fn request_neutralization(&self, _pid: usize) {}
    /// Neutralizes the caller at its `polls`-th poll point from now (0 = next).
    fn neutralize_after_polls(&self, _l: &mut Self::Local, _polls: Option<u64>) {}

    /// Records in this process's limbo bags.
    fn limbo_len(&self, l: &Self::Local) -> usize;
    /// Records in limbo structures shared by all processes.
    fn shared_limbo_len(&self) -> usize {
        0
    }
    fn counters(&self, l: &Self::Local) -> ReclaimerCounters;
    /// Current global epoch, for schemes that have one.
    fn epoch(&self) -> u64 {
        0
    }

    /// Tears down a process's state, surrendering everything it still holds.
    fn drain_local(&self, l: Self::Local, blocks: &mut BlockPool<T>, out: &mut Drained<T>);
    /// Surrenders shared limbo; requires exclusive access.
    fn drain_shared(&self, _blocks: &mut BlockPool<T>, _out: &mut Drained<T>) {}
}
