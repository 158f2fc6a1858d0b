//! Global epoch, per-process announcements and the incremental advance check.
//!
//! An announcement is a single word: the epoch the process last observed in the
//! high bits and its quiescent bit in bit 0. The global epoch always has bit 0
//! clear and moves forward in steps of two, so an announcement can be compared
//! against it by masking off the low bit.

use std::sync::atomic::{AtomicU64, Ordering};

use crossbeam_utils::CachePadded;

/// Bit 0 of an announcement: set while the process is quiescent.
pub const QUIESCENT_BIT: u64 = 1;

/// Amount the global epoch grows by on every advance.
pub const EPOCH_STEP: u64 = 2;

/// A packed announcement word (epoch bits plus quiescent bit).
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct EpochWord(pub u64);

impl EpochWord {
    #[inline]
    pub fn epoch(self) -> u64 {
        self.0 & !QUIESCENT_BIT
    }

    #[inline]
    pub fn is_quiescent(self) -> bool {
        self.0 & QUIESCENT_BIT != 0
    }
}

/// Packs an even epoch and a quiescent flag into an announcement word.
#[inline]
pub fn pack_announcement(epoch: u64, quiescent: bool) -> EpochWord {
    debug_assert!(epoch & QUIESCENT_BIT == 0, "epoch {epoch} is odd");
    EpochWord(epoch | quiescent as u64)
}

/// True iff the epoch bits of `announcement` equal `read_epoch`.
#[inline]
pub fn is_equal_epoch(read_epoch: u64, announcement: EpochWord) -> bool {
    announcement.epoch() == read_epoch
}

/// Process count and the two scan thresholds.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct EpochParams {
    pub n: usize,
    /// `leave_qstate` calls between two announcement reads.
    pub check_thresh: u64,
    /// Minimum confirmations before the epoch may be advanced.
    pub incr_thresh: u64,
}

impl EpochParams {
    pub fn new(n: usize, check_thresh: u64, incr_thresh: u64) -> Self {
        assert!(n >= 1, "need at least one process");
        assert!(check_thresh >= 1, "CHECK_THRESH must be at least 1");
        assert!(incr_thresh >= 1, "INCR_THRESH must be at least 1");
        Self { n, check_thresh, incr_thresh }
    }
}

/// Per-process scan state. Confined to the owning thread.
///
/// `check_next` counts confirmed announcements since the last reset; the
/// process it probes next is `check_next % n`.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub struct ScanCursor {
    pub check_next: u64,
    pub ops_since_check: u64,
}

impl ScanCursor {
    #[inline]
    pub fn reset(&mut self) {
        self.check_next = 0;
        self.ops_since_check = 0;
    }

    #[inline]
    pub fn next_index(&self, n: usize) -> usize {
        (self.check_next % n as u64) as usize
    }
}

/// Result of one incremental scan step.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum AdvanceOutcome {
    /// The check threshold was not reached; no announcement was read.
    NoOp,
    /// One announcement was read and the epoch was not advanced by us.
    CheckedOne,
    /// Our compare-and-set moved the epoch forward.
    Advanced,
}

/// The shared global epoch word.
#[derive(Debug)]
pub struct GlobalEpoch(CachePadded<AtomicU64>);

impl GlobalEpoch {
    pub fn new() -> Self {
        GlobalEpoch(CachePadded::new(AtomicU64::new(0)))
    }

    #[inline]
    pub fn load(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }

    /// Attempts `read_epoch -> read_epoch + 2`.
    #[inline]
    pub fn try_advance(&self, read_epoch: u64) -> bool {
        self.0
            .compare_exchange(
                read_epoch,
                read_epoch + EPOCH_STEP,
                Ordering::SeqCst,
                Ordering::SeqCst,
            )
            .is_ok()
    }
}

impl Default for GlobalEpoch {
    fn default() -> Self {
        Self::new()
    }
}

/// One announcement word per process, each on its own cache line.
#[derive(Debug)]
pub struct AnnouncementTable {
    entries: Box<[CachePadded<AtomicU64>]>,
}

impl AnnouncementTable {
    /// All entries start as `pack_announcement(0, true)`.
    pub fn new(n: usize) -> Self {
        let initial = pack_announcement(0, true).0;
        let entries = (0..n)
            .map(|_| CachePadded::new(AtomicU64::new(initial)))
            .collect();
        Self { entries }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    #[inline]
    pub fn load(&self, pid: usize) -> EpochWord {
        EpochWord(self.entries[pid].load(Ordering::SeqCst))
    }

    /// Publishes a new announcement for `pid`. Only `pid` may call this.
    ///
    /// Sequentially consistent, so the announcement is visible before any
    /// later access to shared records by the caller.
    #[inline]
    pub fn publish(&self, pid: usize, word: EpochWord) {
        self.entries[pid].store(word.0, Ordering::SeqCst);
    }

    /// Sets the quiescent bit of `pid`. Only `pid` may call this.
    #[inline]
    pub fn set_quiescent(&self, pid: usize) {
        self.entries[pid].fetch_or(QUIESCENT_BIT, Ordering::SeqCst);
    }

    /// Raw pointer to an entry, for the asynchronous neutralization handler.
    pub(crate) fn entry_ptr(&self, pid: usize) -> *const AtomicU64 {
        &*self.entries[pid] as *const AtomicU64
    }
}

/// One incremental scan step, as performed inside `leave_qstate`.
///
/// `suspect` is consulted when the probed process is neither current nor
/// quiescent; it returns true when the caller may treat that process as
/// quiescent for this scan (DEBRA+ neutralization). Plain DEBRA passes a
/// closure returning false. `reads` is incremented once per announcement read.
#[allow(clippy::too_many_arguments)]
#[inline]
pub fn try_advance_epoch(
    cursor: &mut ScanCursor,
    read_epoch: u64,
    table: &AnnouncementTable,
    epoch: &GlobalEpoch,
    params: &EpochParams,
    reads: &mut u64,
    mut suspect: impl FnMut(usize) -> bool,
) -> AdvanceOutcome {
    cursor.ops_since_check += 1;
    if cursor.ops_since_check < params.check_thresh {
        return AdvanceOutcome::NoOp;
    }
    cursor.ops_since_check = 0;
    let other = cursor.next_index(params.n);
    let announcement = table.load(other);
    *reads += 1;
    if is_equal_epoch(read_epoch, announcement) || announcement.is_quiescent() || suspect(other)
    {
        cursor.check_next += 1;
        let c = cursor.check_next;
        if c >= params.n as u64 && c >= params.incr_thresh && epoch.try_advance(read_epoch) {
            return AdvanceOutcome::Advanced;
        }
    }
    AdvanceOutcome::CheckedOne
}
