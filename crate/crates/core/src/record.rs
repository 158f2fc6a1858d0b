//! Records and the debug header used by poison mode.

use std::sync::atomic::{AtomicU32, AtomicU64, AtomicUsize, Ordering};

use crossbeam_utils::CachePadded;

/// Canary of a record that may legitimately be read.
pub const LIVE_CANARY: u64 = 0x5AFE_C0DE_5AFE_C0DE;
/// Canary written when a record is handed back to a pool or freed.
pub const POISON_CANARY: u64 = 0xDEAD_BEEF_DEAD_BEEF;

/// Lifecycle state kept in the record header.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum RecordState {
    /// Allocated and possibly reachable from the data structure.
    Live = 1,
    /// Removed from the data structure; waiting in a limbo bag.
    Retired = 2,
    /// Sitting in a pool, quarantine or the shared bag.
    Pooled = 3,
    /// Returned to the allocator.
    Freed = 4,
}

impl RecordState {
    fn from_raw(raw: u32) -> Option<Self> {
        match raw {
            1 => Some(Self::Live),
            2 => Some(Self::Retired),
            3 => Some(Self::Pooled),
            4 => Some(Self::Freed),
            _ => None,
        }
    }
}

#[derive(Debug)]
pub struct RecordHeader {
    canary: AtomicU64,
    state: AtomicU32,
}

/// Unit of allocation: a debug header followed by the payload.
#[repr(C)]
#[derive(Debug)]
pub struct Record<T> {
    header: RecordHeader,
    pub value: T,
}

impl<T> Record<T> {
    /// Initializes a record in place at `r` with state `Live`.
    ///
    /// # Safety
    /// `r` must be valid for writes of `Record<T>`, and no other thread may
    /// access it concurrently.
    pub unsafe fn init(r: *mut Record<T>, value: T) {
        std::ptr::addr_of_mut!((*r).header).write(RecordHeader {
            canary: AtomicU64::new(LIVE_CANARY),
            state: AtomicU32::new(RecordState::Live as u32),
        });
        std::ptr::addr_of_mut!((*r).value).write(value);
    }

    /// Overwrites the payload of a recycled record and marks it `Live`.
    ///
    /// # Safety
    /// As for [`Record::init`]; the header must already be initialized.
    pub unsafe fn reinit(r: *mut Record<T>, value: T) {
        std::ptr::addr_of_mut!((*r).value).write(value);
        let h = &(*r).header;
        h.canary.store(LIVE_CANARY, Ordering::Relaxed);
        h.state.store(RecordState::Live as u32, Ordering::Release);
    }

    pub fn state(&self) -> Option<RecordState> {
        RecordState::from_raw(self.header.state.load(Ordering::Acquire))
    }

    pub fn canary(&self) -> u64 {
        self.header.canary.load(Ordering::Acquire)
    }

    /// Moves the state from `from` to `to`; returns the observed raw state on failure.
    pub(crate) fn transition(&self, from: RecordState, to: RecordState) -> Result<(), u32> {
        self.header
            .state
            .compare_exchange(from as u32, to as u32, Ordering::AcqRel, Ordering::Acquire)
            .map(|_| ())
    }

    pub(crate) fn set_state(&self, to: RecordState) {
        self.header.state.store(to as u32, Ordering::Release);
    }

    pub(crate) fn poison(&self) {
        self.header.canary.store(POISON_CANARY, Ordering::Release);
    }
}

/// What kind of misuse a fault describes.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum FaultKind {
    /// Read of a record that was pooled or freed.
    UseAfterRelease = 1,
    /// `retire` on a record that was not live.
    DoubleRetire = 2,
    /// A record taken from a pool was not in the pooled state.
    CorruptPool = 3,
    /// A record was deallocated twice.
    DoubleFree = 4,
    /// A record was released to a pool without having been retired.
    ReleaseNotRetired = 5,
}

impl FaultKind {
    fn from_raw(raw: u32) -> Option<Self> {
        match raw {
            1 => Some(Self::UseAfterRelease),
            2 => Some(Self::DoubleRetire),
            3 => Some(Self::CorruptPool),
            4 => Some(Self::DoubleFree),
            5 => Some(Self::ReleaseNotRetired),
            _ => None,
        }
    }
}

/// First fault seen, kept for the failure report.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct FaultReport {
    pub pid: usize,
    pub addr: usize,
    pub kind: FaultKind,
    pub observed_state: u32,
    pub observed_canary: u64,
}

/// Fault counter shared by all processes.
///
/// Recording a fault never allocates or locks, so it is safe from inside an
/// operation body that may be abandoned by a neutralization jump.
#[derive(Debug, Default)]
pub struct FaultLog {
    count: CachePadded<AtomicU64>,
    first_pid: AtomicUsize,
    first_addr: AtomicUsize,
    first_kind: AtomicU32,
    first_state: AtomicU32,
    first_canary: AtomicU64,
}

impl FaultLog {
    pub fn record<T>(&self, pid: usize, r: *const Record<T>, kind: FaultKind) {
        let (state, canary) = unsafe {
            (
                (*r).header.state.load(Ordering::Relaxed),
                (*r).header.canary.load(Ordering::Relaxed),
            )
        };
        if self.count.fetch_add(1, Ordering::AcqRel) == 0 {
            self.first_pid.store(pid, Ordering::Relaxed);
            self.first_addr.store(r as usize, Ordering::Relaxed);
            self.first_state.store(state, Ordering::Relaxed);
            self.first_canary.store(canary, Ordering::Relaxed);
            self.first_kind.store(kind as u32, Ordering::Release);
        }
    }

    pub fn count(&self) -> u64 {
        self.count.load(Ordering::Acquire)
    }

    pub fn first(&self) -> Option<FaultReport> {
        let kind = FaultKind::from_raw(self.first_kind.load(Ordering::Acquire))?;
        Some(FaultReport {
            pid: self.first_pid.load(Ordering::Relaxed),
            addr: self.first_addr.load(Ordering::Relaxed),
            kind,
            observed_state: self.first_state.load(Ordering::Relaxed),
            observed_canary: self.first_canary.load(Ordering::Relaxed),
        })
    }
}
