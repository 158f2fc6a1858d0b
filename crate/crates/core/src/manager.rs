//! The record manager: one allocator, one reclaimer and one pool behind a
//! single statically composed interface.

use std::mem::ManuallyDrop;
use std::sync::atomic::{AtomicBool, AtomicU8, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use crossbeam_utils::CachePadded;

use crate::alloc::{AllocStats, Allocator};
use crate::block::{BlockChain, BlockDepot, BlockPool, BlockStats};
use crate::config::{SmrConfig, Transport};
use crate::error::{Neutralized, SmrError};
use crate::neutralize;
use crate::pool::Pool;
use crate::reclaim::{Drained, Reclaimer, ReclaimerCounters, RecordSink};
use crate::record::{FaultKind, FaultLog, Record, RecordState};

struct Orphans<T> {
    limbo: Vec<*mut Record<T>>,
    pooled: Vec<*mut Record<T>>,
    leaked: Vec<*mut Record<T>>,
    /// Records "freed" in poison mode; kept mapped so late readers trip the
    /// state check instead of faulting.
    graveyard: Vec<*mut Record<T>>,
}

/// Record counts by lifecycle state, taken when no handle is alive.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub struct Census {
    pub allocated: u64,
    pub freed: u64,
    pub limbo: u64,
    pub pooled: u64,
    pub leaked: u64,
}

impl Census {
    /// Records that must still be owned by the data structure.
    pub fn outstanding(&self) -> i64 {
        self.allocated as i64
            - self.freed as i64
            - self.limbo as i64
            - self.pooled as i64
            - self.leaked as i64
    }
}

/// Per-handle statistics.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub struct HandleStats {
    pub reclaimer: ReclaimerCounters,
    pub limbo_high_water: usize,
    pub allocated_fresh: u64,
    pub allocated_reused: u64,
    pub retired: u64,
}

/// Binds an allocator, a reclaimer and a pool for records of type `T`.
///
/// Swapping a component means changing one type parameter; every call is
/// statically dispatched. Records must not need dropping: the manager reuses
/// and frees their memory without running destructors.
pub struct RecordManager<T, R, P, A>
where
    R: Reclaimer<T>,
    P: Pool<T>,
    A: Allocator<T>,
{
    n: usize,
    cfg: SmrConfig,
    reclaimer: R,
    pool: P,
    alloc: A,
    depot: Arc<BlockDepot<T>>,
    faults: FaultLog,
    claimed: Box<[AtomicBool]>,
    limbo: Box<[CachePadded<AtomicUsize>]>,
    limbo_total_hwm: CachePadded<AtomicUsize>,
    orphans: Mutex<Orphans<T>>,
}

unsafe impl<T: Send, R: Reclaimer<T>, P: Pool<T>, A: Allocator<T>> Send for RecordManager<T, R, P, A> {}
unsafe impl<T: Send + Sync, R: Reclaimer<T>, P: Pool<T>, A: Allocator<T>> Sync
    for RecordManager<T, R, P, A>
{
}

impl<T, R, P, A> RecordManager<T, R, P, A>
where
    R: Reclaimer<T>,
    P: Pool<T>,
    A: Allocator<T>,
{
    /// True only when the reclaimer can neutralize processes and run recovery.
    pub const SUPPORTS_CRASH_RECOVERY: bool = R::SUPPORTS_CRASH_RECOVERY;
    pub const USES_HAZARD_POINTERS: bool = R::USES_HAZARD_POINTERS;

    pub fn new(n: usize, cfg: SmrConfig) -> Result<Self, SmrError> {
        assert!(
            !std::mem::needs_drop::<T>(),
            "record types must not have destructors"
        );
        if n == 0 {
            return Err(SmrError::Config("need at least one process".into()));
        }
        cfg.validate()?;
        Ok(RecordManager {
            n,
            reclaimer: R::new(n, &cfg)?,
            pool: P::new(n, &cfg),
            alloc: A::new(n, &cfg)?,
            depot: Arc::new(BlockDepot::new(cfg.block_size, n)),
            faults: FaultLog::default(),
            claimed: (0..n).map(|_| AtomicBool::new(false)).collect(),
            limbo: (0..n).map(|_| CachePadded::new(AtomicUsize::new(0))).collect(),
            limbo_total_hwm: CachePadded::new(AtomicUsize::new(0)),
            orphans: Mutex::new(Orphans {
                limbo: Vec::new(),
                pooled: Vec::new(),
                leaked: Vec::new(),
                graveyard: Vec::new(),
            }),
            cfg,
        })
    }

    pub fn processes(&self) -> usize {
        self.n
    }

    pub fn config(&self) -> &SmrConfig {
        &self.cfg
    }

    pub fn reclaimer(&self) -> &R {
        &self.reclaimer
    }

    pub fn allocator(&self) -> &A {
        &self.alloc
    }

    pub fn pool(&self) -> &P {
        &self.pool
    }

    pub fn faults(&self) -> &FaultLog {
        &self.faults
    }

    pub fn names() -> (&'static str, &'static str, &'static str) {
        (R::NAME, P::NAME, A::NAME)
    }

    /// Claims process id `pid`.
    ///
    /// # Panics
    /// If `pid` is out of range or already has a live handle.
    pub fn handle(&self, pid: usize) -> Handle<'_, T, R, P, A> {
        assert!(pid < self.n, "pid {pid} out of range (n = {})", self.n);
        assert!(
            !self.claimed[pid].swap(true, Ordering::AcqRel),
            "pid {pid} already has a live handle"
        );
        let mut blocks = BlockPool::new(self.depot.clone(), pid, self.cfg.block_pool_cap);
        let rl = self.reclaimer.local(pid, &mut blocks);
        let pl = self.pool.local(pid, &mut blocks);
        Handle {
            mgr: self,
            pid,
            blocks,
            rl: ManuallyDrop::new(rl),
            pl: ManuallyDrop::new(pl),
            quarantine: self.cfg.poison.then(Quarantine::default),
            graveyard: Vec::new(),
            in_op: false,
            stats: HandleStats::default(),
        }
    }

    /// Records in limbo right now, as last published by each process, plus
    /// shared limbo. Safe to call while handles are running.
    pub fn limbo_snapshot(&self) -> usize {
        self.limbo.iter().map(|c| c.load(Ordering::Relaxed)).sum::<usize>()
            + self.reclaimer.shared_limbo_len()
    }

    /// Largest total limbo size seen at any retire since the last reset.
    /// Only maintained with `track_limbo_total`.
    pub fn limbo_total_high_water(&self) -> usize {
        self.limbo_total_hwm.load(Ordering::Relaxed)
    }

    pub fn reset_limbo_total_high_water(&self) {
        self.limbo_total_hwm.store(self.limbo_snapshot(), Ordering::Relaxed);
    }

    pub fn epoch(&self) -> u64 {
        self.reclaimer.epoch()
    }

    pub fn block_stats(&self) -> BlockStats {
        self.depot.stats()
    }

    pub fn alloc_stats(&self) -> AllocStats {
        self.alloc.stats()
    }

    /// Asks `pid` to neutralize itself at its next poll point (cooperative
    /// transport only).
    pub fn request_neutralization(&self, pid: usize) {
        self.reclaimer.request_neutralization(pid);
    }

    /// Counts records by state. Requires that no handle is alive.
    pub fn census(&mut self) -> Census {
        let orphans = self.orphans.get_mut().unwrap();
        let a = self.alloc.stats();
        Census {
            allocated: a.allocated_records,
            freed: a.freed_records + orphans.graveyard.len() as u64,
            limbo: (orphans.limbo.len() + self.reclaimer.shared_limbo_len()) as u64,
            pooled: (orphans.pooled.len() + self.pool.shared_len()) as u64,
            leaked: orphans.leaked.len() as u64,
        }
    }

    /// Returns a record the caller owns exclusively to the allocator,
    /// bypassing reclamation (used when tearing down a data structure).
    ///
    /// # Safety
    /// `r` came from this manager, is unreachable, and is in no bag or pool.
    pub unsafe fn free_unshared(&self, r: *mut Record<T>) {
        self.alloc.deallocate(0, r);
    }
}

impl<T, R, P, A> Drop for RecordManager<T, R, P, A>
where
    R: Reclaimer<T>,
    P: Pool<T>,
    A: Allocator<T>,
{
    fn drop(&mut self) {
        let mut blocks = BlockPool::new(self.depot.clone(), 0, self.cfg.block_pool_cap);
        let mut drained = Drained::default();
        self.reclaimer.drain_shared(&mut blocks, &mut drained);
        let mut pooled = Vec::new();
        self.pool.drain_shared(&mut blocks, &mut pooled);
        let orphans = self.orphans.get_mut().unwrap();
        let all = drained
            .limbo
            .iter()
            .chain(&pooled)
            .chain(&orphans.limbo)
            .chain(&orphans.pooled)
            .chain(&orphans.leaked)
            .chain(&orphans.graveyard);
        for &r in all {
            unsafe { self.alloc.deallocate(0, r) };
        }
    }
}

/// Records released in poison mode wait here for three reclamation batches
/// before they can be reused.
struct Quarantine<T> {
    ring: [Vec<*mut Record<T>>; 3],
    cur: usize,
}

impl<T> Default for Quarantine<T> {
    fn default() -> Self {
        Quarantine { ring: [Vec::new(), Vec::new(), Vec::new()], cur: 0 }
    }
}

impl<T> Quarantine<T> {
    fn len(&self) -> usize {
        self.ring.iter().map(Vec::len).sum()
    }
}

struct Sink<'a, T, P: Pool<T>, A: Allocator<T>> {
    pid: usize,
    pool: &'a P,
    pl: &'a mut P::Local,
    alloc: &'a A,
    blocks: &'a mut BlockPool<T>,
    quarantine: Option<&'a mut Quarantine<T>>,
    graveyard: &'a mut Vec<*mut Record<T>>,
    faults: &'a FaultLog,
}

impl<T, P: Pool<T>, A: Allocator<T>> Sink<'_, T, P, A> {
    /// Hands a record that is safe to reuse to the pool (or the allocator).
    #[inline]
    fn recycle(&mut self, r: *mut Record<T>) {
        if P::RECYCLES {
            self.pool.give(self.pl, self.blocks, r);
        } else {
            self.free(r);
        }
    }

    #[inline]
    fn free(&mut self, r: *mut Record<T>) {
        if self.quarantine.is_some() {
            let rec = unsafe { &*r };
            match rec.state() {
                Some(RecordState::Freed) => {
                    self.faults.record(self.pid, r, FaultKind::DoubleFree);
                    return;
                }
                _ => rec.set_state(RecordState::Freed),
            }
            self.graveyard.push(r);
        } else {
            unsafe { self.alloc.deallocate(self.pid, r) };
        }
    }

    /// Poison-mode release: mark, poison, and park in quarantine.
    fn quarantine_one(&mut self, r: *mut Record<T>) {
        let rec = unsafe { &*r };
        if let Err(state) = rec.transition(RecordState::Retired, RecordState::Pooled) {
            let _ = state;
            self.faults.record(self.pid, r, FaultKind::ReleaseNotRetired);
            return;
        }
        rec.poison();
        let q = self.quarantine.as_mut().unwrap();
        let cur = q.cur;
        q.ring[cur].push(r);
    }
}

impl<T, P: Pool<T>, A: Allocator<T>> RecordSink<T> for Sink<'_, T, P, A> {
    #[inline]
    fn blocks(&mut self) -> &mut BlockPool<T> {
        self.blocks
    }

    #[inline]
    fn release(&mut self, r: *mut Record<T>) {
        if self.quarantine.is_some() {
            self.quarantine_one(r);
        } else {
            self.recycle(r);
        }
    }

    #[inline]
    fn release_chain(&mut self, mut chain: BlockChain<T>) {
        if chain.is_empty() {
            return;
        }
        if self.quarantine.is_none() && P::RECYCLES {
            self.pool.give_chain(self.pl, self.blocks, chain);
            return;
        }
        while let Some(b) = chain.pop_block() {
            let recs = unsafe { (*b).slots_mut() };
            for r in recs.drain(..) {
                self.release(r);
            }
            self.blocks.release(b);
        }
    }

    #[inline]
    fn end_batch(&mut self) {
        let Some(q) = self.quarantine.as_mut() else {
            return;
        };
        q.cur = (q.cur + 1) % 3;
        let oldest = std::mem::take(&mut q.ring[q.cur]);
        for r in oldest {
            self.recycle(r);
        }
    }
}

/// A process's view of a [`RecordManager`]. One per process id; may be moved
/// to another thread between operations.
pub struct Handle<'m, T, R, P, A>
where
    R: Reclaimer<T>,
    P: Pool<T>,
    A: Allocator<T>,
{
    mgr: &'m RecordManager<T, R, P, A>,
    pid: usize,
    blocks: BlockPool<T>,
    rl: ManuallyDrop<R::Local>,
    pl: ManuallyDrop<P::Local>,
    quarantine: Option<Quarantine<T>>,
    graveyard: Vec<*mut Record<T>>,
    in_op: bool,
    stats: HandleStats,
}

unsafe impl<T: Send + Sync, R: Reclaimer<T>, P: Pool<T>, A: Allocator<T>> Send for Handle<'_, T, R, P, A> {}

macro_rules! sink {
    ($h:ident) => {
        Sink {
            pid: $h.pid,
            pool: &$h.mgr.pool,
            pl: &mut *$h.pl,
            alloc: &$h.mgr.alloc,
            blocks: &mut $h.blocks,
            quarantine: $h.quarantine.as_mut(),
            graveyard: &mut $h.graveyard,
            faults: &$h.mgr.faults,
        }
    };
}

impl<'m, T, R, P, A> Handle<'m, T, R, P, A>
where
    R: Reclaimer<T>,
    P: Pool<T>,
    A: Allocator<T>,
{
    #[inline]
    pub fn pid(&self) -> usize {
        self.pid
    }

    #[inline]
    pub fn manager(&self) -> &'m RecordManager<T, R, P, A> {
        self.mgr
    }

    #[inline]
    fn publish_limbo(&mut self) {
        let len = self.mgr.reclaimer.limbo_len(&self.rl);
        self.mgr.limbo[self.pid].store(len, Ordering::Relaxed);
        if len > self.stats.limbo_high_water {
            self.stats.limbo_high_water = len;
        }
        if self.mgr.cfg.track_limbo_total {
            let total = self.mgr.limbo_snapshot();
            self.mgr.limbo_total_hwm.fetch_max(total, Ordering::Relaxed);
        }
    }

    /// Returns a record initialized with `value`: reused from the pool if
    /// possible, otherwise freshly allocated. Call while quiescent.
    #[inline]
    pub fn allocate(&mut self, value: T) -> Result<*mut Record<T>, SmrError> {
        debug_assert!(!self.in_op, "allocate inside an operation body");
        if P::RECYCLES {
            if let Some(r) = self.mgr.pool.take(&mut self.pl, &mut self.blocks) {
                if self.quarantine.is_some() {
                    let rec = unsafe { &*r };
                    if rec.transition(RecordState::Pooled, RecordState::Live).is_err() {
                        self.mgr.faults.record(self.pid, r, FaultKind::CorruptPool);
                    }
                }
                unsafe { Record::reinit(r, value) };
                self.stats.allocated_reused += 1;
                return Ok(r);
            }
        }
        let r = self.mgr.alloc.allocate(self.pid)?;
        unsafe { Record::init(r, value) };
        self.stats.allocated_fresh += 1;
        Ok(r)
    }

    /// Gives back a record that was allocated but never made reachable.
    pub fn unallocate(&mut self, r: *mut Record<T>) {
        let rec = unsafe { &*r };
        if self.quarantine.is_some() {
            if rec.transition(RecordState::Live, RecordState::Retired).is_err() {
                self.mgr.faults.record(self.pid, r, FaultKind::DoubleRetire);
                return;
            }
            let mut sink = sink!(self);
            sink.quarantine_one(r);
            return;
        }
        let mut sink = sink!(self);
        sink.recycle(r);
    }

    /// Starts an operation. Returns true if the announcement changed.
    #[inline]
    pub fn leave_qstate(&mut self) -> bool {
        debug_assert!(!self.in_op, "leave_qstate called twice without enter_qstate");
        self.in_op = true;
        let mut sink = sink!(self);
        let changed = self.mgr.reclaimer.leave_qstate(&mut self.rl, &mut sink);
        if changed {
            self.publish_limbo();
        }
        changed
    }

    #[inline]
    pub fn enter_qstate(&mut self) {
        debug_assert!(self.in_op, "enter_qstate without leave_qstate");
        self.in_op = false;
        self.mgr.reclaimer.enter_qstate(&mut self.rl);
    }

    #[inline]
    pub fn is_quiescent(&self) -> bool {
        self.mgr.reclaimer.is_quiescent(&self.rl)
    }

    /// Hands a record that is no longer reachable to the reclaimer.
    #[inline]
    pub fn retire(&mut self, r: *mut Record<T>) {
        if self.quarantine.is_some() {
            let rec = unsafe { &*r };
            if rec.transition(RecordState::Live, RecordState::Retired).is_err() {
                self.mgr.faults.record(self.pid, r, FaultKind::DoubleRetire);
                return;
            }
        }
        self.stats.retired += 1;
        let mut sink = sink!(self);
        self.mgr.reclaimer.retire(&mut self.rl, r, &mut sink);
        self.publish_limbo();
    }

    /// Poison-mode access check. Always true when poison mode is off.
    #[inline]
    pub fn check(&self, r: *const Record<T>) -> bool {
        if self.quarantine.is_none() {
            return true;
        }
        let rec = unsafe { &*r };
        let ok = matches!(rec.state(), Some(RecordState::Live | RecordState::Retired))
            && rec.canary() == crate::record::LIVE_CANARY;
        if !ok {
            self.mgr.faults.record(self.pid, r, FaultKind::UseAfterRelease);
        }
        ok
    }

    #[inline]
    pub fn protect(&mut self, r: *mut Record<T>, validate: impl FnOnce() -> bool) -> bool {
        self.mgr.reclaimer.protect(&mut self.rl, r, validate)
    }

    #[inline]
    pub fn unprotect(&mut self, r: *mut Record<T>) {
        self.mgr.reclaimer.unprotect(&mut self.rl, r)
    }

    #[inline]
    pub fn is_protected(&self, r: *mut Record<T>) -> bool {
        self.mgr.reclaimer.is_protected(&self.rl, r)
    }

    #[inline]
    pub fn rprotect(&mut self, r: *mut Record<T>) {
        self.mgr.reclaimer.rprotect(&mut self.rl, r)
    }

    #[inline]
    pub fn runprotect_all(&mut self) {
        self.mgr.reclaimer.runprotect_all(&mut self.rl)
    }

    #[inline]
    pub fn is_rprotected(&self, r: *mut Record<T>) -> bool {
        self.mgr.reclaimer.is_rprotected(&self.rl, r)
    }

    /// Poll point for the cooperative transport.
    #[inline]
    pub fn poll(&mut self) -> Result<(), Neutralized> {
        let out = self.mgr.reclaimer.poll(&mut self.rl);
        if out.is_err() {
            self.in_op = false;
        }
        out
    }

    /// Runs one operation body between `leave_qstate` and `enter_qstate`.
    ///
    /// Returns `Err(Neutralized)` if the process was neutralized, in which
    /// case it is already quiescent. Under the signal transport the body can
    /// be abandoned at any instruction, so nothing it creates may need
    /// dropping.
    #[inline]
    pub fn run_body<O>(
        &mut self,
        mut body: impl FnMut(&mut Self) -> Result<O, Neutralized>,
    ) -> Result<O, Neutralized> {
        let ctx = if R::SUPPORTS_CRASH_RECOVERY {
            self.mgr.reclaimer.signal_context(&self.rl)
        } else {
            None
        };
        let Some(ctx) = ctx else {
            self.leave_qstate();
            let out = body(self);
            if out.is_ok() {
                self.enter_qstate();
            }
            return out;
        };
        let mut out: Option<Result<O, Neutralized>> = None;
        let this: *mut Self = self;
        let jumped = neutralize::run_guarded(ctx, &mut || {
            let h = unsafe { &mut *this };
            h.leave_qstate();
            let r = body(h);
            if r.is_ok() {
                h.enter_qstate();
            }
            out = Some(r);
        });
        if jumped {
            self.in_op = false;
            self.mgr.reclaimer.after_neutralized(&mut self.rl);
            return Err(Neutralized);
        }
        out.expect("body completed without a jump")
    }

    /// Blocks inside an operation for `duration` (or until `stop` is set),
    /// like a process that was descheduled mid-operation. Under the signal
    /// transport, a neutralization sent meanwhile takes effect when the stall
    /// ends.
    pub fn stall(&mut self, duration: Duration, stop: &AtomicU8) {
        if R::SUPPORTS_CRASH_RECOVERY && self.mgr.cfg.transport == Transport::Signal && self.in_op {
            neutralize::stall_masked(duration, stop);
            return;
        }
        Self::sleep(duration, stop);
    }

    fn sleep(duration: Duration, stop: &AtomicU8) {
        let deadline = Instant::now() + duration;
        while stop.load(Ordering::Acquire) == 0 {
            let now = Instant::now();
            if now >= deadline {
                break;
            }
            std::thread::sleep((deadline - now).min(Duration::from_millis(1)));
        }
    }

    /// Test hook: neutralize at the `polls`-th poll point from now.
    pub fn neutralize_after_polls(&mut self, polls: Option<u64>) {
        self.mgr.reclaimer.neutralize_after_polls(&mut self.rl, polls);
    }

    pub fn limbo_len(&self) -> usize {
        self.mgr.reclaimer.limbo_len(&self.rl)
    }

    /// Records held in this process's pool and quarantine.
    pub fn pooled_len(&self) -> usize {
        self.mgr.pool.local_len(&self.pl) + self.quarantine.as_ref().map_or(0, Quarantine::len)
    }

    pub fn stats(&self) -> HandleStats {
        HandleStats { reclaimer: self.mgr.reclaimer.counters(&self.rl), ..self.stats }
    }

    /// Reclaimer-specific local state, for tests and instrumentation.
    pub fn reclaimer_local(&self) -> &R::Local {
        &self.rl
    }
}

impl<T, R, P, A> Drop for Handle<'_, T, R, P, A>
where
    R: Reclaimer<T>,
    P: Pool<T>,
    A: Allocator<T>,
{
    fn drop(&mut self) {
        if self.in_op {
            self.enter_qstate();
        }
        self.runprotect_all();
        let rl = unsafe { ManuallyDrop::take(&mut self.rl) };
        let pl = unsafe { ManuallyDrop::take(&mut self.pl) };
        let mut drained = Drained::default();
        self.mgr.reclaimer.drain_local(rl, &mut self.blocks, &mut drained);
        let mut pooled = Vec::new();
        self.mgr.pool.drain_local(pl, &mut self.blocks, &mut pooled);
        if let Some(q) = self.quarantine.take() {
            for mut v in q.ring {
                pooled.append(&mut v);
            }
        }
        {
            let mut o = self.mgr.orphans.lock().unwrap_or_else(|e| e.into_inner());
            o.limbo.append(&mut drained.limbo);
            o.leaked.append(&mut drained.leaked);
            o.pooled.append(&mut pooled);
            o.graveyard.append(&mut self.graveyard);
        }
        self.mgr.limbo[self.pid].store(0, Ordering::Relaxed);
        self.mgr.claimed[self.pid].store(false, Ordering::Release);
    }
}
