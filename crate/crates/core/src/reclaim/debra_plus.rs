use std::collections::HashSet;
use std::marker::PhantomData;
use std::sync::atomic::{AtomicPtr, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

use crossbeam_utils::CachePadded;

use super::{Drained, Reclaimer, ReclaimerCounters, RecordSink};
use crate::block::{BlockBag, BlockPool};
use crate::config::{SmrConfig, Transport};
use crate::epoch::{
    pack_announcement, try_advance_epoch, AdvanceOutcome, AnnouncementTable, EpochParams,
    GlobalEpoch, ScanCursor,
};
use crate::error::{Neutralized, SmrError};
use crate::neutralize::{install_handler, OwnedCtx, SignalContext, ThreadSlot};
use crate::record::Record;

/// Recovery announcements of one process: a bounded stack written by its
/// owner and read by every scanner.
struct RStack {
    len: AtomicUsize,
    slots: Box<[AtomicPtr<()>]>,
}

#[derive(Default)]
struct CoopSlot {
    requested: AtomicU64,
    acked: AtomicU64,
}

/// DEBRA with neutralization.
///
/// A process whose current limbo bag has grown past the suspect threshold
/// neutralizes any process that is holding back the epoch. The victim becomes
/// quiescent and runs recovery code that touches only the records it
/// announced with `rprotect`, so limbo bags stay bounded even when a process
/// stops taking steps in the middle of an operation.
pub struct DebraPlus<T> {
    epoch: GlobalEpoch,
    announce: AnnouncementTable,
    params: EpochParams,
    transport: Transport,
    suspect_blocks: usize,
    scan_blocks: usize,
    rprotected: Box<[CachePadded<RStack>]>,
    threads: Box<[Arc<ThreadSlot>]>,
    coop: Box<[CachePadded<CoopSlot>]>,
    _marker: PhantomData<fn() -> T>,
}

pub struct DebraPlusLocal<T> {
    pid: usize,
    bags: [BlockBag<T>; 3],
    index: usize,
    cursor: ScanCursor,
    announced: u64,
    counters: ReclaimerCounters,
    rlen: usize,
    /// Cooperative requests sent and not yet acknowledged, per process.
    pending: Box<[u64]>,
    scratch: HashSet<usize>,
    ctx: Option<OwnedCtx>,
    bound: Option<libc::pthread_t>,
    countdown: Option<u64>,
}

impl<T> DebraPlusLocal<T> {
    pub fn current_index(&self) -> usize {
        self.index
    }

    pub fn bag_len(&self, i: usize) -> usize {
        self.bags[i].len()
    }

    pub fn bag_blocks(&self, i: usize) -> usize {
        self.bags[i].size_in_blocks()
    }
}

impl<T> DebraPlus<T> {
    pub fn announcement(&self, pid: usize) -> u64 {
        self.announce.load(pid).0
    }

    pub fn suspect_threshold_blocks(&self) -> usize {
        self.suspect_blocks
    }

    pub fn scan_threshold_blocks(&self) -> usize {
        self.scan_blocks
    }

    /// Delivers a neutralization to `other` if our current bag is large
    /// enough. True means `other` may be treated as quiescent for this scan.
    fn suspect_neutralized(
        &self,
        other: usize,
        pending: &mut [u64],
        counters: &mut ReclaimerCounters,
    ) -> bool {
        match self.transport {
            Transport::Signal => {
                let ok = self.threads[other].signal();
                if ok {
                    counters.neutralizations_sent += 1;
                }
                ok
            }
            Transport::Cooperative => {
                let slot = &self.coop[other];
                if pending[other] != 0 {
                    if slot.acked.load(Ordering::SeqCst) >= pending[other] {
                        pending[other] = 0;
                        return true;
                    }
                    return false;
                }
                pending[other] = slot.requested.fetch_add(1, Ordering::SeqCst) + 1;
                counters.neutralizations_sent += 1;
                false
            }
        }
    }

    fn collect_rprotected(&self, set: &mut HashSet<usize>) {
        set.clear();
        for stack in self.rprotected.iter() {
            let len = stack.len.load(Ordering::Acquire).min(stack.slots.len());
            for slot in &stack.slots[..len] {
                let p = slot.load(Ordering::Acquire);
                if !p.is_null() {
                    set.insert(p as usize);
                }
            }
        }
    }

    fn rotate_and_reclaim<S: RecordSink<T>>(&self, l: &mut DebraPlusLocal<T>, sink: &mut S) {
        l.index = (l.index + 1) % 3;
        l.counters.rotations += 1;
        let bag = &mut l.bags[l.index];
        if bag.size_in_blocks() < self.scan_blocks {
            return;
        }
        l.counters.scans += 1;
        self.collect_rprotected(&mut l.scratch);
        let chain = if l.scratch.is_empty() {
            bag.take_full_blocks()
        } else {
            let set = &l.scratch;
            bag.partition_front(|r| set.contains(&(r as usize)))
        };
        l.counters.released_records += (chain.blocks() * sink.blocks().block_size()) as u64;
        sink.release_chain(chain);
        sink.end_batch();
    }

    fn ensure_bound(&self, l: &mut DebraPlusLocal<T>) {
        let me = unsafe { libc::pthread_self() };
        if l.bound != Some(me) {
            l.bound = Some(self.threads[l.pid].bind_current());
        }
    }

    fn neutralize_self(&self, l: &mut DebraPlusLocal<T>) -> Result<(), Neutralized> {
        if self.announce.load(l.pid).is_quiescent() {
            return Ok(());
        }
        self.announce.set_quiescent(l.pid);
        l.counters.neutralized += 1;
        Err(Neutralized)
    }
}

impl<T> Reclaimer<T> for DebraPlus<T> {
    type Local = DebraPlusLocal<T>;
    const NAME: &'static str = "debra+";
    const SUPPORTS_CRASH_RECOVERY: bool = true;

    fn new(n: usize, cfg: &SmrConfig) -> Result<Self, SmrError> {
        cfg.validate()?;
        if cfg.transport == Transport::Signal {
            install_handler()?;
        }
        let k = cfg.rprotect_capacity;
        Ok(DebraPlus {
            epoch: GlobalEpoch::new(),
            announce: AnnouncementTable::new(n),
            params: EpochParams::new(n, cfg.check_thresh, cfg.incr_thresh),
            transport: cfg.transport,
            suspect_blocks: cfg.suspect_threshold_blocks,
            scan_blocks: cfg.scan_threshold_blocks(n),
            rprotected: (0..n)
                .map(|_| {
                    CachePadded::new(RStack {
                        len: AtomicUsize::new(0),
                        slots: (0..k).map(|_| AtomicPtr::new(std::ptr::null_mut())).collect(),
                    })
                })
                .collect(),
            threads: (0..n).map(|_| Arc::new(ThreadSlot::default())).collect(),
            coop: (0..n).map(|_| CachePadded::new(CoopSlot::default())).collect(),
            _marker: PhantomData,
        })
    }

    fn local(&self, pid: usize, blocks: &mut BlockPool<T>) -> DebraPlusLocal<T> {
        let ctx = match self.transport {
            Transport::Signal => Some(OwnedCtx::new(self.announce.entry_ptr(pid))),
            Transport::Cooperative => None,
        };
        DebraPlusLocal {
            pid,
            bags: [BlockBag::new(blocks), BlockBag::new(blocks), BlockBag::new(blocks)],
            index: 0,
            cursor: ScanCursor::default(),
            announced: self.announce.load(pid).epoch(),
            counters: ReclaimerCounters::default(),
            rlen: 0,
            pending: vec![0; self.params.n].into_boxed_slice(),
            scratch: HashSet::new(),
            ctx,
            bound: None,
            countdown: None,
        }
    }

    #[inline]
    fn leave_qstate<S: RecordSink<T>>(&self, l: &mut DebraPlusLocal<T>, sink: &mut S) -> bool {
        l.counters.leave_calls += 1;
        match self.transport {
            Transport::Signal => self.ensure_bound(l),
            Transport::Cooperative => {
                // Requests that arrived while we were quiescent are already satisfied.
                let slot = &self.coop[l.pid];
                slot.acked.store(slot.requested.load(Ordering::SeqCst), Ordering::SeqCst);
            }
        }
        let read_epoch = self.epoch.load();
        let changed = read_epoch != l.announced;
        if changed {
            l.cursor.reset();
            self.rotate_and_reclaim(l, sink);
        }
        let may_suspect = l.bags[l.index].size_in_blocks() >= self.suspect_blocks;
        let mut reads = 0;
        let pending = &mut l.pending;
        let counters = &mut l.counters;
        let outcome = try_advance_epoch(
            &mut l.cursor,
            read_epoch,
            &self.announce,
            &self.epoch,
            &self.params,
            &mut reads,
            |other| may_suspect && self.suspect_neutralized(other, pending, counters),
        );
        l.counters.foreign_reads += reads;
        if outcome == AdvanceOutcome::Advanced {
            l.counters.epoch_advances += 1;
        }
        l.announced = read_epoch;
        self.announce.publish(l.pid, pack_announcement(read_epoch, false));
        changed
    }

    #[inline]
    fn enter_qstate(&self, l: &mut DebraPlusLocal<T>) {
        self.announce.publish(l.pid, pack_announcement(l.announced, true));
    }

    #[inline]
    fn is_quiescent(&self, l: &DebraPlusLocal<T>) -> bool {
        self.announce.load(l.pid).is_quiescent()
    }

    #[inline]
    fn retire<S: RecordSink<T>>(&self, l: &mut DebraPlusLocal<T>, r: *mut Record<T>, sink: &mut S) {
        l.counters.retire_calls += 1;
        if l.bags[l.index].add(r, sink.blocks()) {
            l.counters.retire_block_ops += 1;
        }
    }

    #[inline]
    fn rprotect(&self, l: &mut DebraPlusLocal<T>, r: *mut Record<T>) {
        let stack = &self.rprotected[l.pid];
        if l.rlen == stack.slots.len() {
            if self.is_rprotected(l, r) {
                return;
            }
            panic!(
                "recovery-protect capacity {} exceeded; raise --rprotect-capacity",
                stack.slots.len()
            );
        }
        stack.slots[l.rlen].store(r.cast(), Ordering::Release);
        l.rlen += 1;
        // Sequentially consistent so the announcement is visible to any scanner
        // before our next access to a shared record.
        stack.len.store(l.rlen, Ordering::SeqCst);
    }

    #[inline]
    fn runprotect_all(&self, l: &mut DebraPlusLocal<T>) {
        l.rlen = 0;
        self.rprotected[l.pid].len.store(0, Ordering::Release);
    }

    #[inline]
    fn is_rprotected(&self, l: &DebraPlusLocal<T>, r: *mut Record<T>) -> bool {
        let stack = &self.rprotected[l.pid];
        // A neutralization can land between the slot store and the length
        // store, so trust only the published length.
        let len = stack.len.load(Ordering::Relaxed);
        stack.slots[..len].iter().any(|s| s.load(Ordering::Relaxed) == r.cast())
    }

    #[inline]
    fn poll(&self, l: &mut DebraPlusLocal<T>) -> Result<(), Neutralized> {
        if self.transport != Transport::Cooperative {
            return Ok(());
        }
        if let Some(c) = l.countdown {
            if c == 0 {
                l.countdown = None;
                return self.neutralize_self(l);
            }
            l.countdown = Some(c - 1);
        }
        let slot = &self.coop[l.pid];
        let req = slot.requested.load(Ordering::Acquire);
        if req != slot.acked.load(Ordering::Relaxed) {
            let out = self.neutralize_self(l);
            // Acknowledge only after the quiescent bit is visible.
            slot.acked.store(req, Ordering::SeqCst);
            return out;
        }
        Ok(())
    }

    fn signal_context(&self, l: &DebraPlusLocal<T>) -> Option<SignalContext> {
        l.ctx.as_ref().map(OwnedCtx::handle)
    }

    fn after_neutralized(&self, l: &mut DebraPlusLocal<T>) {
        l.counters.neutralized += 1;
    }

    fn request_neutralization(&self, pid: usize) {
        self.coop[pid].requested.fetch_add(1, Ordering::SeqCst);
    }

    fn neutralize_after_polls(&self, l: &mut DebraPlusLocal<T>, polls: Option<u64>) {
        l.countdown = polls;
    }

    fn limbo_len(&self, l: &DebraPlusLocal<T>) -> usize {
        l.bags.iter().map(BlockBag::len).sum()
    }

    fn counters(&self, l: &DebraPlusLocal<T>) -> ReclaimerCounters {
        l.counters
    }

    fn epoch(&self) -> u64 {
        self.epoch.load()
    }

    fn drain_local(&self, l: DebraPlusLocal<T>, blocks: &mut BlockPool<T>, out: &mut Drained<T>) {
        self.rprotected[l.pid].len.store(0, Ordering::Release);
        self.threads[l.pid].unbind();
        for mut bag in l.bags {
            bag.drain_into(blocks, &mut out.limbo);
            bag.dispose(blocks);
        }
    }
}
