use std::sync::atomic::{AtomicUsize, Ordering};

use crossbeam_utils::CachePadded;

use super::{Drained, Reclaimer, ReclaimerCounters, RecordSink};
use crate::block::{Block, BlockChain, BlockPool, SharedBag};
use crate::config::SmrConfig;
use crate::epoch::{pack_announcement, AnnouncementTable, GlobalEpoch, EPOCH_STEP};
use crate::error::SmrError;
use crate::record::Record;

/// Classic epoch-based reclamation, kept as a comparison baseline.
///
/// Every operation announces the epoch and scans all announcements. Retired
/// records are tagged with the generation (epoch / 2) current when they were
/// retired and, a block at a time, pushed onto one of three global limbo bags.
/// The process whose compare-and-set advances the epoch drains the bag that
/// is two generations old.
pub struct ClassicEbr<T> {
    epoch: GlobalEpoch,
    announce: AnnouncementTable,
    bags: [SharedBag<T>; 3],
    limbo_blocks: CachePadded<AtomicUsize>,
    block_size: usize,
}

pub struct EbrLocal<T> {
    pid: usize,
    block: *mut Block<T>,
    announced: u64,
    counters: ReclaimerCounters,
}

unsafe impl<T> Send for EbrLocal<T> {}

impl<T> ClassicEbr<T> {
    fn drain<S: RecordSink<T>>(&self, new_epoch: u64, l: &mut EbrLocal<T>, sink: &mut S) {
        let gen = new_epoch / EPOCH_STEP;
        let bag = &self.bags[((gen + 1) % 3) as usize];
        let mut keep = BlockChain::empty();
        while let Some(b) = bag.pop() {
            self.limbo_blocks.fetch_sub(1, Ordering::Relaxed);
            let now = self.epoch.load() / EPOCH_STEP;
            if unsafe { (*b).tag } + 2 <= now {
                l.counters.released_records += unsafe { (*b).len() } as u64;
                sink.release_chain(BlockChain::single(b));
            } else {
                keep.append(BlockChain::single(b));
            }
        }
        if !keep.is_empty() {
            self.limbo_blocks.fetch_add(keep.blocks(), Ordering::Relaxed);
            bag.push_chain(keep);
        }
        sink.end_batch();
    }
}

impl<T> Reclaimer<T> for ClassicEbr<T> {
    type Local = EbrLocal<T>;
    const NAME: &'static str = "ebr";

    fn new(n: usize, cfg: &SmrConfig) -> Result<Self, SmrError> {
        Ok(ClassicEbr {
            epoch: GlobalEpoch::new(),
            announce: AnnouncementTable::new(n),
            bags: [SharedBag::new(), SharedBag::new(), SharedBag::new()],
            limbo_blocks: CachePadded::new(AtomicUsize::new(0)),
            block_size: cfg.block_size,
        })
    }

    fn local(&self, pid: usize, blocks: &mut BlockPool<T>) -> EbrLocal<T> {
        EbrLocal {
            pid,
            block: blocks.acquire(),
            announced: 0,
            counters: ReclaimerCounters::default(),
        }
    }

    fn leave_qstate<S: RecordSink<T>>(&self, l: &mut EbrLocal<T>, sink: &mut S) -> bool {
        l.counters.leave_calls += 1;
        let e = self.epoch.load();
        let changed = e != l.announced;
        l.announced = e;
        self.announce.publish(l.pid, pack_announcement(e, false));
        let n = self.announce.len();
        let mut all_current = true;
        for p in 0..n {
            let a = self.announce.load(p);
            l.counters.foreign_reads += 1;
            if !a.is_quiescent() && a.epoch() != e {
                all_current = false;
                break;
            }
        }
        if all_current && self.epoch.try_advance(e) {
            l.counters.epoch_advances += 1;
            self.drain(e + EPOCH_STEP, l, sink);
        }
        changed
    }

    fn enter_qstate(&self, l: &mut EbrLocal<T>) {
        self.announce.publish(l.pid, pack_announcement(l.announced, true));
    }

    fn is_quiescent(&self, l: &EbrLocal<T>) -> bool {
        self.announce.load(l.pid).is_quiescent()
    }

    fn retire<S: RecordSink<T>>(&self, l: &mut EbrLocal<T>, r: *mut Record<T>, sink: &mut S) {
        l.counters.retire_calls += 1;
        let gen = self.epoch.load() / EPOCH_STEP;
        let b = unsafe { &mut *l.block };
        // Generations only grow, so the block tag is that of its newest record.
        b.tag = gen;
        if b.push(r) < self.block_size {
            return;
        }
        self.bags[(gen % 3) as usize].push(l.block);
        self.limbo_blocks.fetch_add(1, Ordering::Relaxed);
        l.block = sink.blocks().acquire();
        l.counters.retire_block_ops += 1;
    }

    fn limbo_len(&self, l: &EbrLocal<T>) -> usize {
        unsafe { (*l.block).len() }
    }

    fn shared_limbo_len(&self) -> usize {
        self.limbo_blocks.load(Ordering::Relaxed) * self.block_size
    }

    fn counters(&self, l: &EbrLocal<T>) -> ReclaimerCounters {
        l.counters
    }

    fn epoch(&self) -> u64 {
        self.epoch.load()
    }

    fn drain_local(&self, l: EbrLocal<T>, blocks: &mut BlockPool<T>, out: &mut Drained<T>) {
        unsafe { out.limbo.append((*l.block).slots_mut()) };
        blocks.release(l.block);
    }

    fn drain_shared(&self, blocks: &mut BlockPool<T>, out: &mut Drained<T>) {
        for bag in &self.bags {
            while let Some(b) = bag.pop() {
                self.limbo_blocks.fetch_sub(1, Ordering::Relaxed);
                BlockChain::single(b).drain_into(blocks, &mut out.limbo);
            }
        }
    }
}
