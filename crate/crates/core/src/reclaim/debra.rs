use std::marker::PhantomData;

use super::{Drained, Reclaimer, ReclaimerCounters, RecordSink};
use crate::block::{BlockBag, BlockPool};
use crate::config::SmrConfig;
use crate::epoch::{
    is_equal_epoch, pack_announcement, try_advance_epoch, AdvanceOutcome, AnnouncementTable,
    EpochParams, GlobalEpoch, ScanCursor,
};
use crate::error::SmrError;
use crate::record::Record;

/// Distributed epoch-based reclamation.
///
/// Each process keeps three limbo bags. When it notices the epoch has changed
/// it rotates them and hands every full block of the oldest bag to the pool.
/// The epoch check is incremental: one other process's announcement is read
/// per `leave_qstate`.
pub struct Debra<T> {
    epoch: GlobalEpoch,
    announce: AnnouncementTable,
    params: EpochParams,
    _marker: PhantomData<fn() -> T>,
}

pub struct DebraLocal<T> {
    pid: usize,
    bags: [BlockBag<T>; 3],
    index: usize,
    cursor: ScanCursor,
    /// Epoch bits of our announcement; only we write it.
    announced: u64,
    counters: ReclaimerCounters,
}

impl<T> DebraLocal<T> {
    pub fn cursor(&self) -> ScanCursor {
        self.cursor
    }

    /// Index of the current limbo bag.
    pub fn current_index(&self) -> usize {
        self.index
    }

    pub fn bag_len(&self, i: usize) -> usize {
        self.bags[i].len()
    }
}

impl<T> Debra<T> {
    /// Announcement word of process `pid`.
    pub fn announcement(&self, pid: usize) -> u64 {
        self.announce.load(pid).0
    }

    fn rotate_and_reclaim<S: RecordSink<T>>(&self, l: &mut DebraLocal<T>, sink: &mut S) {
        l.index = (l.index + 1) % 3;
        let chain = l.bags[l.index].take_full_blocks();
        l.counters.rotations += 1;
        l.counters.released_records += (chain.blocks() * sink.blocks().block_size()) as u64;
        sink.release_chain(chain);
        sink.end_batch();
    }
}

impl<T> Reclaimer<T> for Debra<T> {
    type Local = DebraLocal<T>;
    const NAME: &'static str = "debra";

    fn new(n: usize, cfg: &SmrConfig) -> Result<Self, SmrError> {
        Ok(Debra {
            epoch: GlobalEpoch::new(),
            announce: AnnouncementTable::new(n),
            params: EpochParams::new(n, cfg.check_thresh, cfg.incr_thresh),
            _marker: PhantomData,
        })
    }

    fn local(&self, pid: usize, blocks: &mut BlockPool<T>) -> DebraLocal<T> {
        DebraLocal {
            pid,
            bags: [BlockBag::new(blocks), BlockBag::new(blocks), BlockBag::new(blocks)],
            index: 0,
            cursor: ScanCursor::default(),
            announced: self.announce.load(pid).epoch(),
            counters: ReclaimerCounters::default(),
        }
    }

    #[inline]
    fn leave_qstate<S: RecordSink<T>>(&self, l: &mut DebraLocal<T>, sink: &mut S) -> bool {
        l.counters.leave_calls += 1;
        let read_epoch = self.epoch.load();
        let changed = !is_equal_epoch(read_epoch, pack_announcement(l.announced, false));
        if changed {
            l.cursor.reset();
            self.rotate_and_reclaim(l, sink);
        }
        let mut reads = 0;
        let outcome = try_advance_epoch(
            &mut l.cursor,
            read_epoch,
            &self.announce,
            &self.epoch,
            &self.params,
            &mut reads,
            |_| false,
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
    fn enter_qstate(&self, l: &mut DebraLocal<T>) {
        self.announce.publish(l.pid, pack_announcement(l.announced, true));
    }

    #[inline]
    fn is_quiescent(&self, l: &DebraLocal<T>) -> bool {
        self.announce.load(l.pid).is_quiescent()
    }

    #[inline]
    fn retire<S: RecordSink<T>>(&self, l: &mut DebraLocal<T>, r: *mut Record<T>, sink: &mut S) {
        l.counters.retire_calls += 1;
        if l.bags[l.index].add(r, sink.blocks()) {
            l.counters.retire_block_ops += 1;
        }
    }

    fn limbo_len(&self, l: &DebraLocal<T>) -> usize {
        l.bags.iter().map(BlockBag::len).sum()
    }

    fn counters(&self, l: &DebraLocal<T>) -> ReclaimerCounters {
        l.counters
    }

    fn epoch(&self) -> u64 {
        self.epoch.load()
    }

    fn drain_local(&self, l: DebraLocal<T>, blocks: &mut BlockPool<T>, out: &mut Drained<T>) {
        for mut bag in l.bags {
            bag.drain_into(blocks, &mut out.limbo);
            bag.dispose(blocks);
        }
    }
}
