use std::marker::PhantomData;

use super::{Drained, Reclaimer, ReclaimerCounters, RecordSink};
use crate::block::{BlockBag, BlockPool};
use crate::config::SmrConfig;
use crate::error::SmrError;
use crate::record::Record;

/// Never reclaims. Retired records are kept aside only so they can be
/// accounted for and released when the manager is dropped.
pub struct NoReclaim<T> {
    _marker: PhantomData<fn() -> T>,
}

pub struct NoReclaimLocal<T> {
    leaked: BlockBag<T>,
    quiescent: bool,
    counters: ReclaimerCounters,
}

impl<T> Reclaimer<T> for NoReclaim<T> {
    type Local = NoReclaimLocal<T>;
    const NAME: &'static str = "none";

    fn new(_n: usize, _cfg: &SmrConfig) -> Result<Self, SmrError> {
        Ok(NoReclaim { _marker: PhantomData })
    }

    fn local(&self, _pid: usize, blocks: &mut BlockPool<T>) -> NoReclaimLocal<T> {
        NoReclaimLocal {
            leaked: BlockBag::new(blocks),
            quiescent: true,
            counters: ReclaimerCounters::default(),
        }
    }

    #[inline]
    fn leave_qstate<S: RecordSink<T>>(&self, l: &mut NoReclaimLocal<T>, _sink: &mut S) -> bool {
        l.quiescent = false;
        false
    }

    #[inline]
    fn enter_qstate(&self, l: &mut NoReclaimLocal<T>) {
        l.quiescent = true;
    }

    #[inline]
    fn is_quiescent(&self, l: &NoReclaimLocal<T>) -> bool {
        l.quiescent
    }

    #[inline]
    fn retire<S: RecordSink<T>>(&self, l: &mut NoReclaimLocal<T>, r: *mut Record<T>, sink: &mut S) {
        l.counters.retire_calls += 1;
        if l.leaked.add(r, sink.blocks()) {
            l.counters.retire_block_ops += 1;
        }
    }

    fn limbo_len(&self, _l: &NoReclaimLocal<T>) -> usize {
        0
    }

    fn counters(&self, l: &NoReclaimLocal<T>) -> ReclaimerCounters {
        l.counters
    }

    fn drain_local(&self, mut l: NoReclaimLocal<T>, blocks: &mut BlockPool<T>, out: &mut Drained<T>) {
        l.leaked.drain_into(blocks, &mut out.leaked);
        l.leaked.dispose(blocks);
    }
}
