use std::collections::HashSet;
use std::marker::PhantomData;
use std::ptr;
use std::sync::atomic::{fence, AtomicPtr, Ordering};

use crossbeam_utils::CachePadded;

use super::{Drained, Reclaimer, ReclaimerCounters, RecordSink};
use crate::block::BlockPool;
use crate::config::SmrConfig;
use crate::error::SmrError;
use crate::record::Record;

/// Hazard pointers with amortized scanning.
///
/// A process announces each record it is about to read in one of its `k`
/// slots, fences, and then re-validates that the record is still reachable.
/// Retired records are buffered; once the buffer reaches the threshold, all
/// `n·k` slots are hashed and every buffered record not among them is
/// released.
pub struct HazardPointers<T> {
    slots: Box<[CachePadded<Box<[AtomicPtr<()>]>>]>,
    threshold: usize,
    _marker: PhantomData<fn() -> T>,
}

pub struct HpLocal<T> {
    pid: usize,
    /// Mirror of our own slots, so lookups never touch shared memory.
    mine: Box<[*mut Record<T>]>,
    buffer: Vec<*mut Record<T>>,
    scratch: HashSet<usize>,
    quiescent: bool,
    counters: ReclaimerCounters,
}

unsafe impl<T> Send for HpLocal<T> {}

impl<T> HazardPointers<T> {
    pub fn threshold(&self) -> usize {
        self.threshold
    }

    /// Releases every buffered record that no slot announces. Returns the
    /// number released.
    pub fn scan<S: RecordSink<T>>(&self, l: &mut HpLocal<T>, sink: &mut S) -> usize {
        l.counters.scans += 1;
        fence(Ordering::SeqCst);
        l.scratch.clear();
        for proc_slots in self.slots.iter() {
            for s in proc_slots.iter() {
                let p = s.load(Ordering::Acquire);
                if !p.is_null() {
                    l.scratch.insert(p as usize);
                }
            }
        }
        let before = l.buffer.len();
        let mut i = 0;
        while i < l.buffer.len() {
            let r = l.buffer[i];
            if l.scratch.contains(&(r as usize)) {
                i += 1;
            } else {
                l.buffer.swap_remove(i);
                sink.release(r);
            }
        }
        let released = before - l.buffer.len();
        l.counters.released_records += released as u64;
        sink.end_batch();
        released
    }

    fn clear_all(&self, l: &mut HpLocal<T>) {
        for (i, m) in l.mine.iter_mut().enumerate() {
            if !m.is_null() {
                self.slots[l.pid][i].store(ptr::null_mut(), Ordering::Release);
                *m = ptr::null_mut();
            }
        }
    }
}

impl<T> Reclaimer<T> for HazardPointers<T> {
    type Local = HpLocal<T>;
    const NAME: &'static str = "hp";
    const USES_HAZARD_POINTERS: bool = true;

    fn new(n: usize, cfg: &SmrConfig) -> Result<Self, SmrError> {
        cfg.validate()?;
        let k = cfg.hp_k;
        Ok(HazardPointers {
            slots: (0..n)
                .map(|_| CachePadded::new((0..k).map(|_| AtomicPtr::new(ptr::null_mut())).collect()))
                .collect(),
            threshold: cfg.hp_threshold(n),
            _marker: PhantomData,
        })
    }

    fn local(&self, pid: usize, _blocks: &mut BlockPool<T>) -> HpLocal<T> {
        let k = self.slots[pid].len();
        HpLocal {
            pid,
            mine: vec![ptr::null_mut(); k].into_boxed_slice(),
            buffer: Vec::with_capacity(self.threshold),
            scratch: HashSet::new(),
            quiescent: true,
            counters: ReclaimerCounters::default(),
        }
    }

    fn leave_qstate<S: RecordSink<T>>(&self, l: &mut HpLocal<T>, _sink: &mut S) -> bool {
        l.counters.leave_calls += 1;
        l.quiescent = false;
        false
    }

    fn enter_qstate(&self, l: &mut HpLocal<T>) {
        self.clear_all(l);
        l.quiescent = true;
    }

    fn is_quiescent(&self, l: &HpLocal<T>) -> bool {
        l.quiescent
    }

    fn retire<S: RecordSink<T>>(&self, l: &mut HpLocal<T>, r: *mut Record<T>, sink: &mut S) {
        l.counters.retire_calls += 1;
        l.buffer.push(r);
        if l.buffer.len() >= self.threshold {
            self.scan(l, sink);
        }
    }

    #[inline]
    fn protect(&self, l: &mut HpLocal<T>, r: *mut Record<T>, validate: impl FnOnce() -> bool) -> bool {
        let Some(i) = l.mine.iter().position(|m| m.is_null()) else {
            panic!(
                "all {} hazard pointer slots in use; raise --hp-k",
                l.mine.len()
            );
        };
        let slot = &self.slots[l.pid][i];
        slot.store(r.cast(), Ordering::Release);
        fence(Ordering::SeqCst);
        if validate() {
            l.mine[i] = r;
            true
        } else {
            slot.store(ptr::null_mut(), Ordering::Release);
            false
        }
    }

    #[inline]
    fn unprotect(&self, l: &mut HpLocal<T>, r: *mut Record<T>) {
        if let Some(i) = l.mine.iter().position(|&m| m == r) {
            self.slots[l.pid][i].store(ptr::null_mut(), Ordering::Release);
            l.mine[i] = ptr::null_mut();
        }
    }

    #[inline]
    fn is_protected(&self, l: &HpLocal<T>, r: *mut Record<T>) -> bool {
        l.mine.contains(&r)
    }

    fn limbo_len(&self, l: &HpLocal<T>) -> usize {
        l.buffer.len()
    }

    fn counters(&self, l: &HpLocal<T>) -> ReclaimerCounters {
        l.counters
    }

    fn drain_local(&self, mut l: HpLocal<T>, _blocks: &mut BlockPool<T>, out: &mut Drained<T>) {
        self.clear_all(&mut l);
        out.limbo.append(&mut l.buffer);
    }
}
