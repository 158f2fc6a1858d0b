//! Pools of reclaimed records ready for reuse.

use crate::block::{BlockBag, BlockChain, BlockPool, SharedBag};
use crate::config::SmrConfig;
use crate::record::Record;

/// Where reclaimed records go.
///
/// When `RECYCLES` is false the manager hands reclaimed records straight back
/// to the allocator and never calls `give` or `give_chain`.
pub trait Pool<T>: Send + Sync + Sized {
    type Local: Send;
    const NAME: &'static str;
    const RECYCLES: bool;

    fn new(n: usize, cfg: &SmrConfig) -> Self;
    fn local(&self, pid: usize, blocks: &mut BlockPool<T>) -> Self::Local;

    /// A reusable record, or `None` if the caller must use the allocator.
    fn take(&self, l: &mut Self::Local, blocks: &mut BlockPool<T>) -> Option<*mut Record<T>>;
    fn give(&self, l: &mut Self::Local, blocks: &mut BlockPool<T>, r: *mut Record<T>);
    fn give_chain(&self, l: &mut Self::Local, blocks: &mut BlockPool<T>, chain: BlockChain<T>);

    /// Records cached by this process.
    fn local_len(&self, l: &Self::Local) -> usize;
    /// Records in the shared part of the pool.
    fn shared_len(&self) -> usize;

    /// Empties the local part into `out` (used when a handle goes away).
    fn drain_local(&self, l: Self::Local, blocks: &mut BlockPool<T>, out: &mut Vec<*mut Record<T>>);
    /// Empties the shared part into `out`; requires exclusive access.
    fn drain_shared(&self, blocks: &mut BlockPool<T>, out: &mut Vec<*mut Record<T>>);
}

/// Reclaimed records go straight back to the allocator.
pub struct NoPool;

impl<T> Pool<T> for NoPool {
    type Local = ();
    const NAME: &'static str = "none";
    const RECYCLES: bool = false;

    fn new(_n: usize, _cfg: &SmrConfig) -> Self {
        NoPool
    }
    fn local(&self, _pid: usize, _blocks: &mut BlockPool<T>) {}
    #[inline]
    fn take(&self, _l: &mut (), _blocks: &mut BlockPool<T>) -> Option<*mut Record<T>> {
        None
    }
    fn give(&self, _l: &mut (), _blocks: &mut BlockPool<T>, _r: *mut Record<T>) {
        unreachable!("NoPool does not recycle")
    }
    fn give_chain(&self, _l: &mut (), _blocks: &mut BlockPool<T>, _c: BlockChain<T>) {
        unreachable!("NoPool does not recycle")
    }
    fn local_len(&self, _l: &()) -> usize {
        0
    }
    fn shared_len(&self) -> usize {
        0
    }
    fn drain_local(&self, _l: (), _b: &mut BlockPool<T>, _out: &mut Vec<*mut Record<T>>) {}
    fn drain_shared(&self, _b: &mut BlockPool<T>, _out: &mut Vec<*mut Record<T>>) {}
}

/// One pool bag per process backed by a lock-free shared bag of full blocks.
pub struct PerThreadPool<T> {
    shared: SharedBag<T>,
    spill_threshold: usize,
    block_size: usize,
}

pub struct PerThreadLocal<T> {
    bag: BlockBag<T>,
}

impl<T> PerThreadPool<T> {
    #[inline]
    fn spill(&self, l: &mut PerThreadLocal<T>) {
        if l.bag.full_blocks() <= self.spill_threshold {
            return;
        }
        // Keep half the threshold locally so a process alternating between
        // releasing and allocating does not bounce blocks through the shared bag.
        let keep = self.spill_threshold / 2;
        let mut chain = BlockChain::empty();
        while l.bag.full_blocks() > keep {
            let b = l.bag.pop_full_block().expect("counted full block");
            chain.append(BlockChain::single(b));
        }
        self.shared.push_chain(chain);
    }

    pub fn shared_bag(&self) -> &SharedBag<T> {
        &self.shared
    }
}

impl<T> Pool<T> for PerThreadPool<T> {
    type Local = PerThreadLocal<T>;
    const NAME: &'static str = "perthread";
    const RECYCLES: bool = true;

    fn new(_n: usize, cfg: &SmrConfig) -> Self {
        PerThreadPool {
            shared: SharedBag::new(),
            spill_threshold: cfg.spill_threshold_blocks,
            block_size: cfg.block_size,
        }
    }

    fn local(&self, _pid: usize, blocks: &mut BlockPool<T>) -> PerThreadLocal<T> {
        PerThreadLocal { bag: BlockBag::new(blocks) }
    }

    #[inline]
    fn take(&self, l: &mut PerThreadLocal<T>, blocks: &mut BlockPool<T>) -> Option<*mut Record<T>> {
        if let Some(r) = l.bag.remove(blocks) {
            return Some(r);
        }
        let b = self.shared.pop()?;
        l.bag.append_full(BlockChain::single(b));
        l.bag.remove(blocks)
    }

    #[inline]
    fn give(&self, l: &mut PerThreadLocal<T>, blocks: &mut BlockPool<T>, r: *mut Record<T>) {
        if l.bag.add(r, blocks) {
            self.spill(l);
        }
    }

    #[inline]
    fn give_chain(&self, l: &mut PerThreadLocal<T>, _blocks: &mut BlockPool<T>, chain: BlockChain<T>) {
        l.bag.append_full(chain);
        self.spill(l);
    }

    fn local_len(&self, l: &PerThreadLocal<T>) -> usize {
        l.bag.len()
    }

    fn shared_len(&self) -> usize {
        self.shared.len_blocks() * self.block_size
    }

    fn drain_local(&self, mut l: PerThreadLocal<T>, blocks: &mut BlockPool<T>, out: &mut Vec<*mut Record<T>>) {
        l.bag.drain_into(blocks, out);
        l.bag.dispose(blocks);
    }

    fn drain_shared(&self, blocks: &mut BlockPool<T>, out: &mut Vec<*mut Record<T>>) {
        while let Some(b) = self.shared.pop() {
            BlockChain::single(b).drain_into(blocks, out);
        }
    }
}
