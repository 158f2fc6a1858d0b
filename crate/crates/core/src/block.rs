//! Blocks of record pointers, the bags built from them, per-process block
//! pools, and the lock-free shared bag of full blocks.
//!
//! Blocks are type-stable for the lifetime of their [`BlockDepot`]: a block
//! that leaves a pool is parked in the depot instead of being returned to the
//! system allocator, so a stale pointer read by a concurrent shared-bag pop is
//! always to valid memory. The depot frees everything when it is dropped.

use std::ptr;
use std::sync::atomic::{AtomicPtr, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use crossbeam_utils::CachePadded;

use crate::record::Record;

/// Fixed-capacity container of record pointers; the unit of bulk transfer.
#[repr(align(64))]
pub struct Block<T> {
    next: AtomicPtr<Block<T>>,
    /// Generation tag used by the classic EBR baseline.
    pub(crate) tag: u64,
    slots: Vec<*mut Record<T>>,
}

impl<T> Block<T> {
    fn new(capacity: usize) -> Self {
        Block {
            next: AtomicPtr::new(ptr::null_mut()),
            tag: 0,
            slots: Vec::with_capacity(capacity),
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    #[inline]
    pub fn records(&self) -> &[*mut Record<T>] {
        &self.slots
    }

    /// Appends a record and returns the new count.
    #[inline]
    pub(crate) fn push(&mut self, r: *mut Record<T>) -> usize {
        self.slots.push(r);
        self.slots.len()
    }

    #[inline]
    pub(crate) fn slots_mut(&mut self) -> &mut Vec<*mut Record<T>> {
        &mut self.slots
    }

    #[inline]
    fn next(&self) -> *mut Block<T> {
        self.next.load(Ordering::Relaxed)
    }

    #[inline]
    fn set_next(&self, b: *mut Block<T>) {
        self.next.store(b, Ordering::Relaxed);
    }
}

/// Per-process block counters, readable while a run is in progress.
#[derive(Debug, Default)]
pub struct BlockCounters {
    /// Blocks handed out by `BlockPool::acquire`.
    pub acquired: AtomicU64,
    /// Acquisitions the local pool could not satisfy.
    pub allocated: AtomicU64,
    /// Blocks given back with `BlockPool::release`.
    pub released: AtomicU64,
    /// Releases that overflowed the local pool.
    pub freed: AtomicU64,
}

#[inline]
fn bump(c: &AtomicU64) {
    // Single writer: a plain load/store pair is enough and avoids a locked op.
    c.store(c.load(Ordering::Relaxed) + 1, Ordering::Relaxed);
}

/// Snapshot of [`BlockCounters`].
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub struct BlockStats {
    pub acquired: u64,
    pub allocated: u64,
    pub released: u64,
    pub freed: u64,
    /// Blocks ever created by the depot.
    pub created: u64,
}

struct DepotInner<T> {
    all: Vec<*mut Block<T>>,
    free: Vec<*mut Block<T>>,
}

/// Owner of every block of one record manager.
pub struct BlockDepot<T> {
    block_size: usize,
    inner: Mutex<DepotInner<T>>,
    created: AtomicU64,
    counters: Box<[CachePadded<BlockCounters>]>,
}

unsafe impl<T> Send for BlockDepot<T> {}
unsafe impl<T> Sync for BlockDepot<T> {}

impl<T> BlockDepot<T> {
    pub fn new(block_size: usize, n: usize) -> Self {
        assert!(block_size >= 1, "block size must be positive");
        BlockDepot {
            block_size,
            inner: Mutex::new(DepotInner { all: Vec::new(), free: Vec::new() }),
            created: AtomicU64::new(0),
            counters: (0..n).map(|_| CachePadded::new(BlockCounters::default())).collect(),
        }
    }

    #[inline]
    pub fn block_size(&self) -> usize {
        self.block_size
    }

    fn get(&self) -> *mut Block<T> {
        let mut inner = self.inner.lock().unwrap();
        if let Some(b) = inner.free.pop() {
            return b;
        }
        let b = Box::into_raw(Box::new(Block::new(self.block_size)));
        assert!(
            (b as usize) < (1 << 48),
            "block address outside the 48-bit range needed for tagging"
        );
        inner.all.push(b);
        self.created.fetch_add(1, Ordering::Relaxed);
        b
    }

    fn put(&self, b: *mut Block<T>) {
        self.inner.lock().unwrap().free.push(b);
    }

    pub fn counters(&self, pid: usize) -> &BlockCounters {
        &self.counters[pid]
    }

    pub fn stats(&self) -> BlockStats {
        let mut s = BlockStats { created: self.created.load(Ordering::Relaxed), ..Default::default() };
        for c in self.counters.iter() {
            s.acquired += c.acquired.load(Ordering::Relaxed);
            s.allocated += c.allocated.load(Ordering::Relaxed);
            s.released += c.released.load(Ordering::Relaxed);
            s.freed += c.freed.load(Ordering::Relaxed);
        }
        s
    }
}

impl<T> Drop for BlockDepot<T> {
    fn drop(&mut self) {
        let inner = self.inner.get_mut().unwrap();
        for &b in &inner.all {
            drop(unsafe { Box::from_raw(b) });
        }
    }
}

/// Bounded per-process cache of empty blocks.
pub struct BlockPool<T> {
    depot: Arc<BlockDepot<T>>,
    pid: usize,
    cap: usize,
    cached: Vec<*mut Block<T>>,
}

unsafe impl<T> Send for BlockPool<T> {}

impl<T> BlockPool<T> {
    pub fn new(depot: Arc<BlockDepot<T>>, pid: usize, cap: usize) -> Self {
        BlockPool { depot, pid, cap, cached: Vec::with_capacity(cap) }
    }

    #[inline]
    pub fn block_size(&self) -> usize {
        self.depot.block_size
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.cached.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.cached.is_empty()
    }

    pub fn pid(&self) -> usize {
        self.pid
    }

    /// Returns an empty block, from the cache if possible.
    #[inline]
    pub fn acquire(&mut self) -> *mut Block<T> {
        let c = self.depot.counters(self.pid);
        bump(&c.acquired);
        match self.cached.pop() {
            Some(b) => b,
            None => {
                bump(&c.allocated);
                self.depot.get()
            }
        }
    }

    /// Caches an empty block, or frees it when the cache is full.
    #[inline]
    pub fn release(&mut self, b: *mut Block<T>) {
        debug_assert!(unsafe { (*b).is_empty() });
        unsafe { (*b).set_next(ptr::null_mut()) };
        let c = self.depot.counters(self.pid);
        bump(&c.released);
        if self.cached.len() < self.cap {
            self.cached.push(b);
        } else {
            bump(&c.freed);
            self.depot.put(b);
        }
    }
}

impl<T> Drop for BlockPool<T> {
    fn drop(&mut self) {
        for b in self.cached.drain(..) {
            self.depot.put(b);
        }
    }
}

/// A detached, null-terminated chain of full blocks.
pub struct BlockChain<T> {
    first: *mut Block<T>,
    last: *mut Block<T>,
    blocks: usize,
}

unsafe impl<T> Send for BlockChain<T> {}

impl<T> BlockChain<T> {
    pub fn empty() -> Self {
        BlockChain { first: ptr::null_mut(), last: ptr::null_mut(), blocks: 0 }
    }

    pub fn single(b: *mut Block<T>) -> Self {
        unsafe { (*b).set_next(ptr::null_mut()) };
        BlockChain { first: b, last: b, blocks: 1 }
    }

    #[inline]
    pub fn blocks(&self) -> usize {
        self.blocks
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.blocks == 0
    }

    /// Total records in the chain.
    pub fn records(&self) -> usize {
        self.iter_blocks().map(|b| unsafe { (*b).len() }).sum()
    }

    pub fn iter_blocks(&self) -> impl Iterator<Item = *mut Block<T>> + '_ {
        let mut cur = self.first;
        std::iter::from_fn(move || {
            if cur.is_null() {
                return None;
            }
            let b = cur;
            cur = unsafe { (*b).next() };
            Some(b)
        })
    }

    /// Detaches the first block.
    pub fn pop_block(&mut self) -> Option<*mut Block<T>> {
        if self.first.is_null() {
            return None;
        }
        let b = self.first;
        self.first = unsafe { (*b).next() };
        if self.first.is_null() {
            self.last = ptr::null_mut();
        }
        self.blocks -= 1;
        unsafe { (*b).set_next(ptr::null_mut()) };
        Some(b)
    }

    /// Appends `other` after this chain in O(1).
    pub fn append(&mut self, other: BlockChain<T>) {
        if other.is_empty() {
            return;
        }
        if self.is_empty() {
            *self = other;
            return;
        }
        unsafe { (*self.last).set_next(other.first) };
        self.last = other.last;
        self.blocks += other.blocks;
    }

    /// Empties every block into `out` and returns the blocks to `pool`.
    pub fn drain_into(mut self, pool: &mut BlockPool<T>, out: &mut Vec<*mut Record<T>>) {
        while let Some(b) = self.pop_block() {
            unsafe { out.append(&mut (*b).slots) };
            pool.release(b);
        }
    }
}

/// Bag of records made of one partial head block followed by full blocks.
///
/// The head block always holds fewer than `B` records.
pub struct BlockBag<T> {
    head: *mut Block<T>,
    tail: *mut Block<T>,
    blocks: usize,
    block_size: usize,
}

unsafe impl<T> Send for BlockBag<T> {}

impl<T> BlockBag<T> {
    pub fn new(pool: &mut BlockPool<T>) -> Self {
        let head = pool.acquire();
        BlockBag { head, tail: head, blocks: 1, block_size: pool.block_size() }
    }

    /// Blocks in the bag, counting the head block.
    #[inline]
    pub fn size_in_blocks(&self) -> usize {
        self.blocks
    }

    #[inline]
    pub fn full_blocks(&self) -> usize {
        self.blocks - 1
    }

    #[inline]
    pub fn head_len(&self) -> usize {
        unsafe { (*self.head).len() }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.head_len() + self.full_blocks() * self.block_size
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.blocks == 1 && self.head_len() == 0
    }

    /// Adds a record. Returns true if a block had to be acquired.
    #[inline]
    pub fn add(&mut self, r: *mut Record<T>, pool: &mut BlockPool<T>) -> bool {
        unsafe { (*self.head).slots.push(r) };
        if self.head_len() < self.block_size {
            return false;
        }
        let fresh = pool.acquire();
        unsafe { (*fresh).set_next(self.head) };
        self.head = fresh;
        self.blocks += 1;
        true
    }

    /// Removes the most recently added record, if any.
    #[inline]
    pub fn remove(&mut self, pool: &mut BlockPool<T>) -> Option<*mut Record<T>> {
        if self.head_len() == 0 {
            if self.blocks == 1 {
                return None;
            }
            let old = self.head;
            self.head = unsafe { (*old).next() };
            self.blocks -= 1;
            pool.release(old);
        }
        unsafe { (*self.head).slots.pop() }
    }

    /// Detaches every full block in O(1), leaving only the head block.
    #[inline]
    pub fn take_full_blocks(&mut self) -> BlockChain<T> {
        if self.blocks == 1 {
            return BlockChain::empty();
        }
        let first = unsafe { (*self.head).next() };
        let chain = BlockChain { first, last: self.tail, blocks: self.blocks - 1 };
        unsafe { (*self.head).set_next(ptr::null_mut()) };
        self.tail = self.head;
        self.blocks = 1;
        chain
    }

    /// Splices a chain of full blocks in behind the head block in O(1).
    #[inline]
    pub fn append_full(&mut self, chain: BlockChain<T>) {
        if chain.is_empty() {
            return;
        }
        debug_assert!(chain.iter_blocks().all(|b| unsafe { (*b).len() } == self.block_size));
        unsafe {
            (*chain.last).set_next((*self.head).next());
            (*self.head).set_next(chain.first);
        }
        if self.tail == self.head {
            self.tail = chain.last;
        }
        self.blocks += chain.blocks;
    }

    /// Detaches one full block, if there is one.
    #[inline]
    pub fn pop_full_block(&mut self) -> Option<*mut Block<T>> {
        if self.blocks == 1 {
            return None;
        }
        let b = unsafe { (*self.head).next() };
        let after = unsafe { (*b).next() };
        unsafe { (*self.head).set_next(after) };
        if self.tail == b {
            self.tail = self.head;
        }
        self.blocks -= 1;
        unsafe { (*b).set_next(ptr::null_mut()) };
        Some(b)
    }

    /// Visits records newest first: head block from its last slot down, then
    /// each full block from its last slot down.
    pub fn for_each(&self, mut f: impl FnMut(*mut Record<T>)) {
        let mut b = self.head;
        while !b.is_null() {
            for &r in unsafe { (*b).slots.iter().rev() } {
                f(r);
            }
            b = unsafe { (*b).next() };
        }
    }

    pub fn to_vec(&self) -> Vec<*mut Record<T>> {
        let mut v = Vec::with_capacity(self.len());
        self.for_each(|r| v.push(r));
        v
    }

    /// Moves every record matching `keep` to the front of the bag (in
    /// iteration order), then detaches all full blocks lying entirely behind
    /// the kept records.
    ///
    /// One pass with two cursors; each record is tested once.
    pub fn partition_front(&mut self, mut keep: impl FnMut(*mut Record<T>) -> bool) -> BlockChain<T> {
        let mut front = Cursor::start(self.head);
        let mut scan = Cursor::start(self.head);
        let mut kept = 0usize;
        while let Some(slot) = scan.slot() {
            let r = unsafe { *slot };
            if keep(r) {
                let dst = front.slot().expect("front cursor never passes scan cursor");
                unsafe { ptr::swap(dst, slot) };
                front.advance();
                kept += 1;
            }
            scan.advance();
        }
        self.detach_after(kept)
    }

    /// Detaches the full blocks whose first position is at or after `pos`.
    fn detach_after(&mut self, pos: usize) -> BlockChain<T> {
        let h = self.head_len();
        let b = self.block_size;
        // Full block j (1-based) covers positions [h + (j-1)b, h + jb).
        let keep_full = if pos <= h { 0 } else { (pos - h).div_ceil(b) };
        if keep_full >= self.full_blocks() {
            return BlockChain::empty();
        }
        let mut prev = self.head;
        for _ in 0..keep_full {
            prev = unsafe { (*prev).next() };
        }
        let first = unsafe { (*prev).next() };
        let chain = BlockChain { first, last: self.tail, blocks: self.full_blocks() - keep_full };
        unsafe { (*prev).set_next(ptr::null_mut()) };
        self.tail = prev;
        self.blocks -= chain.blocks;
        chain
    }

    /// Empties the bag into `out`, returning all but the head block to `pool`.
    pub fn drain_into(&mut self, pool: &mut BlockPool<T>, out: &mut Vec<*mut Record<T>>) {
        self.take_full_blocks().drain_into(pool, out);
        unsafe { out.append(&mut (*self.head).slots) };
    }

    /// Returns the (empty) head block to `pool`, consuming the bag.
    pub fn dispose(self, pool: &mut BlockPool<T>) {
        assert!(self.is_empty(), "disposing a non-empty bag would lose records");
        pool.release(self.head);
    }
}

struct Cursor<T> {
    block: *mut Block<T>,
    // Next slot to visit plus one; zero means the block is exhausted.
    idx: usize,
}

impl<T> Cursor<T> {
    fn start(head: *mut Block<T>) -> Self {
        let mut c = Cursor { block: head, idx: unsafe { (*head).len() } };
        c.settle();
        c
    }

    fn settle(&mut self) {
        while self.idx == 0 && !self.block.is_null() {
            self.block = unsafe { (*self.block).next() };
            if !self.block.is_null() {
                self.idx = unsafe { (*self.block).len() };
            }
        }
    }

    fn slot(&self) -> Option<*mut *mut Record<T>> {
        if self.block.is_null() {
            return None;
        }
        Some(unsafe { (*self.block).slots.as_mut_ptr().add(self.idx - 1) })
    }

    fn advance(&mut self) {
        self.idx -= 1;
        self.settle();
    }
}

const TAG_LOW_BITS: u32 = 6;
const TAG_LOW_MASK: u64 = (1 << TAG_LOW_BITS) - 1;
const ADDR_MASK: u64 = ((1u64 << 48) - 1) & !TAG_LOW_MASK;

#[inline]
fn pack<T>(b: *mut Block<T>, tag: u64) -> u64 {
    let lo = tag & TAG_LOW_MASK;
    let hi = (tag >> TAG_LOW_BITS) & 0xFFFF;
    (b as u64) | lo | (hi << 48)
}

#[inline]
fn unpack<T>(word: u64) -> (*mut Block<T>, u64) {
    let b = (word & ADDR_MASK) as *mut Block<T>;
    let tag = (word & TAG_LOW_MASK) | ((word >> 48) << TAG_LOW_BITS);
    (b, tag)
}

/// Lock-free LIFO of full blocks shared by all processes.
///
/// The top word carries a 22-bit modification stamp in the bits a 64-byte
/// aligned, 48-bit block address leaves free, so a pop that read a stale
/// `next` fails its compare-and-set.
pub struct SharedBag<T> {
    top: CachePadded<AtomicU64>,
    blocks: CachePadded<AtomicUsize>,
    _marker: std::marker::PhantomData<*mut Block<T>>,
}

unsafe impl<T> Send for SharedBag<T> {}
unsafe impl<T> Sync for SharedBag<T> {}

impl<T> Default for SharedBag<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T> SharedBag<T> {
    pub fn new() -> Self {
        SharedBag {
            top: CachePadded::new(AtomicU64::new(0)),
            blocks: CachePadded::new(AtomicUsize::new(0)),
            _marker: std::marker::PhantomData,
        }
    }

    /// Pushes a whole chain with a single successful compare-and-set.
    pub fn push_chain(&self, chain: BlockChain<T>) {
        if chain.is_empty() {
            return;
        }
        let n = chain.blocks;
        let mut old = self.top.load(Ordering::Acquire);
        loop {
            let (top, tag) = unpack::<T>(old);
            unsafe { (*chain.last).next.store(top, Ordering::Relaxed) };
            let new = pack(chain.first, tag.wrapping_add(1));
            match self.top.compare_exchange_weak(old, new, Ordering::AcqRel, Ordering::Acquire) {
                Ok(_) => break,
                Err(cur) => old = cur,
            }
        }
        self.blocks.fetch_add(n, Ordering::Relaxed);
    }

    pub fn push(&self, b: *mut Block<T>) {
        self.push_chain(BlockChain::single(b));
    }

    pub fn pop(&self) -> Option<*mut Block<T>> {
        let mut old = self.top.load(Ordering::Acquire);
        loop {
            let (top, tag) = unpack::<T>(old);
            if top.is_null() {
                return None;
            }
            // `top` may already have been popped and reused; the stamp makes
            // the compare-and-set fail in that case, and the depot keeps the
            // memory valid.
            let next = unsafe { (*top).next.load(Ordering::Relaxed) };
            let new = pack(next, tag.wrapping_add(1));
            match self.top.compare_exchange_weak(old, new, Ordering::AcqRel, Ordering::Acquire) {
                Ok(_) => {
                    self.blocks.fetch_sub(1, Ordering::Relaxed);
                    unsafe { (*top).set_next(ptr::null_mut()) };
                    return Some(top);
                }
                Err(cur) => old = cur,
            }
        }
    }

    /// Number of blocks; exact only when no push or pop is in flight.
    pub fn len_blocks(&self) -> usize {
        self.blocks.load(Ordering::Relaxed)
    }

    pub fn is_empty(&self) -> bool {
        unpack::<T>(self.top.load(Ordering::Acquire)).0.is_null()
    }
}
