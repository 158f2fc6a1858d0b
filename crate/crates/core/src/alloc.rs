//! Record allocators: a per-process bump allocator and the system allocator.

use std::alloc::Layout;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

use crossbeam_utils::CachePadded;

use crate::config::SmrConfig;
use crate::error::SmrError;
use crate::record::Record;

/// Snapshot of allocator counters.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub struct AllocStats {
    pub allocated_records: u64,
    pub freed_records: u64,
    /// Bytes handed out over the whole run (for the bump allocator, the sum of
    /// cursor movements).
    pub allocated_bytes: u64,
}

/// Source of fresh record memory.
///
/// `allocate` and `deallocate` for a given `pid` are only ever called by the
/// thread currently owning that process id.
pub trait Allocator<T>: Send + Sync + Sized {
    const NAME: &'static str;

    fn new(n: usize, cfg: &SmrConfig) -> Result<Self, SmrError>;

    /// Returns uninitialized memory for one record.
    fn allocate(&self, pid: usize) -> Result<*mut Record<T>, SmrError>;

    /// Gives a record back.
    ///
    /// # Safety
    /// `r` came from `allocate` on this allocator and no process can reach it.
    unsafe fn deallocate(&self, pid: usize, r: *mut Record<T>);

    fn stats(&self) -> AllocStats;
}

#[derive(Default)]
struct Counters {
    allocated: AtomicU64,
    freed: AtomicU64,
}

#[inline]
fn bump(c: &AtomicU64) {
    c.store(c.load(Ordering::Relaxed) + 1, Ordering::Relaxed);
}

fn record_layout<T>() -> Layout {
    Layout::new::<Record<T>>()
}

struct Region {
    base: *mut u8,
    capacity: usize,
    cursor: CachePadded<AtomicUsize>,
}

/// Carves records out of one large private mapping per process.
///
/// Memory is never reused by the allocator itself, so the cursor positions
/// measure exactly how much record memory a run needed. Exhausting a region is
/// an error rather than a reason to grow.
pub struct BumpAllocator<T> {
    regions: Box<[Region]>,
    counters: Box<[CachePadded<Counters>]>,
    _marker: std::marker::PhantomData<fn() -> T>,
}

unsafe impl<T> Send for BumpAllocator<T> {}
unsafe impl<T> Sync for BumpAllocator<T> {}

impl<T> BumpAllocator<T> {
    /// Bytes consumed by process `pid` so far.
    pub fn used_bytes(&self, pid: usize) -> usize {
        self.regions[pid].cursor.load(Ordering::Relaxed)
    }

    pub fn capacity(&self) -> usize {
        self.regions.first().map_or(0, |r| r.capacity)
    }
}

impl<T> Allocator<T> for BumpAllocator<T> {
    const NAME: &'static str = "bump";

    fn new(n: usize, cfg: &SmrConfig) -> Result<Self, SmrError> {
        let layout = record_layout::<T>();
        let page = 4096usize.max(layout.align());
        let bytes = cfg.bump_bytes_per_process.next_multiple_of(page);
        let mut regions = Vec::with_capacity(n);
        for _ in 0..n {
            let base = unsafe {
                libc::mmap(
                    std::ptr::null_mut(),
                    bytes,
                    libc::PROT_READ | libc::PROT_WRITE,
                    libc::MAP_PRIVATE | libc::MAP_ANONYMOUS | libc::MAP_NORESERVE,
                    -1,
                    0,
                )
            };
            if base == libc::MAP_FAILED {
                let reason = std::io::Error::last_os_error().to_string();
                for r in &regions {
                    let r: &Region = r;
                    unsafe { libc::munmap(r.base.cast(), r.capacity) };
                }
                return Err(SmrError::MapFailed { bytes, reason });
            }
            regions.push(Region {
                base: base.cast(),
                capacity: bytes,
                cursor: CachePadded::new(AtomicUsize::new(0)),
            });
        }
        Ok(BumpAllocator {
            regions: regions.into_boxed_slice(),
            counters: (0..n).map(|_| CachePadded::new(Counters::default())).collect(),
            _marker: std::marker::PhantomData,
        })
    }

    #[inline]
    fn allocate(&self, pid: usize) -> Result<*mut Record<T>, SmrError> {
        let layout = record_layout::<T>();
        let region = &self.regions[pid];
        let at = region.cursor.load(Ordering::Relaxed).next_multiple_of(layout.align());
        let end = at + layout.size();
        if end > region.capacity {
            return Err(SmrError::OutOfMemory { pid, capacity: region.capacity });
        }
        region.cursor.store(end, Ordering::Relaxed);
        bump(&self.counters[pid].allocated);
        Ok(unsafe { region.base.add(at) }.cast())
    }

    #[inline]
    unsafe fn deallocate(&self, pid: usize, _r: *mut Record<T>) {
        bump(&self.counters[pid].freed);
    }

    fn stats(&self) -> AllocStats {
        let mut s = AllocStats::default();
        for c in self.counters.iter() {
            s.allocated_records += c.allocated.load(Ordering::Relaxed);
            s.freed_records += c.freed.load(Ordering::Relaxed);
        }
        s.allocated_bytes = (0..self.regions.len()).map(|p| self.used_bytes(p) as u64).sum();
        s
    }
}

impl<T> Drop for BumpAllocator<T> {
    fn drop(&mut self) {
        for r in self.regions.iter() {
            unsafe { libc::munmap(r.base.cast(), r.capacity) };
        }
    }
}

/// One `std::alloc` call per record.
pub struct SystemAllocator<T> {
    counters: Box<[CachePadded<Counters>]>,
    _marker: std::marker::PhantomData<fn() -> T>,
}

impl<T> Allocator<T> for SystemAllocator<T> {
    const NAME: &'static str = "system";

    fn new(n: usize, _cfg: &SmrConfig) -> Result<Self, SmrError> {
        Ok(SystemAllocator {
            counters: (0..n).map(|_| CachePadded::new(Counters::default())).collect(),
            _marker: std::marker::PhantomData,
        })
    }

    #[inline]
    fn allocate(&self, pid: usize) -> Result<*mut Record<T>, SmrError> {
        let layout = record_layout::<T>();
        let p = unsafe { std::alloc::alloc(layout) };
        if p.is_null() {
            return Err(SmrError::AllocFailed { size: layout.size() });
        }
        bump(&self.counters[pid].allocated);
        Ok(p.cast())
    }

    #[inline]
    unsafe fn deallocate(&self, pid: usize, r: *mut Record<T>) {
        std::alloc::dealloc(r.cast(), record_layout::<T>());
        bump(&self.counters[pid].freed);
    }

    fn stats(&self) -> AllocStats {
        let mut s = AllocStats::default();
        for c in self.counters.iter() {
            s.allocated_records += c.allocated.load(Ordering::Relaxed);
            s.freed_records += c.freed.load(Ordering::Relaxed);
        }
        s.allocated_bytes = s.allocated_records * record_layout::<T>().size() as u64;
        s
    }
}
