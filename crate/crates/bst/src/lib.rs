//! A lock-free external binary search tree with operation descriptors and
//! helping, whose memory is managed by a [`debra::RecordManager`].
//!
//! Keys live in leaves; internal nodes only route. Each internal node has an
//! `update` word that is either clean or points at the descriptor of the
//! operation that currently owns it. Any process that runs into a flagged
//! word can finish that operation on the owner's behalf.
//!
//! The same code runs under every reclaimer. Under hazard pointers, searches
//! protect nodes hand over hand and only help descriptors they could validate.
//! Under DEBRA+, each attempt's descriptor and the nodes it touches are
//! recovery-protected before the descriptor is published, so a neutralized
//! operation can finish its own update from quiescent recovery code.
//!
//! ```
//! use debra::SmrConfig;
//! use debra_bst::DebraBst;
//!
//! let tree = DebraBst::new(1, SmrConfig::default()).unwrap();
//! let mut h = tree.handle(0);
//! assert!(h.insert(7, 70).unwrap());
//! assert!(!h.insert(7, 71).unwrap());
//! assert_eq!(h.search(7).unwrap(), Some(70));
//! assert!(h.delete(7).unwrap());
//! assert_eq!(h.search(7).unwrap(), None);
//! ```

use std::fmt;
use std::ptr;
use std::sync::atomic::{AtomicPtr, AtomicU64, AtomicU8, Ordering::*};
use std::time::{Duration, Instant};

use debra::{
    Allocator, BumpAllocator, Census, ClassicEbr, Debra, DebraPlus, Handle, HazardPointers,
    Neutralized, NoPool, NoReclaim, PerThreadPool, Pool, Reclaimer, Record, RecordManager,
    SmrConfig, SmrError,
};

pub type Rec = Record<Node>;

/// Largest key a caller may use; the two keys above it are sentinels.
pub const MAX_KEY: u64 = u64::MAX - 2;
const INF1: u64 = u64::MAX - 1;
const INF2: u64 = u64::MAX;

const LEAF: u8 = 0;
const INTERNAL: u8 = 1;
const INSERT: u8 = 2;
const DELETE: u8 = 3;

const PENDING: u8 = 0;
const DONE: u8 = 1;
const FAILED: u8 = 2;

// Update word: low two bits are the state. Flagged words carry a descriptor
// address; clean words carry a version that every unflag bumps.
const CLEAN: u64 = 0;
const IFLAG: u64 = 1;
const DFLAG: u64 = 2;
const MARK: u64 = 3;

#[inline]
fn state(w: u64) -> u64 {
    w & 3
}

#[inline]
fn flagged(s: u64, d: *mut Rec) -> u64 {
    d as u64 | s
}

#[inline]
fn desc_of(w: u64) -> *mut Rec {
    (w & !3) as *mut Rec
}

#[inline]
fn next_clean(w: u64) -> u64 {
    debug_assert_eq!(state(w), CLEAN);
    w.wrapping_add(4)
}

#[inline]
fn cas(a: &AtomicU64, old: u64, new: u64) -> u64 {
    match a.compare_exchange(old, new, SeqCst, SeqCst) {
        Ok(v) | Err(v) => v,
    }
}

/// Every record in the tree: leaves, internal nodes and descriptors share one
/// type so they can share one record manager.
pub struct Node {
    kind: u8,
    key: u64,
    value: u64,
    left: AtomicPtr<Rec>,
    right: AtomicPtr<Rec>,
    update: AtomicU64,
    gp: AtomicPtr<Rec>,
    p: AtomicPtr<Rec>,
    l: AtomicPtr<Rec>,
    new: AtomicPtr<Rec>,
    gpupdate: u64,
    pupdate: u64,
    status: AtomicU8,
}

impl Node {
    fn blank(kind: u8, key: u64, value: u64) -> Node {
        Node {
            kind,
            key,
            value,
            left: AtomicPtr::new(ptr::null_mut()),
            right: AtomicPtr::new(ptr::null_mut()),
            update: AtomicU64::new(CLEAN),
            gp: AtomicPtr::new(ptr::null_mut()),
            p: AtomicPtr::new(ptr::null_mut()),
            l: AtomicPtr::new(ptr::null_mut()),
            new: AtomicPtr::new(ptr::null_mut()),
            gpupdate: 0,
            pupdate: 0,
            status: AtomicU8::new(PENDING),
        }
    }

    fn leaf(key: u64, value: u64) -> Node {
        Node::blank(LEAF, key, value)
    }

    fn internal(key: u64, left: *mut Rec, right: *mut Rec) -> Node {
        let n = Node::blank(INTERNAL, key, 0);
        n.left.store(left, Relaxed);
        n.right.store(right, Relaxed);
        n
    }

    fn insert_desc(p: *mut Rec, l: *mut Rec, new: *mut Rec, pupdate: u64) -> Node {
        let mut n = Node::blank(INSERT, 0, 0);
        n.p = AtomicPtr::new(p);
        n.l = AtomicPtr::new(l);
        n.new = AtomicPtr::new(new);
        n.pupdate = pupdate;
        n
    }

    fn delete_desc(gp: *mut Rec, p: *mut Rec, l: *mut Rec, gpupdate: u64, pupdate: u64) -> Node {
        let mut n = Node::blank(DELETE, 0, 0);
        n.gp = AtomicPtr::new(gp);
        n.p = AtomicPtr::new(p);
        n.l = AtomicPtr::new(l);
        n.gpupdate = gpupdate;
        n.pupdate = pupdate;
        n
    }

    #[inline]
    fn child(&self, key: u64) -> &AtomicPtr<Rec> {
        if key < self.key {
            &self.left
        } else {
            &self.right
        }
    }
}

#[inline]
fn node<'a>(r: *mut Rec) -> &'a Node {
    unsafe { &(*r).value }
}

pub type DebraBst = Bst<Debra<Node>>;
pub type DebraPlusBst = Bst<DebraPlus<Node>>;
pub type EbrBst = Bst<ClassicEbr<Node>>;
pub type HpBst = Bst<HazardPointers<Node>>;
pub type LeakyBst = Bst<NoReclaim<Node>, NoPool>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BstError {
    Alloc(SmrError),
    /// An operation restarted more times in a row than the watchdog allows.
    Starved { restarts: u64 },
}

impl fmt::Display for BstError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BstError::Alloc(e) => write!(f, "allocation failed: {e}"),
            BstError::Starved { restarts } => {
                write!(f, "operation starved after {restarts} consecutive restarts")
            }
        }
    }
}

impl std::error::Error for BstError {}

impl From<SmrError> for BstError {
    fn from(e: SmrError) -> Self {
        BstError::Alloc(e)
    }
}

/// Per-handle operation counters.
#[derive(Copy, Clone, Debug, Default, PartialEq, Eq)]
pub struct OpStats {
    pub inserts: u64,
    pub inserted: u64,
    pub deletes: u64,
    pub deleted: u64,
    pub searches: u64,
    pub found: u64,
    pub restarts: u64,
    /// Descriptors of other operations this handle helped.
    pub helps: u64,
    /// Hazard pointer validations performed.
    pub validations: u64,
    pub neutralized: u64,
    /// Operations whose update was completed by recovery code.
    pub recovered: u64,
}

/// Shape and content of the tree, checked while no handle is alive.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Audit {
    /// Keys in order, sentinels excluded.
    pub keys: Vec<u64>,
    pub internal_nodes: usize,
    pub leaves: usize,
}

impl Audit {
    /// Records the tree itself owns.
    pub fn reachable(&self) -> usize {
        self.internal_nodes + self.leaves
    }
}

/// Consecutive restarts after which an operation gives up.
pub const DEFAULT_WATCHDOG: u64 = 1_000_000;

pub struct Bst<R, P = PerThreadPool<Node>, A = BumpAllocator<Node>>
where
    R: Reclaimer<Node>,
    P: Pool<Node>,
    A: Allocator<Node>,
{
    mgr: RecordManager<Node, R, P, A>,
    root: *mut Rec,
    watchdog: u64,
}

unsafe impl<R: Reclaimer<Node>, P: Pool<Node>, A: Allocator<Node>> Send for Bst<R, P, A> {}
unsafe impl<R: Reclaimer<Node>, P: Pool<Node>, A: Allocator<Node>> Sync for Bst<R, P, A> {}

impl<R, P, A> Bst<R, P, A>
where
    R: Reclaimer<Node>,
    P: Pool<Node>,
    A: Allocator<Node>,
{
    pub fn new(processes: usize, cfg: SmrConfig) -> Result<Self, SmrError> {
        let mgr = RecordManager::new(processes, cfg)?;
        let root = {
            let mut h = mgr.handle(0);
            let a = h.allocate(Node::leaf(INF1, 0))?;
            let b = h.allocate(Node::leaf(INF2, 0))?;
            h.allocate(Node::internal(INF2, a, b))?
        };
        Ok(Bst { mgr, root, watchdog: DEFAULT_WATCHDOG })
    }

    pub fn with_watchdog(mut self, restarts: u64) -> Self {
        self.watchdog = restarts;
        self
    }

    pub fn handle(&self, pid: usize) -> BstHandle<'_, R, P, A> {
        BstHandle {
            h: self.mgr.handle(pid),
            root: self.root,
            watchdog: self.watchdog,
            sp: Spares::default(),
            stats: OpStats::default(),
        }
    }

    pub fn manager(&self) -> &RecordManager<Node, R, P, A> {
        &self.mgr
    }

    pub fn census(&mut self) -> Census {
        self.mgr.census()
    }

    /// Walks the whole tree and checks it is a well-formed external BST with
    /// no operation in progress.
    pub fn audit(&mut self) -> Result<Audit, String> {
        let mut out = Audit { keys: Vec::new(), internal_nodes: 0, leaves: 0 };
        // (node, exclusive lower bound, exclusive upper bound)
        let mut stack = vec![(self.root, None::<u64>, None::<u64>)];
        while let Some((r, lo, hi)) = stack.pop() {
            if r.is_null() {
                return Err("null child".into());
            }
            let n = node(r);
            match n.kind {
                LEAF => {
                    if lo.is_some_and(|lo| n.key < lo) || hi.is_some_and(|hi| n.key >= hi) {
                        return Err(format!("leaf {} outside ({lo:?}, {hi:?})", n.key));
                    }
                    out.leaves += 1;
                    if n.key <= MAX_KEY {
                        out.keys.push(n.key);
                    }
                }
                INTERNAL => {
                    if state(n.update.load(SeqCst)) != CLEAN {
                        return Err(format!("internal node {} left flagged", n.key));
                    }
                    out.internal_nodes += 1;
                    // Right first so keys come out in order.
                    stack.push((n.right.load(SeqCst), Some(n.key), hi));
                    stack.push((n.left.load(SeqCst), lo, Some(n.key)));
                }
                k => return Err(format!("descriptor (kind {k}) linked into the tree")),
            }
        }
        if !out.keys.windows(2).all(|w| w[0] < w[1]) {
            return Err("keys out of order".into());
        }
        Ok(out)
    }
}

impl<R, P, A> Drop for Bst<R, P, A>
where
    R: Reclaimer<Node>,
    P: Pool<Node>,
    A: Allocator<Node>,
{
    fn drop(&mut self) {
        let mut stack = vec![self.root];
        while let Some(r) = stack.pop() {
            let n = node(r);
            if n.kind == INTERNAL {
                stack.push(n.left.load(Relaxed));
                stack.push(n.right.load(Relaxed));
            }
            unsafe { self.mgr.free_unshared(r) };
        }
    }
}

/// Where an injected stall happens.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum StallAt {
    /// Between operations; the process holds nothing.
    Quiescent,
    /// In the middle of an operation body, after a search. A neutralization
    /// interrupts the stall; the process then stays stalled, quiescent, for
    /// the rest of the duration.
    MidBody,
    /// In the middle of an operation body, like a descheduled process: a
    /// neutralization only takes effect once the stall ends.
    Descheduled,
}

#[derive(Copy, Clone)]
struct Spares {
    leaf: *mut Rec,
    sibling: *mut Rec,
    internal: *mut Rec,
    desc: *mut Rec,
}

impl Default for Spares {
    fn default() -> Self {
        Spares {
            leaf: ptr::null_mut(),
            sibling: ptr::null_mut(),
            internal: ptr::null_mut(),
            desc: ptr::null_mut(),
        }
    }
}

enum Step<O> {
    Done(O),
    Retry,
}

#[derive(Copy, Clone)]
struct Found {
    gp: *mut Rec,
    p: *mut Rec,
    l: *mut Rec,
    gpupdate: u64,
    pupdate: u64,
}

type H<'m, R, P, A> = Handle<'m, Node, R, P, A>;

/// One process's access to a [`Bst`].
pub struct BstHandle<'t, R, P, A>
where
    R: Reclaimer<Node>,
    P: Pool<Node>,
    A: Allocator<Node>,
{
    h: H<'t, R, P, A>,
    root: *mut Rec,
    watchdog: u64,
    sp: Spares,
    stats: OpStats,
}

unsafe impl<R: Reclaimer<Node>, P: Pool<Node>, A: Allocator<Node>> Send for BstHandle<'_, R, P, A> {}

impl<'t, R, P, A> BstHandle<'t, R, P, A>
where
    R: Reclaimer<Node>,
    P: Pool<Node>,
    A: Allocator<Node>,
{
    pub fn pid(&self) -> usize {
        self.h.pid()
    }

    pub fn stats(&self) -> OpStats {
        self.stats
    }

    /// The underlying record manager handle.
    pub fn smr(&self) -> &H<'t, R, P, A> {
        &self.h
    }

    pub fn smr_mut(&mut self) -> &mut H<'t, R, P, A> {
        &mut self.h
    }

    pub fn search(&mut self, key: u64) -> Result<Option<u64>, BstError> {
        assert!(key <= MAX_KEY, "key {key} is reserved");
        self.stats.searches += 1;
        let mut restarts = 0;
        loop {
            let root = self.root;
            let stats = &mut self.stats;
            let step = self.h.run_body(|h| {
                let Some(s) = search(h, root, key, stats)? else {
                    return Ok(Step::Retry);
                };
                let l = node(s.l);
                Ok(Step::Done((l.key == key).then_some(l.value)))
            });
            match step {
                Ok(Step::Done(v)) => {
                    self.stats.found += v.is_some() as u64;
                    return Ok(v);
                }
                Ok(Step::Retry) => {}
                Err(Neutralized) => self.stats.neutralized += 1,
            }
            self.restart(&mut restarts)?;
        }
    }

    /// Inserts `key` if absent. Returns false if it was already present.
    pub fn insert(&mut self, key: u64, value: u64) -> Result<bool, BstError> {
        self.insert_inner(key, value, &mut || {})
    }

    /// Deletes `key`. Returns false if it was absent.
    pub fn delete(&mut self, key: u64) -> Result<bool, BstError> {
        self.delete_inner(key, &mut || {})
    }

    /// Like [`insert`](Self::insert), but calls `hook` each time the operation
    /// is neutralized, before its recovery code runs.
    #[doc(hidden)]
    pub fn insert_with_recovery_hook(
        &mut self,
        key: u64,
        value: u64,
        hook: &mut dyn FnMut(),
    ) -> Result<bool, BstError> {
        self.insert_inner(key, value, hook)
    }

    #[doc(hidden)]
    pub fn delete_with_recovery_hook(&mut self, key: u64, hook: &mut dyn FnMut()) -> Result<bool, BstError> {
        self.delete_inner(key, hook)
    }

    /// Simulates a process that is descheduled for `duration` or until `stop`
    /// becomes nonzero. Returns true if the process was neutralized.
    pub fn stall(&mut self, at: StallAt, duration: Duration, stop: &AtomicU8) -> bool {
        match at {
            StallAt::Quiescent => {
                self.h.stall(duration, stop);
                false
            }
            StallAt::MidBody | StallAt::Descheduled => {
                let start = Instant::now();
                let root = self.root;
                let stats = &mut self.stats;
                let out = self.h.run_body(|h| {
                    search(h, root, 0, stats)?;
                    if at == StallAt::Descheduled {
                        h.stall(duration, stop);
                        return Ok(());
                    }
                    let deadline = start + duration;
                    while stop.load(Acquire) == 0 && Instant::now() < deadline {
                        h.poll()?;
                        std::thread::sleep(Duration::from_millis(1));
                    }
                    Ok(())
                });
                if out.is_err() {
                    self.stats.neutralized += 1;
                    if at == StallAt::MidBody {
                        self.h.stall(duration.saturating_sub(start.elapsed()), stop);
                    }
                }
                out.is_err()
            }
        }
    }

    fn restart(&mut self, restarts: &mut u64) -> Result<(), BstError> {
        *restarts += 1;
        self.stats.restarts += 1;
        if *restarts > self.watchdog {
            return Err(BstError::Starved { restarts: *restarts });
        }
        Ok(())
    }

    fn spare(&mut self, which: fn(&mut Spares) -> &mut *mut Rec) -> Result<(), SmrError> {
        if which(&mut self.sp).is_null() {
            let r = self.h.allocate(Node::blank(LEAF, 0, 0))?;
            *which(&mut self.sp) = r;
        }
        Ok(())
    }

    /// After a neutralization: if the descriptor may have been published,
    /// finish it. Returns whether the operation took effect.
    fn recover(&mut self, desc: *mut Rec, hook: &mut dyn FnMut()) -> (bool, bool) {
        self.stats.neutralized += 1;
        hook();
        if !R::SUPPORTS_CRASH_RECOVERY || !self.h.is_rprotected(desc) {
            return (false, false);
        }
        let done = match help(&mut self.h, desc, false, &mut self.stats) {
            Ok(d) => d,
            Err(Neutralized) => unreachable!("recovery code runs quiescent"),
        };
        self.stats.recovered += done as u64;
        (done, true)
    }

    fn insert_inner(&mut self, key: u64, value: u64, hook: &mut dyn FnMut()) -> Result<bool, BstError> {
        assert!(key <= MAX_KEY, "key {key} is reserved");
        self.stats.inserts += 1;
        let mut restarts = 0;
        loop {
            self.spare(|s| &mut s.leaf)?;
            self.spare(|s| &mut s.sibling)?;
            self.spare(|s| &mut s.internal)?;
            self.spare(|s| &mut s.desc)?;
            let (root, sp) = (self.root, self.sp);
            let stats = &mut self.stats;
            let step = match self.h.run_body(|h| insert_body(h, root, key, value, &sp, stats)) {
                Ok(s) => s,
                Err(Neutralized) => {
                    // An insert descriptor that failed was never installed,
                    // so the spares stay private either way.
                    let (done, _) = self.recover(sp.desc, hook);
                    if done {
                        Step::Done(true)
                    } else {
                        Step::Retry
                    }
                }
            };
            if R::SUPPORTS_CRASH_RECOVERY {
                self.h.runprotect_all();
            }
            match step {
                Step::Done(true) => {
                    let old = node(sp.desc).l.load(Relaxed);
                    self.h.retire(old);
                    self.h.retire(sp.desc);
                    self.sp = Spares::default();
                    self.stats.inserted += 1;
                    return Ok(true);
                }
                Step::Done(false) => return Ok(false),
                Step::Retry => self.restart(&mut restarts)?,
            }
        }
    }

    fn delete_inner(&mut self, key: u64, hook: &mut dyn FnMut()) -> Result<bool, BstError> {
        assert!(key <= MAX_KEY, "key {key} is reserved");
        self.stats.deletes += 1;
        let mut restarts = 0;
        loop {
            self.spare(|s| &mut s.desc)?;
            let (root, desc) = (self.root, self.sp.desc);
            let stats = &mut self.stats;
            let step = match self.h.run_body(|h| delete_body(h, root, key, desc, stats)) {
                Ok(s) => s,
                Err(Neutralized) => {
                    let (done, published) = self.recover(desc, hook);
                    match (done, published) {
                        (true, _) => Step::Done(DeleteOutcome::Deleted),
                        (false, true) => Step::Done(DeleteOutcome::Failed),
                        (false, false) => Step::Retry,
                    }
                }
            };
            if R::SUPPORTS_CRASH_RECOVERY {
                self.h.runprotect_all();
            }
            match step {
                Step::Done(DeleteOutcome::Deleted) => {
                    let d = node(desc);
                    self.h.retire(d.p.load(Relaxed));
                    self.h.retire(d.l.load(Relaxed));
                    self.h.retire(desc);
                    self.sp.desc = ptr::null_mut();
                    self.stats.deleted += 1;
                    return Ok(true);
                }
                Step::Done(DeleteOutcome::Absent) => return Ok(false),
                Step::Done(DeleteOutcome::Failed) => {
                    // Helpers may still read a descriptor that was installed
                    // and backed out, so it goes through reclamation.
                    self.h.retire(desc);
                    self.sp.desc = ptr::null_mut();
                    self.restart(&mut restarts)?;
                }
                Step::Retry => self.restart(&mut restarts)?,
            }
        }
    }
}

impl<R, P, A> Drop for BstHandle<'_, R, P, A>
where
    R: Reclaimer<Node>,
    P: Pool<Node>,
    A: Allocator<Node>,
{
    fn drop(&mut self) {
        for r in [self.sp.leaf, self.sp.sibling, self.sp.internal, self.sp.desc] {
            if !r.is_null() {
                self.h.unallocate(r);
            }
        }
    }
}

#[derive(Copy, Clone)]
enum DeleteOutcome {
    Deleted,
    Absent,
    Failed,
}

/// Finds the leaf where `key` belongs with its parent and grandparent. Under
/// hazard pointers those three stay protected; `None` means a validation
/// failed and the operation must restart.
fn search<R, P, A>(h: &mut H<'_, R, P, A>, root: *mut Rec, key: u64, stats: &mut OpStats) -> Result<Option<Found>, Neutralized>
where
    R: Reclaimer<Node>,
    P: Pool<Node>,
    A: Allocator<Node>,
{
    let mut s = Found { gp: ptr::null_mut(), p: ptr::null_mut(), l: root, gpupdate: 0, pupdate: 0 };
    while node(s.l).kind == INTERNAL {
        h.poll()?;
        let dropped = s.gp;
        s.gp = s.p;
        s.gpupdate = s.pupdate;
        s.p = s.l;
        let p = node(s.p);
        s.pupdate = p.update.load(SeqCst);
        let link = p.child(key);
        let c = link.load(SeqCst);
        if R::USES_HAZARD_POINTERS {
            stats.validations += 1;
            let ok = h.protect(c, || link.load(SeqCst) == c && state(p.update.load(SeqCst)) != MARK);
            if !ok {
                return Ok(None);
            }
            if !dropped.is_null() {
                h.unprotect(dropped);
            }
        }
        h.check(c);
        s.l = c;
    }
    Ok(Some(s))
}

fn insert_body<R, P, A>(
    h: &mut H<'_, R, P, A>,
    root: *mut Rec,
    key: u64,
    value: u64,
    sp: &Spares,
    stats: &mut OpStats,
) -> Result<Step<bool>, Neutralized>
where
    R: Reclaimer<Node>,
    P: Pool<Node>,
    A: Allocator<Node>,
{
    let Some(s) = search(h, root, key, stats)? else {
        return Ok(Step::Retry);
    };
    let l = node(s.l);
    if l.key == key {
        return Ok(Step::Done(false));
    }
    if state(s.pupdate) != CLEAN {
        help_word(h, &s, s.p, s.pupdate, stats)?;
        return Ok(Step::Retry);
    }
    unsafe {
        Record::reinit(sp.leaf, Node::leaf(key, value));
        Record::reinit(sp.sibling, Node::leaf(l.key, l.value));
        let (a, b) = if key < l.key { (sp.leaf, sp.sibling) } else { (sp.sibling, sp.leaf) };
        Record::reinit(sp.internal, Node::internal(key.max(l.key), a, b));
        Record::reinit(sp.desc, Node::insert_desc(s.p, s.l, sp.internal, s.pupdate));
    }
    if R::SUPPORTS_CRASH_RECOVERY {
        h.rprotect(s.p);
        h.rprotect(s.l);
        h.rprotect(sp.internal);
        h.rprotect(sp.desc);
    }
    let done = help(h, sp.desc, !R::USES_HAZARD_POINTERS, stats)?;
    Ok(if done { Step::Done(true) } else { Step::Retry })
}

fn delete_body<R, P, A>(
    h: &mut H<'_, R, P, A>,
    root: *mut Rec,
    key: u64,
    desc: *mut Rec,
    stats: &mut OpStats,
) -> Result<Step<DeleteOutcome>, Neutralized>
where
    R: Reclaimer<Node>,
    P: Pool<Node>,
    A: Allocator<Node>,
{
    let Some(s) = search(h, root, key, stats)? else {
        return Ok(Step::Retry);
    };
    if node(s.l).key != key {
        return Ok(Step::Done(DeleteOutcome::Absent));
    }
    if state(s.gpupdate) != CLEAN {
        help_word(h, &s, s.gp, s.gpupdate, stats)?;
        return Ok(Step::Retry);
    }
    if state(s.pupdate) != CLEAN {
        help_word(h, &s, s.p, s.pupdate, stats)?;
        return Ok(Step::Retry);
    }
    unsafe { Record::reinit(desc, Node::delete_desc(s.gp, s.p, s.l, s.gpupdate, s.pupdate)) };
    if R::SUPPORTS_CRASH_RECOVERY {
        h.rprotect(s.gp);
        h.rprotect(s.p);
        h.rprotect(s.l);
        h.rprotect(desc);
    }
    Ok(match help(h, desc, !R::USES_HAZARD_POINTERS, stats)? {
        true => Step::Done(DeleteOutcome::Deleted),
        // A failed delete may have flagged gp before backing out.
        false => Step::Done(DeleteOutcome::Failed),
    })
}

/// Helps whatever operation owns the non-clean word `w`, read from `holder`.
fn help_word<R, P, A>(h: &mut H<'_, R, P, A>, s: &Found, holder: *mut Rec, w: u64, stats: &mut OpStats) -> Result<(), Neutralized>
where
    R: Reclaimer<Node>,
    P: Pool<Node>,
    A: Allocator<Node>,
{
    stats.helps += 1;
    if !R::USES_HAZARD_POINTERS {
        help(h, desc_of(w), false, stats)?;
        return Ok(());
    }
    // A mark is permanent, so it cannot validate anything. Go through the
    // grandparent's flag for the same descriptor instead.
    let (holder, w) = if state(w) == MARK {
        if s.gp.is_null() || s.gpupdate != flagged(DFLAG, desc_of(w)) {
            return Ok(());
        }
        (s.gp, s.gpupdate)
    } else {
        (holder, w)
    };
    let still = || node(holder).update.load(SeqCst) == w;
    let d = desc_of(w);
    stats.validations += 1;
    if !h.protect(d, still) {
        return Ok(());
    }
    let dn = node(d);
    let nodes = match dn.kind {
        INSERT => [dn.p.load(Relaxed), dn.l.load(Relaxed), ptr::null_mut()],
        _ => [dn.gp.load(Relaxed), dn.p.load(Relaxed), dn.l.load(Relaxed)],
    };
    let mut held = 0;
    for &x in nodes.iter().filter(|x| !x.is_null()) {
        stats.validations += 1;
        if !h.protect(x, still) {
            break;
        }
        held += 1;
    }
    let all = nodes.iter().filter(|x| !x.is_null()).count();
    let out = if held == all { help(h, d, false, stats).map(|_| ()) } else { Ok(()) };
    if out.is_ok() {
        for &x in nodes.iter().take(held) {
            h.unprotect(x);
        }
        h.unprotect(d);
    }
    out
}

/// Drives descriptor `d` to completion. Idempotent; returns whether the
/// operation took effect. `nested` allows helping a conflicting operation
/// before backing out of a failed delete.
fn help<R, P, A>(h: &mut H<'_, R, P, A>, d: *mut Rec, nested: bool, stats: &mut OpStats) -> Result<bool, Neutralized>
where
    R: Reclaimer<Node>,
    P: Pool<Node>,
    A: Allocator<Node>,
{
    h.check(d);
    let dn = node(d);
    let status = dn.status.load(SeqCst);
    if status != PENDING {
        // The outcome is decided, but whoever decided it may have stopped
        // before removing the flag.
        if dn.kind == INSERT {
            cas(&node(dn.p.load(Relaxed)).update, flagged(IFLAG, d), next_clean(dn.pupdate));
        } else {
            cas(&node(dn.gp.load(Relaxed)).update, flagged(DFLAG, d), next_clean(dn.gpupdate));
        }
        return Ok(status == DONE);
    }
    if dn.kind == INSERT {
        help_insert(h, d)
    } else {
        help_delete(h, d, nested, stats)
    }
}

/// Settles a descriptor whose flag is not (or no longer) installed.
fn settle(dn: &Node) -> bool {
    match dn.status.compare_exchange(PENDING, FAILED, SeqCst, SeqCst) {
        Ok(_) => false,
        Err(s) => s == DONE,
    }
}

fn cas_child(parent: *mut Rec, old: *mut Rec, new: *mut Rec, key: u64) {
    let _ = node(parent).child(key).compare_exchange(old, new, SeqCst, SeqCst);
}

fn help_insert<R, P, A>(h: &mut H<'_, R, P, A>, d: *mut Rec) -> Result<bool, Neutralized>
where
    R: Reclaimer<Node>,
    P: Pool<Node>,
    A: Allocator<Node>,
{
    let dn = node(d);
    let (p, l) = (dn.p.load(Relaxed), dn.l.load(Relaxed));
    h.check(p);
    let flag = flagged(IFLAG, d);
    let w = cas(&node(p).update, dn.pupdate, flag);
    if w != dn.pupdate && w != flag {
        return Ok(settle(dn));
    }
    h.poll()?;
    h.check(l);
    cas_child(p, l, dn.new.load(Relaxed), node(l).key);
    h.poll()?;
    let _ = dn.status.compare_exchange(PENDING, DONE, SeqCst, SeqCst);
    h.poll()?;
    cas(&node(p).update, flag, next_clean(dn.pupdate));
    Ok(true)
}

fn help_delete<R, P, A>(h: &mut H<'_, R, P, A>, d: *mut Rec, nested: bool, stats: &mut OpStats) -> Result<bool, Neutralized>
where
    R: Reclaimer<Node>,
    P: Pool<Node>,
    A: Allocator<Node>,
{
    let dn = node(d);
    let (gp, p, l) = (dn.gp.load(Relaxed), dn.p.load(Relaxed), dn.l.load(Relaxed));
    h.check(gp);
    let dflag = flagged(DFLAG, d);
    let w = cas(&node(gp).update, dn.gpupdate, dflag);
    if w != dn.gpupdate && w != dflag {
        return Ok(settle(dn));
    }
    h.poll()?;
    h.check(p);
    let mark = flagged(MARK, d);
    let m = cas(&node(p).update, dn.pupdate, mark);
    if m == dn.pupdate || m == mark {
        h.poll()?;
        let pn = node(p);
        let other = if pn.right.load(SeqCst) == l { pn.left.load(SeqCst) } else { pn.right.load(SeqCst) };
        h.check(l);
        cas_child(gp, p, other, node(l).key);
        h.poll()?;
        let _ = dn.status.compare_exchange(PENDING, DONE, SeqCst, SeqCst);
        h.poll()?;
        cas(&node(gp).update, dflag, next_clean(dn.gpupdate));
        return Ok(true);
    }
    // p moved on; this attempt can never succeed. Fail before unflagging so
    // late helpers agree on the outcome.
    let _ = dn.status.compare_exchange(PENDING, FAILED, SeqCst, SeqCst);
    h.poll()?;
    cas(&node(gp).update, dflag, next_clean(dn.gpupdate));
    if nested && state(m) != CLEAN {
        stats.helps += 1;
        help(h, desc_of(m), false, stats)?;
    }
    Ok(dn.status.load(SeqCst) == DONE)
}
