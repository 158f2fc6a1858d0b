use std::sync::atomic::{AtomicBool, AtomicU8, AtomicUsize, Ordering};
use std::sync::Barrier;
use std::thread;
use std::time::{Duration, Instant};

use debra::{
    Allocator, BumpAllocator, ClassicEbr, Debra, DebraPlus, HazardPointers, HandleStats, NoPool,
    NoReclaim, PerThreadPool, Pool, Reclaimer, ReclaimerCounters, SystemAllocator,
};
use debra_bst::{Bst, BstError, Node, OpStats, StallAt};
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::spec::{AllocKind, PoolKind, ReclaimerKind, StallPoint, WorkloadSpec};

const MONITOR_PERIOD: Duration = Duration::from_millis(10);

/// Measurements from one trial. Counts cover the timed phase unless noted.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub passed: bool,
    pub failure: Option<String>,
    /// Operation and reclaimer counters below cover the timed phase only.
    pub elapsed_seconds: f64,
    pub throughput: f64,
    pub ops: u64,
    pub inserts: u64,
    pub inserted: u64,
    pub deletes: u64,
    pub deleted: u64,
    pub searches: u64,
    pub found: u64,
    pub restarts: u64,
    pub helps: u64,
    pub validations: u64,
    /// Record bytes handed out by the allocator during the timed phase.
    pub peak_allocated_bytes: u64,
    /// Sum over processes of each one's largest limbo size, prefill included.
    pub limbo_high_water: u64,
    /// Largest total limbo size seen by the 10 ms monitor.
    pub limbo_sampled_max: u64,
    /// Exact largest total limbo size during the timed phase, when tracked.
    pub limbo_total_high_water: Option<u64>,
    pub neutralizations: u64,
    pub neutralizations_sent: u64,
    pub epoch_advances: u64,
    /// Epoch advances between the start of the injected stall and the end of
    /// the timed phase.
    pub epoch_advances_during_stall: Option<u64>,
    pub retire_calls: u64,
    pub retire_block_ops: u64,
    pub leave_calls: u64,
    pub foreign_reads: u64,
    pub block_acquisitions: u64,
    pub block_allocations: u64,
    pub block_acquisitions_after_warmup: u64,
    pub block_allocations_after_warmup: u64,
    pub records_allocated: u64,
    pub records_freed: u64,
    pub records_limbo: u64,
    pub records_pooled: u64,
    pub records_leaked: u64,
    pub records_reachable: u64,
    pub accounting_closed: bool,
    pub poison_faults: u64,
    pub first_fault: Option<String>,
}

impl TrialResult {
    fn failed(trial: usize, why: String) -> Self {
        TrialResult { trial, failure: Some(why), ..TrialResult::default() }
    }
}

/// Runs one trial of `spec`, choosing the record manager from its fields.
/// Trial `i` draws its operation streams from seed `spec.seed + i`.
pub fn run_trial(spec: &WorkloadSpec, trial: usize) -> TrialResult {
    if let Err(e) = spec.validate() {
        return TrialResult::failed(trial, e);
    }
    macro_rules! with_pool_alloc {
        ($r:ty) => {
            match (spec.pool, spec.allocator) {
                (PoolKind::Perthread, AllocKind::Bump) => {
                    run::<$r, PerThreadPool<Node>, BumpAllocator<Node>>(spec, trial)
                }
                (PoolKind::Perthread, AllocKind::System) => {
                    run::<$r, PerThreadPool<Node>, SystemAllocator<Node>>(spec, trial)
                }
                (PoolKind::None, AllocKind::Bump) => run::<$r, NoPool, BumpAllocator<Node>>(spec, trial),
                (PoolKind::None, AllocKind::System) => run::<$r, NoPool, SystemAllocator<Node>>(spec, trial),
            }
        };
    }
    match spec.reclaimer {
        ReclaimerKind::None => with_pool_alloc!(NoReclaim<Node>),
        ReclaimerKind::Ebr => with_pool_alloc!(ClassicEbr<Node>),
        ReclaimerKind::Debra => with_pool_alloc!(Debra<Node>),
        ReclaimerKind::DebraPlus => with_pool_alloc!(DebraPlus<Node>),
        ReclaimerKind::Hp => with_pool_alloc!(HazardPointers<Node>),
    }
}

/// Per-thread generator: xoshiro256++ seeded through splitmix64 from the
/// trial seed, the thread id and the stream.
pub fn thread_rng(seed: u64, thread: usize, stream: u64) -> Xoshiro256PlusPlus {
    let mix = seed
        ^ (thread as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
    Xoshiro256PlusPlus::seed_from_u64(mix)
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum OpKind {
    Insert,
    Delete,
    Search,
}

/// The next operation of a thread's stream.
#[inline]
pub fn next_op(rng: &mut Xoshiro256PlusPlus, spec: &WorkloadSpec) -> (OpKind, u64) {
    let r = rng.random_range(0..100u8);
    let key = rng.random_range(0..spec.key_range);
    let kind = if r < spec.mix.insert {
        OpKind::Insert
    } else if r < spec.mix.insert + spec.mix.delete {
        OpKind::Delete
    } else {
        OpKind::Search
    };
    (kind, key)
}

fn pin(thread: usize) {
    unsafe {
        let cpus = libc::sysconf(libc::_SC_NPROCESSORS_ONLN).max(1) as usize;
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_SET(thread % cpus, &mut set);
        libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set);
    }
}

#[derive(Default)]
struct WorkerOut {
    ops: OpStats,
    smr: HandleStats,
    /// Epoch when the injected stall began.
    stall_epoch: Option<u64>,
    error: Option<String>,
}

fn run<R, P, A>(spec: &WorkloadSpec, trial: usize) -> TrialResult
where
    R: Reclaimer<Node>,
    P: Pool<Node>,
    A: Allocator<Node>,
{
    let mut tree = match Bst::<R, P, A>::new(spec.threads, spec.smr_config()) {
        Ok(t) => t.with_watchdog(spec.watchdog),
        Err(e) => return TrialResult::failed(trial, e.to_string()),
    };
    let seed = spec.seed.wrapping_add(trial as u64);
    let stop = AtomicBool::new(false);
    let stall_stop = AtomicU8::new(0);
    let prefilled = Barrier::new(spec.threads + 1);
    let go = Barrier::new(spec.threads + 1);
    let turn = AtomicUsize::new(0);
    let mut res = TrialResult { trial, ..TrialResult::default() };

    let outs = thread::scope(|s| {
        let tree = &tree;
        let (stop, stall_stop, prefilled, go, turn) = (&stop, &stall_stop, &prefilled, &go, &turn);
        let workers: Vec<_> = (0..spec.threads)
            .map(|t| {
                s.spawn(move || {
                    if spec.pin {
                        pin(t);
                    }
                    let mut h = tree.handle(t);
                    let mut out = WorkerOut::default();
                    let fail = |out: &mut WorkerOut, e: BstError| {
                        out.error = Some(format!("thread {t}: {e}"));
                        stop.store(true, Ordering::Release);
                    };
                    if spec.prefill {
                        // One worker at a time, so the others sit quiescent and
                        // every limbo bag is small when the timed phase starts.
                        while turn.load(Ordering::Acquire) != t {
                            thread::yield_now();
                        }
                        let share = spec.key_range / 2 / spec.threads as u64
                            + u64::from((t as u64) < spec.key_range / 2 % spec.threads as u64);
                        let mut rng = thread_rng(seed, t, 1);
                        let mut have = 0;
                        while have < share && !stop.load(Ordering::Relaxed) {
                            let k = rng.random_range(0..spec.key_range);
                            match h.insert(k, k) {
                                Ok(true) => have += 1,
                                Ok(false) => {}
                                Err(e) => {
                                    fail(&mut out, e);
                                    break;
                                }
                            }
                        }
                        turn.store(t + 1, Ordering::Release);
                    }
                    let before = h.stats();
                    let smr_before = h.smr().stats().reclaimer;
                    prefilled.wait();
                    go.wait();
                    if let Some((victim, point, ms)) = spec.stall() {
                        if victim == t {
                            let at = match point {
                                StallPoint::MidBody => StallAt::MidBody,
                                StallPoint::Quiescent => StallAt::Quiescent,
                                StallPoint::Descheduled => StallAt::Descheduled,
                            };
                            out.stall_epoch = Some(tree.manager().epoch());
                            h.stall(at, Duration::from_millis(ms), stall_stop);
                        }
                    }
                    let mut rng = thread_rng(seed, t, 0);
                    while !stop.load(Ordering::Relaxed) {
                        let (kind, key) = next_op(&mut rng, spec);
                        let r = match kind {
                            OpKind::Insert => h.insert(key, key).map(drop),
                            OpKind::Delete => h.delete(key).map(drop),
                            OpKind::Search => h.search(key).map(drop),
                        };
                        if let Err(e) = r {
                            fail(&mut out, e);
                            break;
                        }
                    }
                    out.ops = sub_ops(h.stats(), before);
                    out.smr = h.smr().stats();
                    out.smr.reclaimer = sub_counters(out.smr.reclaimer, smr_before);
                    out
                })
            })
            .collect();

        prefilled.wait();
        let mgr = tree.manager();
        let alloc0 = mgr.alloc_stats();
        let blocks0 = mgr.block_stats();
        let epoch0 = mgr.epoch();
        mgr.reset_limbo_total_high_water();
        let start = Instant::now();
        go.wait();
        let duration = Duration::from_secs_f64(spec.duration_seconds);
        let warmup = Duration::from_secs_f64(spec.warmup_seconds);
        let mut warm_blocks = (spec.warmup_seconds <= 0.0).then_some(blocks0);
        let mut sampled = 0;
        loop {
            let now = start.elapsed();
            sampled = sampled.max(mgr.limbo_snapshot());
            if warm_blocks.is_none() && now >= warmup {
                warm_blocks = Some(mgr.block_stats());
            }
            if now >= duration || stop.load(Ordering::Relaxed) {
                break;
            }
            thread::sleep(MONITOR_PERIOD.min(duration - now));
        }
        let epoch1 = mgr.epoch();
        stop.store(true, Ordering::Release);
        stall_stop.store(1, Ordering::Release);
        let mut outs: Vec<WorkerOut> = workers.into_iter().map(|w| w.join().expect("worker panicked")).collect();
        res.elapsed_seconds = start.elapsed().as_secs_f64();
        let alloc1 = mgr.alloc_stats();
        let blocks1 = mgr.block_stats();
        let warm = warm_blocks.unwrap_or(blocks1);
        res.peak_allocated_bytes = alloc1.allocated_bytes - alloc0.allocated_bytes;
        res.block_acquisitions = blocks1.acquired - blocks0.acquired;
        res.block_allocations = blocks1.allocated - blocks0.allocated;
        res.block_acquisitions_after_warmup = blocks1.acquired - warm.acquired;
        res.block_allocations_after_warmup = blocks1.allocated - warm.allocated;
        res.limbo_sampled_max = sampled as u64;
        res.limbo_total_high_water = spec.track_limbo.then(|| mgr.limbo_total_high_water() as u64);
        res.epoch_advances = (epoch1 - epoch0) / 2;
        res.epoch_advances_during_stall = outs
            .iter_mut()
            .find_map(|o| o.stall_epoch.take())
            .map(|e| epoch1.saturating_sub(e) / 2);
        outs
    });

    for o in &outs {
        let (ops, smr) = (&o.ops, &o.smr);
        res.inserts += ops.inserts;
        res.inserted += ops.inserted;
        res.deletes += ops.deletes;
        res.deleted += ops.deleted;
        res.searches += ops.searches;
        res.found += ops.found;
        res.restarts += ops.restarts;
        res.helps += ops.helps;
        res.validations += ops.validations;
        res.limbo_high_water += smr.limbo_high_water as u64;
        res.neutralizations += smr.reclaimer.neutralized;
        res.neutralizations_sent += smr.reclaimer.neutralizations_sent;
        res.retire_calls += smr.reclaimer.retire_calls;
        res.retire_block_ops += smr.reclaimer.retire_block_ops;
        res.leave_calls += smr.reclaimer.leave_calls;
        res.foreign_reads += smr.reclaimer.foreign_reads;
    }
    res.ops = res.inserts + res.deletes + res.searches;
    res.throughput = res.ops as f64 / res.elapsed_seconds;
    let errors: Vec<String> = outs.into_iter().filter_map(|o| o.error).collect();

    let mut failures = errors;
    match tree.audit() {
        Ok(audit) => {
            let census = tree.census();
            res.records_allocated = census.allocated;
            res.records_freed = census.freed;
            res.records_limbo = census.limbo;
            res.records_pooled = census.pooled;
            res.records_leaked = census.leaked;
            res.records_reachable = audit.reachable() as u64;
            res.accounting_closed = census.outstanding() == audit.reachable() as i64;
            if !res.accounting_closed {
                failures.push(format!(
                    "accounting: {} outstanding records but {} reachable",
                    census.outstanding(),
                    audit.reachable()
                ));
            }
        }
        Err(e) => failures.push(format!("tree audit: {e}")),
    }
    let faults = tree.manager().faults();
    res.poison_faults = faults.count();
    res.first_fault = faults.first().map(|f| format!("{f:?}"));
    if res.poison_faults > 0 {
        failures.push(format!("{} poison faults", res.poison_faults));
    }
    res.passed = failures.is_empty();
    res.failure = (!failures.is_empty()).then(|| failures.join("; "));
    res
}

fn sub_ops(a: OpStats, b: OpStats) -> OpStats {
    OpStats {
        inserts: a.inserts - b.inserts,
        inserted: a.inserted - b.inserted,
        deletes: a.deletes - b.deletes,
        deleted: a.deleted - b.deleted,
        searches: a.searches - b.searches,
        found: a.found - b.found,
        restarts: a.restarts - b.restarts,
        helps: a.helps - b.helps,
        validations: a.validations - b.validations,
        neutralized: a.neutralized - b.neutralized,
        recovered: a.recovered - b.recovered,
    }
}

fn sub_counters(a: ReclaimerCounters, b: ReclaimerCounters) -> ReclaimerCounters {
    ReclaimerCounters {
        leave_calls: a.leave_calls - b.leave_calls,
        foreign_reads: a.foreign_reads - b.foreign_reads,
        retire_calls: a.retire_calls - b.retire_calls,
        retire_block_ops: a.retire_block_ops - b.retire_block_ops,
        rotations: a.rotations - b.rotations,
        epoch_advances: a.epoch_advances - b.epoch_advances,
        scans: a.scans - b.scans,
        released_records: a.released_records - b.released_records,
        neutralizations_sent: a.neutralizations_sent - b.neutralizations_sent,
        neutralized: a.neutralized - b.neutralized,
    }
}
