use std::collections::HashSet;
use std::sync::atomic::{AtomicBool, AtomicU8, Ordering};
use std::thread;
use std::time::{Duration, Instant};

use debra::{
    ClassicEbr, Debra, DebraPlus, FaultKind, HazardPointers, NoPool, NoReclaim, PerThreadPool,
    RecordManager, SmrConfig, SystemAllocator, Transport,
};

type Hp = RecordManager<u64, HazardPointers<u64>, NoPool, SystemAllocator<u64>>;
type DebraMgr = RecordManager<u64, Debra<u64>, PerThreadPool<u64>, SystemAllocator<u64>>;
type PlusMgr = RecordManager<u64, DebraPlus<u64>, PerThreadPool<u64>, SystemAllocator<u64>>;
type NoneMgr = RecordManager<u64, NoReclaim<u64>, PerThreadPool<u64>, SystemAllocator<u64>>;
type EbrMgr = RecordManager<u64, ClassicEbr<u64>, PerThreadPool<u64>, SystemAllocator<u64>>;

#[test]
fn static_capability_flags() {
    assert!(PlusMgr::SUPPORTS_CRASH_RECOVERY);
    assert!(!DebraMgr::SUPPORTS_CRASH_RECOVERY);
    assert!(!Hp::SUPPORTS_CRASH_RECOVERY);
    assert!(Hp::USES_HAZARD_POINTERS);
    assert!(!DebraMgr::USES_HAZARD_POINTERS);
}

#[test]
fn epoch_schemes_protect_trivially() {
    let mgr = DebraMgr::new(1, SmrConfig::default()).unwrap();
    let mut h = mgr.handle(0);
    let r = h.allocate(1).unwrap();
    h.leave_qstate();
    let mut called = false;
    assert!(h.protect(r, || {
        called = true;
        false
    }));
    assert!(!called, "validation must not run for epoch schemes");
    assert!(h.is_protected(r));
    h.enter_qstate();
    h.unallocate(r);
}

#[test]
fn none_reclaimer_starts_quiescent_and_leaks() {
    let mut mgr = NoneMgr::new(1, SmrConfig::default()).unwrap();
    {
        let mut h = mgr.handle(0);
        assert!(h.is_quiescent());
        h.leave_qstate();
        assert!(!h.is_quiescent());
        h.enter_qstate();
        for i in 0..1000 {
            let r = h.allocate(i).unwrap();
            h.retire(r);
        }
        assert_eq!(h.stats().allocated_reused, 0);
    }
    let c = mgr.census();
    assert_eq!(c.leaked, 1000);
    assert_eq!(c.outstanding(), 0);
}

#[test]
fn hp_protect_then_quiescence_clears() {
    let mgr = Hp::new(2, SmrConfig { hp_k: 3, ..Default::default() }).unwrap();
    let mut h = mgr.handle(0);
    let r = h.allocate(7).unwrap();
    h.leave_qstate();
    assert!(h.protect(r, || true));
    assert!(h.is_protected(r));
    h.unprotect(r);
    assert!(!h.is_protected(r));
    assert!(h.protect(r, || true));
    h.enter_qstate();
    assert!(!h.is_protected(r));
    h.unallocate(r);
}

#[test]
fn hp_failed_validation_clears_slot() {
    let mgr = Hp::new(2, SmrConfig { hp_k: 3, hp_threshold: Some(1), ..Default::default() }).unwrap();
    let mut a = mgr.handle(0);
    let mut b = mgr.handle(1);
    let r = a.allocate(7).unwrap();
    let reachable = AtomicBool::new(true);
    b.leave_qstate();
    // The record is unlinked between the announcement and the validation read.
    let ok = b.protect(r, || {
        reachable.store(false, Ordering::SeqCst);
        reachable.load(Ordering::SeqCst)
    });
    assert!(!ok);
    assert!(!b.is_protected(r));
    // Nothing announces it now, so retiring with threshold 1 frees it at once.
    a.retire(r);
    assert_eq!(mgr.alloc_stats().freed_records, 1);
    b.enter_qstate();
}

#[test]
#[should_panic(expected = "hazard pointer slots")]
fn hp_slot_overflow_is_a_configuration_error() {
    let mgr = Hp::new(1, SmrConfig { hp_k: 2, ..Default::default() }).unwrap();
    let mut h = mgr.handle(0);
    let rs: Vec<_> = (0..3).map(|i| h.allocate(i).unwrap()).collect();
    h.leave_qstate();
    for &r in &rs {
        h.protect(r, || true);
    }
}

#[test]
fn hp_scan_releases_set_difference() {
    // n=2, k=3, R=12; process 1 announces 3 records, process 0 announces 1.
    let cfg = SmrConfig { hp_k: 3, hp_threshold: Some(12), ..Default::default() };
    let mgr = Hp::new(2, cfg).unwrap();
    let mut a = mgr.handle(0);
    let mut b = mgr.handle(1);
    let recs: Vec<_> = (0..12).map(|i| a.allocate(i).unwrap()).collect();
    a.leave_qstate();
    b.leave_qstate();
    let announced: HashSet<usize> = [1usize, 4, 7, 10].into();
    for &i in &[1usize, 4, 7] {
        assert!(b.protect(recs[i], || true));
    }
    assert!(a.protect(recs[10], || true));
    for &r in &recs[..11] {
        a.retire(r);
    }
    assert_eq!(mgr.alloc_stats().freed_records, 0, "scan ran before the threshold");
    a.retire(recs[11]);
    let want = recs.len() - announced.len();
    assert_eq!(mgr.alloc_stats().freed_records as usize, want);
    assert!(want >= 8);
    assert_eq!(a.limbo_len(), announced.len());
    a.enter_qstate();
    b.enter_qstate();
}

#[test]
fn poison_detects_double_retire_and_double_unallocate() {
    let cfg = SmrConfig { poison: true, ..Default::default() };
    let mgr = DebraMgr::new(1, cfg).unwrap();
    let mut h = mgr.handle(0);
    let r = h.allocate(1).unwrap();
    h.retire(r);
    assert_eq!(mgr.faults().count(), 0);
    h.retire(r);
    assert_eq!(mgr.faults().count(), 1);
    assert_eq!(mgr.faults().first().unwrap().kind, FaultKind::DoubleRetire);
    let s = h.allocate(2).unwrap();
    h.unallocate(s);
    h.unallocate(s);
    assert_eq!(mgr.faults().count(), 2);
}

#[test]
fn poison_detects_access_after_release() {
    let cfg = SmrConfig { poison: true, block_size: 2, incr_thresh: 1, ..Default::default() };
    let mgr = DebraMgr::new(1, cfg).unwrap();
    let mut h = mgr.handle(0);
    let victims: Vec<_> = (0..8).map(|i| h.allocate(i).unwrap()).collect();
    for &r in &victims {
        h.retire(r);
    }
    for _ in 0..8 {
        h.leave_qstate();
        h.enter_qstate();
    }
    assert!(mgr.epoch() >= 6);
    // Some of these have been released; touching them is a use after release.
    let bad = victims.iter().filter(|&&r| !h.check(r)).count();
    assert!(bad > 0);
    assert_eq!(mgr.faults().count() as usize, bad);
    assert_eq!(mgr.faults().first().unwrap().kind, FaultKind::UseAfterRelease);
}

#[test]
fn accounting_closes_after_churn() {
    let cfg = SmrConfig { block_size: 4, ..Default::default() };
    let mut mgr = DebraMgr::new(2, cfg).unwrap();
    let live = thread::scope(|s| {
        let joins: Vec<_> = (0..2)
            .map(|pid| {
                let mgr = &mgr;
                s.spawn(move || {
                    let mut h = mgr.handle(pid);
                    let mut kept = Vec::new();
                    for i in 0..20_000u64 {
                        let r = h.allocate(i).unwrap();
                        h.leave_qstate();
                        h.enter_qstate();
                        if i % 10 == 0 {
                            kept.push(r as usize);
                        } else {
                            h.retire(r);
                        }
                    }
                    kept.len()
                })
            })
            .collect();
        joins.into_iter().map(|j| j.join().unwrap()).sum::<usize>()
    });
    let c = mgr.census();
    assert_eq!(c.outstanding(), live as i64, "{c:?}");
}

#[test]
fn block_pool_reuse_in_steady_state() {
    let mgr = DebraMgr::new(1, SmrConfig::default()).unwrap();
    let mut h = mgr.handle(0);
    let cycle = |h: &mut debra::Handle<'_, _, _, _, _>, i: u64| {
        let r = h.allocate(i).unwrap();
        h.leave_qstate();
        h.enter_qstate();
        h.retire(r);
    };
    for i in 0..100_000 {
        cycle(&mut h, i);
    }
    let warm = mgr.block_stats();
    for i in 0..1_000_000 {
        cycle(&mut h, i);
    }
    let end = mgr.block_stats();
    let acquired = end.acquired - warm.acquired;
    let fresh = end.allocated - warm.allocated;
    assert!(acquired > 1000);
    assert!(
        fresh as f64 <= 0.001 * acquired as f64,
        "{fresh} fresh of {acquired} acquisitions"
    );
}

#[test]
fn quiescent_process_never_blocks_advance() {
    let mgr = DebraMgr::new(2, SmrConfig::default()).unwrap();
    let _idle = mgr.handle(1);
    let mut h = mgr.handle(0);
    for _ in 0..10_000 {
        h.leave_qstate();
        h.enter_qstate();
    }
    assert!(mgr.epoch() >= 2 * 90, "epoch {}", mgr.epoch());
}

#[test]
fn non_quiescent_staller_blocks_advance() {
    let mgr = DebraMgr::new(2, SmrConfig::default()).unwrap();
    let mut stalled = mgr.handle(1);
    stalled.leave_qstate();
    let mut h = mgr.handle(0);
    for _ in 0..10_000 {
        h.leave_qstate();
        h.enter_qstate();
    }
    assert!(mgr.epoch() <= 2, "epoch {}", mgr.epoch());
    stalled.enter_qstate();
}

#[test]
fn ebr_never_releases_before_two_advances() {
    let cfg = SmrConfig { block_size: 1, poison: true, ..Default::default() };
    let mgr = EbrMgr::new(2, cfg).unwrap();
    let mut a = mgr.handle(0);
    let mut b = mgr.handle(1);
    // b holds a reference to r across a's retire.
    let r = a.allocate(5).unwrap();
    b.leave_qstate();
    a.retire(r);
    for _ in 0..100 {
        a.leave_qstate();
        a.enter_qstate();
    }
    assert!(b.check(r));
    assert_eq!(mgr.faults().count(), 0);
    b.enter_qstate();
    for _ in 0..100 {
        a.leave_qstate();
        a.enter_qstate();
    }
    assert!(mgr.epoch() >= 4);
}

#[test]
fn rprotect_stack_semantics() {
    let cfg = SmrConfig { transport: Transport::Cooperative, ..Default::default() };
    let mgr = PlusMgr::new(1, cfg).unwrap();
    let mut h = mgr.handle(0);
    let x = h.allocate(1).unwrap();
    let y = h.allocate(2).unwrap();
    h.leave_qstate();
    h.rprotect(x);
    assert!(h.is_rprotected(x));
    assert!(!h.is_rprotected(y));
    h.enter_qstate();
    h.runprotect_all();
    assert!(!h.is_rprotected(x));
    h.unallocate(x);
    h.unallocate(y);
}

#[test]
#[should_panic(expected = "recovery-protect capacity")]
fn rprotect_overflow_is_a_configuration_error() {
    let cfg = SmrConfig {
        transport: Transport::Cooperative,
        rprotect_capacity: 2,
        ..Default::default()
    };
    let mgr = PlusMgr::new(1, cfg).unwrap();
    let mut h = mgr.handle(0);
    let rs: Vec<_> = (0..3).map(|i| h.allocate(i).unwrap()).collect();
    h.leave_qstate();
    for &r in &rs {
        h.rprotect(r);
    }
}

#[test]
fn debra_plus_scan_spares_rprotected_records() {
    let cfg = SmrConfig {
        transport: Transport::Cooperative,
        block_size: 4,
        scan_threshold_blocks: Some(2),
        incr_thresh: 1,
        poison: true,
        ..Default::default()
    };
    let mgr = PlusMgr::new(2, cfg).unwrap();
    let mut a = mgr.handle(0);
    let mut b = mgr.handle(1);
    let guarded = a.allocate(0).unwrap();
    b.leave_qstate();
    b.rprotect(guarded);
    b.enter_qstate();
    a.retire(guarded);
    for i in 1..400 {
        let r = a.allocate(i).unwrap();
        a.leave_qstate();
        a.enter_qstate();
        a.retire(r);
    }
    assert!(a.stats().reclaimer.scans > 0);
    assert!(a.stats().reclaimer.released_records > 0);
    assert!(b.check(guarded), "an rprotected record was released");
    b.runprotect_all();
    assert_eq!(mgr.faults().count(), 0);
}

#[test]
fn cooperative_neutralization_unblocks_epoch() {
    let cfg = SmrConfig {
        transport: Transport::Cooperative,
        block_size: 8,
        ..Default::default()
    };
    let mgr = PlusMgr::new(2, cfg).unwrap();
    let stop = AtomicBool::new(false);
    let ready = AtomicBool::new(false);
    let neutralized = thread::scope(|s| {
        let victim = s.spawn(|| {
            let mut h = mgr.handle(1);
            h.leave_qstate();
            ready.store(true, Ordering::Release);
            // Stuck in the middle of an operation, but still reaching poll points.
            let mut hits = 0;
            while !stop.load(Ordering::Acquire) {
                if h.poll().is_err() {
                    hits += 1;
                    assert!(h.is_quiescent());
                    h.leave_qstate();
                }
                thread::yield_now();
            }
            h.enter_qstate();
            hits
        });
        while !ready.load(Ordering::Acquire) {
            thread::yield_now();
        }
        let mut h = mgr.handle(0);
        let start = mgr.epoch();
        let deadline = Instant::now() + Duration::from_secs(10);
        let mut i = 0;
        while mgr.epoch() < start + 20 && Instant::now() < deadline {
            let r = h.allocate(i).unwrap();
            h.leave_qstate();
            h.enter_qstate();
            h.retire(r);
            i += 1;
        }
        stop.store(true, Ordering::Release);
        assert!(mgr.epoch() >= start + 20, "epoch stuck at {}", mgr.epoch());
        assert!(h.stats().reclaimer.neutralizations_sent > 0);
        victim.join().unwrap()
    });
    assert!(neutralized > 0);
}

#[test]
fn cooperative_request_to_quiescent_victim_is_a_no_op() {
    let cfg = SmrConfig { transport: Transport::Cooperative, ..Default::default() };
    let mgr = PlusMgr::new(2, cfg).unwrap();
    let mut v = mgr.handle(1);
    mgr.request_neutralization(1);
    assert!(v.poll().is_ok(), "quiescent victim must pass through");
    v.leave_qstate();
    assert!(v.poll().is_ok(), "stale request must not neutralize a new operation");
    mgr.request_neutralization(1);
    assert!(v.poll().is_err());
    assert!(v.is_quiescent());
    assert!(v.poll().is_ok(), "second request during recovery must pass through");
}

#[test]
fn countdown_hook_neutralizes_at_chosen_poll() {
    let cfg = SmrConfig { transport: Transport::Cooperative, ..Default::default() };
    let mgr = PlusMgr::new(1, cfg).unwrap();
    let mut h = mgr.handle(0);
    h.neutralize_after_polls(Some(2));
    let mut polls = 0;
    let out: Result<(), _> = h.run_body(|h| {
        loop {
            h.poll()?;
            polls += 1;
        }
    });
    assert!(out.is_err());
    assert_eq!(polls, 2);
    assert!(h.is_quiescent());
    let ok = h.run_body(|h| {
        h.poll()?;
        Ok(5)
    });
    assert_eq!(ok, Ok(5));
}

#[test]
fn signal_neutralization_of_stalled_body() {
    let cfg = SmrConfig { block_size: 8, ..Default::default() };
    let mgr = PlusMgr::new(2, cfg).unwrap();
    let stop = AtomicU8::new(0);
    let ready = AtomicBool::new(false);
    let outcome = thread::scope(|s| {
        let victim = s.spawn(|| {
            let mut h = mgr.handle(1);
            let out: Result<(), _> = h.run_body(|h| {
                ready.store(true, Ordering::Release);
                h.stall(Duration::from_secs(30), &stop);
                Ok(())
            });
            (out, h.is_quiescent(), h.stats().reclaimer.neutralized)
        });
        while !ready.load(Ordering::Acquire) {
            thread::yield_now();
        }
        let mut h = mgr.handle(0);
        let start = mgr.epoch();
        let deadline = Instant::now() + Duration::from_secs(10);
        let mut i = 0;
        while mgr.epoch() < start + 10 && Instant::now() < deadline {
            let r = h.allocate(i).unwrap();
            h.leave_qstate();
            h.enter_qstate();
            h.retire(r);
            i += 1;
        }
        let advanced = mgr.epoch() - start;
        stop.store(1, Ordering::Release);
        (advanced, victim.join().unwrap())
    });
    let (advanced, (out, quiescent, neutralized)) = outcome;
    assert!(advanced >= 10, "epoch advanced by {advanced}");
    assert!(out.is_err());
    assert!(quiescent);
    assert_eq!(neutralized, 1);
}

#[test]
fn signal_to_quiescent_thread_passes_through() {
    let mgr = PlusMgr::new(1, SmrConfig::default()).unwrap();
    let mut h = mgr.handle(0);
    // Binds this thread to pid 0 and leaves it quiescent.
    assert_eq!(h.run_body(|_| Ok(1)), Ok(1));
    let me = unsafe { libc::pthread_self() };
    assert_eq!(unsafe { libc::pthread_kill(me, debra::neutralize::NEUTRALIZE_SIGNAL) }, 0);
    assert!(h.is_quiescent());
    assert_eq!(h.stats().reclaimer.neutralized, 0);
    assert_eq!(h.run_body(|_| Ok(2)), Ok(2));
}
