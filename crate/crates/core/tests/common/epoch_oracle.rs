//! Sequential model of DEBRA's leave/enter/retire logic, written directly from
//! the published pseudocode, and a replayer that drives the real reclaimer
//! through the same random trace while comparing transcripts step by step.

use debra::{Debra, NoPool, RecordManager, SmrConfig, SystemAllocator};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

type Mgr = RecordManager<u64, Debra<u64>, NoPool, SystemAllocator<u64>>;

#[derive(Clone, Debug, Default)]
struct ModelProc {
    bags: [Vec<(u64, u64)>; 3],
    index: usize,
    check_next: u64,
    ops_since_check: u64,
    changes: u64,
}

/// The oracle. Records are `(id, announcement changes at retire)`.
struct Model {
    n: usize,
    b: usize,
    check: u64,
    incr: u64,
    epoch: u64,
    announce: Vec<u64>,
    procs: Vec<ModelProc>,
    released: u64,
}

#[derive(Debug, PartialEq, Eq)]
struct Step {
    epoch: u64,
    announce: Vec<u64>,
    changed: Option<bool>,
    rotations: Vec<u64>,
    indices: Vec<usize>,
    limbo: Vec<usize>,
    released: u64,
}

impl Model {
    fn new(n: usize, b: usize, check: u64, incr: u64) -> Self {
        Model {
            n,
            b,
            check,
            incr,
            epoch: 0,
            announce: vec![1; n],
            procs: vec![ModelProc::default(); n],
            released: 0,
        }
    }

    fn leave(&mut self, p: usize) -> Result<bool, String> {
        let read = self.epoch;
        let changed = self.announce[p] & !1 != read;
        let me = &mut self.procs[p];
        if changed {
            me.check_next = 0;
            me.ops_since_check = 0;
            me.changes += 1;
            me.index = (me.index + 1) % 3;
            let bag = &mut me.bags[me.index];
            let keep = bag.len() % self.b;
            let cut = bag.len() - keep;
            for (id, at) in bag.drain(..cut) {
                if me.changes < at + 3 {
                    return Err(format!(
                        "record {id} retired at change {at} released at change {}",
                        me.changes
                    ));
                }
                self.released += 1;
            }
        }
        me.ops_since_check += 1;
        if me.ops_since_check >= self.check {
            me.ops_since_check = 0;
            let other = (me.check_next % self.n as u64) as usize;
            let a = self.announce[other];
            if a & !1 == read || a & 1 == 1 {
                me.check_next += 1;
                if me.check_next >= self.n as u64 && me.check_next >= self.incr && self.epoch == read {
                    self.epoch = read + 2;
                }
            }
        }
        self.announce[p] = read;
        Ok(changed)
    }

    fn enter(&mut self, p: usize) {
        self.announce[p] |= 1;
    }

    fn retire(&mut self, p: usize, id: u64) {
        let me = &mut self.procs[p];
        let at = me.changes;
        me.bags[me.index].push((id, at));
    }

    fn step(&self, changed: Option<bool>) -> Step {
        Step {
            epoch: self.epoch,
            announce: self.announce.clone(),
            changed,
            rotations: self.procs.iter().map(|p| p.changes).collect(),
            indices: self.procs.iter().map(|p| p.index).collect(),
            limbo: self.procs.iter().map(|p| p.bags.iter().map(Vec::len).sum()).collect(),
            released: self.released,
        }
    }
}

/// Outcome of one replayed trace.
#[derive(Debug, Default, Clone, Copy)]
pub struct TraceSummary {
    pub advances: u64,
    pub released: u64,
}

/// Replays one random trace of `len` steps over `n` processes. Returns the
/// first transcript mismatch as an error.
pub fn replay(seed: u64, n: usize, len: usize) -> Result<TraceSummary, String> {
    let mut rng = StdRng::seed_from_u64(seed);
    let b = rng.random_range(1..=4usize);
    let check = rng.random_range(1..=3u64);
    let incr = rng.random_range(1..=6u64);
    let cfg = SmrConfig {
        block_size: b,
        check_thresh: check,
        incr_thresh: incr,
        ..SmrConfig::default()
    };
    let mgr = Mgr::new(n, cfg).map_err(|e| e.to_string())?;
    let mut handles: Vec<_> = (0..n).map(|p| mgr.handle(p)).collect();
    let mut model = Model::new(n, b, check, incr);
    let mut in_op = vec![false; n];
    let mut next_id = 0u64;

    let observe = |handles: &Vec<debra::Handle<'_, u64, Debra<u64>, NoPool, SystemAllocator<u64>>>,
                   changed: Option<bool>| Step {
        epoch: mgr.epoch(),
        announce: (0..n).map(|p| mgr.reclaimer().announcement(p)).collect(),
        changed,
        rotations: handles.iter().map(|h| h.stats().reclaimer.rotations).collect(),
        indices: handles.iter().map(|h| h.reclaimer_local().current_index()).collect(),
        limbo: handles.iter().map(|h| h.limbo_len()).collect(),
        released: mgr.alloc_stats().freed_records,
    };

    for i in 0..len {
        let p = rng.random_range(0..n);
        let changed = if in_op[p] {
            model.enter(p);
            handles[p].enter_qstate();
            in_op[p] = false;
            None
        } else if rng.random_bool(0.4) {
            let r = handles[p].allocate(next_id).map_err(|e| e.to_string())?;
            model.retire(p, next_id);
            handles[p].retire(r);
            next_id += 1;
            None
        } else {
            let want = model.leave(p).map_err(|e| format!("seed {seed} step {i}: {e}"))?;
            let got = handles[p].leave_qstate();
            in_op[p] = true;
            if want != got {
                return Err(format!("seed {seed} step {i}: leave returned {got}, oracle {want}"));
            }
            Some(got)
        };
        let want = model.step(changed);
        let got = observe(&handles, changed);
        if want != got {
            return Err(format!(
                "seed {seed} step {i} (pid {p}, B={b}, CHECK={check}, INCR={incr}):\n  oracle {want:?}\n  actual {got:?}"
            ));
        }
    }
    Ok(TraceSummary { advances: model.epoch / 2, released: model.released })
}
