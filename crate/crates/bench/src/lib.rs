//! Benchmark and safety harness for the reclaimers, driving the lock-free BST.
//!
//! A trial prefills the tree to half its key range, then runs a timed phase
//! in which every thread performs random operations from its own seeded
//! stream. Afterwards the tree is audited and the record manager's census
//! must account for every record.

mod output;
mod spec;
mod trial;

pub use output::{averages, csv_header, emit, to_json, write_csv, SCHEMA};
pub use spec::{AllocKind, Mix, PoolKind, ReclaimerKind, StallPoint, TransportKind, WorkloadSpec};
pub use trial::{next_op, run_trial, thread_rng, OpKind, TrialResult};

/// Runs `trials` trials of `spec` back to back.
pub fn run_trials(spec: &WorkloadSpec, trials: usize) -> Vec<(WorkloadSpec, TrialResult)> {
    (0..trials).map(|i| (spec.clone(), run_trial(spec, i))).collect()
}

/// Hardware threads available to this process.
pub fn cores() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}
