use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use debra_bench::{
    emit, run_trial, AllocKind, Mix, PoolKind, ReclaimerKind, StallPoint, TransportKind, WorkloadSpec,
};

/// Runs lock-free BST trials under a chosen reclaimer and writes CSV and JSON
/// results. Exits nonzero if any trial fails a safety check.
#[derive(Parser, Debug)]
#[command(name = "smr-bench", version)]
struct Cli {
    #[arg(long, value_enum, default_value_t = ReclaimerKind::Debra)]
    reclaimer: ReclaimerKind,
    #[arg(long, value_enum, default_value_t = AllocKind::Bump)]
    allocator: AllocKind,
    #[arg(long, value_enum, default_value_t = PoolKind::Perthread)]
    pool: PoolKind,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Timed phase length in seconds.
    #[arg(long, default_value_t = 2.0)]
    duration: f64,
    /// Keys are drawn from [0, K).
    #[arg(long, default_value_t = 10_000)]
    keyrange: u64,
    /// Insert:delete:search percentages.
    #[arg(long, default_value = "50:50:0")]
    mix: Mix,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    trials: usize,
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Skip filling the tree to half the key range before timing.
    #[arg(long)]
    no_prefill: bool,
    /// Seconds into the timed phase at which block reuse counters restart.
    #[arg(long, default_value_t = 0.0)]
    warmup: f64,
    #[arg(long, requires_all = ["stall_point", "stall_ms"])]
    stall_thread: Option<usize>,
    #[arg(long, value_enum, requires = "stall_thread")]
    stall_point: Option<StallPoint>,
    #[arg(long, requires = "stall_thread")]
    stall_ms: Option<u64>,
    /// Check record headers on every access and quarantine released records.
    #[arg(long)]
    poison: bool,
    #[arg(long, value_enum, default_value_t = TransportKind::Signal)]
    transport: TransportKind,
    #[arg(long, default_value_t = 1)]
    check_thresh: u64,
    #[arg(long, default_value_t = 100)]
    incr_thresh: u64,
    /// Records per block.
    #[arg(long, default_value_t = 256)]
    block_size: usize,
    #[arg(long, default_value_t = 16)]
    block_pool_cap: usize,
    /// DEBRA+: limbo bag size in blocks that triggers neutralization.
    #[arg(long, default_value_t = 4)]
    neutralize_threshold_blocks: usize,
    /// DEBRA+: limbo bag size in blocks that triggers a protection scan.
    #[arg(long)]
    scan_threshold_blocks: Option<usize>,
    #[arg(long, default_value_t = 8)]
    rprotect_capacity: usize,
    #[arg(long, default_value_t = 8)]
    hp_k: usize,
    #[arg(long)]
    hp_threshold: Option<usize>,
    /// Bump allocator region per thread, in MiB of address space.
    #[arg(long, default_value_t = 4096)]
    bump_mib: usize,
    /// Consecutive restarts after which an operation aborts the trial.
    #[arg(long, default_value_t = debra_bst::DEFAULT_WATCHDOG)]
    watchdog: u64,
    /// Pin worker i to CPU i mod cores.
    #[arg(long)]
    pin: bool,
    /// Track the exact total-limbo high-water mark.
    #[arg(long)]
    track_limbo: bool,
}

impl Cli {
    fn spec(&self) -> WorkloadSpec {
        WorkloadSpec {
            reclaimer: self.reclaimer,
            allocator: self.allocator,
            pool: self.pool,
            threads: self.threads,
            duration_seconds: self.duration,
            key_range: self.keyrange,
            mix: self.mix,
            seed: self.seed,
            prefill: !self.no_prefill,
            warmup_seconds: self.warmup,
            stall_thread: self.stall_thread,
            stall_point: self.stall_point,
            stall_ms: self.stall_ms,
            poison: self.poison,
            transport: self.transport,
            check_thresh: self.check_thresh,
            incr_thresh: self.incr_thresh,
            block_size: self.block_size,
            block_pool_cap: self.block_pool_cap,
            neutralize_threshold_blocks: self.neutralize_threshold_blocks,
            scan_threshold_blocks: self.scan_threshold_blocks,
            rprotect_capacity: self.rprotect_capacity,
            hp_k: self.hp_k,
            hp_threshold: self.hp_threshold,
            bump_mib: self.bump_mib,
            watchdog: self.watchdog,
            pin: self.pin,
            track_limbo: self.track_limbo,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let spec = cli.spec();
    if let Err(e) = spec.validate() {
        eprintln!("smr-bench: {e}");
        return ExitCode::from(2);
    }
    // Progress lines are best effort: a closed pipe must not abort the run.
    let mut out = std::io::stdout().lock();
    let mut rows = Vec::new();
    for i in 0..cli.trials {
        let r = run_trial(&spec, i);
        let _ = writeln!(
            out,
            "trial {i}: {} {:.0} ops/s, limbo hwm {}, neutralized {}, faults {}{}",
            if r.passed { "ok" } else { "FAILED" },
            r.throughput,
            r.limbo_high_water,
            r.neutralizations,
            r.poison_faults,
            r.failure.as_deref().map(|f| format!(" ({f})")).unwrap_or_default(),
        );
        rows.push((spec.clone(), r));
    }
    match emit(&cli.out, &rows) {
        Ok((csv, json)) => {
            let _ = writeln!(out, "wrote {} and {}", csv.display(), json.display());
        }
        Err(e) => {
            eprintln!("smr-bench: {e:#}");
            return ExitCode::from(2);
        }
    }
    if rows.iter().all(|(_, r)| r.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
