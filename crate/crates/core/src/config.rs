/// How DEBRA+ delivers a neutralization to a stalled process.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum Transport {
    /// POSIX signal plus a saved checkpoint; works on processes that never
    /// reach another poll point.
    Signal,
    /// Request/acknowledge counters checked at poll points. Deterministic, but
    /// a process that stops polling is never neutralized.
    Cooperative,
}

impl Transport {
    pub fn as_str(self) -> &'static str {
        match self {
            Transport::Signal => "signal",
            Transport::Cooperative => "coop",
        }
    }
}

/// Tuning knobs shared by every reclaimer, pool and allocator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SmrConfig {
    /// Records per block (`B`).
    pub block_size: usize,
    /// Empty blocks cached per process.
    pub block_pool_cap: usize,
    /// Full blocks a pool bag may hold before it spills to the shared bag.
    pub spill_threshold_blocks: usize,
    /// `leave_qstate` calls per announcement read.
    pub check_thresh: u64,
    /// Confirmations needed before the epoch may be advanced.
    pub incr_thresh: u64,
    /// DEBRA+: current limbo bag size (in blocks) that triggers neutralization.
    pub suspect_threshold_blocks: usize,
    /// DEBRA+: limbo bag size (in blocks) at which a rotation scans for
    /// recovery-protected records. `None` derives it from `n`, `k` and `B`.
    pub scan_threshold_blocks: Option<usize>,
    /// DEBRA+: recovery announcements per process (`k`).
    pub rprotect_capacity: usize,
    pub transport: Transport,
    /// Hazard pointer slots per process.
    pub hp_k: usize,
    /// Retired records buffered before a hazard pointer scan. `None` uses
    /// `2·n·k + B`.
    pub hp_threshold: Option<usize>,
    /// Check record headers on every access, retire, release and free.
    pub poison: bool,
    /// Size of each process's bump region.
    pub bump_bytes_per_process: usize,
    /// Keep an exact high-water mark of total limbo across processes. Each
    /// retire then reads every process's published limbo size.
    pub track_limbo_total: bool,
}

impl Default for SmrConfig {
    fn default() -> Self {
        SmrConfig {
            block_size: 256,
            block_pool_cap: 16,
            spill_threshold_blocks: 32,
            check_thresh: 1,
            incr_thresh: 100,
            suspect_threshold_blocks: 4,
            scan_threshold_blocks: None,
            rprotect_capacity: 8,
            transport: Transport::Signal,
            hp_k: 8,
            hp_threshold: None,
            poison: false,
            bump_bytes_per_process: 1 << 30,
            track_limbo_total: false,
        }
    }
}

impl SmrConfig {
    /// Smallest `s` with `s·B ≥ n·k + B + max(B, 2·n·k)`.
    pub fn derived_scan_threshold_blocks(&self, n: usize) -> usize {
        let b = self.block_size;
        let nk = n * self.rprotect_capacity;
        let need = nk + b + b.max(2 * nk);
        need.div_ceil(b)
    }

    pub fn scan_threshold_blocks(&self, n: usize) -> usize {
        self.scan_threshold_blocks
            .unwrap_or_else(|| self.derived_scan_threshold_blocks(n))
    }

    pub fn hp_threshold(&self, n: usize) -> usize {
        self.hp_threshold
            .unwrap_or(2 * n * self.hp_k + self.block_size)
    }

    pub(crate) fn validate(&self) -> Result<(), crate::SmrError> {
        let err = |m: &str| Err(crate::SmrError::Config(m.to_string()));
        if self.block_size == 0 {
            return err("block size must be positive");
        }
        if self.check_thresh == 0 || self.incr_thresh == 0 {
            return err("CHECK_THRESH and INCR_THRESH must be at least 1");
        }
        if self.rprotect_capacity == 0 || self.hp_k == 0 {
            return err("protection capacities must be positive");
        }
        if let Some(s) = self.scan_threshold_blocks {
            if s == 0 {
                return err("scan threshold must be at least one block");
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scan_threshold_formula() {
        let cfg = SmrConfig::default();
        // n=2, k=8, B=256: 16 + 256 + 256 = 528 records -> 3 blocks.
        assert_eq!(cfg.derived_scan_threshold_blocks(2), 3);
        // n=64, k=8: 512 + 256 + 1024 = 1792 -> 7 blocks.
        assert_eq!(cfg.derived_scan_threshold_blocks(64), 7);
        for n in 1..200 {
            let s = cfg.derived_scan_threshold_blocks(n);
            let nk = n * 8;
            assert!(s * 256 >= nk + 256 + 256.max(2 * nk));
            assert!((s - 1) * 256 < nk + 256 + 256.max(2 * nk));
        }
    }

    #[test]
    fn hp_threshold_default() {
        let cfg = SmrConfig { hp_k: 3, block_size: 4, ..Default::default() };
        assert_eq!(cfg.hp_threshold(2), 16);
    }
}
