use std::fmt;
use std::str::FromStr;

use clap::ValueEnum;
use debra::{SmrConfig, Transport};
use serde::{Deserialize, Serialize};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReclaimerKind {
    None,
    Ebr,
    Debra,
    #[value(name = "debra+")]
    #[serde(rename = "debra+")]
    DebraPlus,
    Hp,
}

impl ReclaimerKind {
    pub const ALL: [ReclaimerKind; 5] = [
        ReclaimerKind::None,
        ReclaimerKind::Ebr,
        ReclaimerKind::Debra,
        ReclaimerKind::DebraPlus,
        ReclaimerKind::Hp,
    ];
}

impl fmt::Display for ReclaimerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReclaimerKind::None => "none",
            ReclaimerKind::Ebr => "ebr",
            ReclaimerKind::Debra => "debra",
            ReclaimerKind::DebraPlus => "debra+",
            ReclaimerKind::Hp => "hp",
        })
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllocKind {
    Bump,
    System,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Perthread,
    None,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StallPoint {
    MidBody,
    Quiescent,
    Descheduled,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    Signal,
    Coop,
}

impl From<TransportKind> for Transport {
    fn from(t: TransportKind) -> Self {
        match t {
            TransportKind::Signal => Transport::Signal,
            TransportKind::Coop => Transport::Cooperative,
        }
    }
}

/// Operation mix in percent.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mix {
    pub insert: u8,
    pub delete: u8,
    pub search: u8,
}

impl Mix {
    pub const UPDATE_ONLY: Mix = Mix { insert: 50, delete: 50, search: 0 };
    pub const READ_HEAVY: Mix = Mix { insert: 25, delete: 25, search: 50 };
}

impl FromStr for Mix {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        let [i, d, q] = parts[..] else {
            return Err(format!("mix {s:?} is not I:D:S"));
        };
        let pct = |x: &str| x.trim().parse::<u8>().map_err(|e| format!("mix {s:?}: {e}"));
        let m = Mix { insert: pct(i)?, delete: pct(d)?, search: pct(q)? };
        if m.insert as u32 + m.delete as u32 + m.search as u32 != 100 {
            return Err(format!("mix {s:?} does not sum to 100"));
        }
        Ok(m)
    }
}

impl fmt::Display for Mix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.insert, self.delete, self.search)
    }
}

impl Serialize for Mix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Mix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Everything that defines one trial. Flat so that it maps onto CSV columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub reclaimer: ReclaimerKind,
    pub allocator: AllocKind,
    pub pool: PoolKind,
    pub threads: usize,
    pub duration_seconds: f64,
    pub key_range: u64,
    pub mix: Mix,
    pub seed: u64,
    pub prefill: bool,
    /// Seconds into the timed phase after which block counters are sampled
    /// again, so steady-state reuse can be measured.
    pub warmup_seconds: f64,
    pub stall_thread: Option<usize>,
    pub stall_point: Option<StallPoint>,
    pub stall_ms: Option<u64>,
    pub poison: bool,
    pub transport: TransportKind,
    pub check_thresh: u64,
    pub incr_thresh: u64,
    pub block_size: usize,
    pub block_pool_cap: usize,
    pub neutralize_threshold_blocks: usize,
    pub scan_threshold_blocks: Option<usize>,
    pub rprotect_capacity: usize,
    pub hp_k: usize,
    pub hp_threshold: Option<usize>,
    pub bump_mib: usize,
    pub watchdog: u64,
    pub pin: bool,
    /// Maintain the exact total-limbo high-water mark (costs a read of every
    /// process's limbo counter per retire).
    pub track_limbo: bool,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        let d = SmrConfig::default();
        WorkloadSpec {
            reclaimer: ReclaimerKind::Debra,
            allocator: AllocKind::Bump,
            pool: PoolKind::Perthread,
            threads: 1,
            duration_seconds: 2.0,
            key_range: 10_000,
            mix: Mix::UPDATE_ONLY,
            seed: 1,
            prefill: true,
            warmup_seconds: 0.0,
            stall_thread: None,
            stall_point: None,
            stall_ms: None,
            poison: false,
            transport: TransportKind::Signal,
            check_thresh: d.check_thresh,
            incr_thresh: d.incr_thresh,
            block_size: d.block_size,
            block_pool_cap: d.block_pool_cap,
            neutralize_threshold_blocks: d.suspect_threshold_blocks,
            scan_threshold_blocks: None,
            rprotect_capacity: d.rprotect_capacity,
            hp_k: d.hp_k,
            hp_threshold: None,
            bump_mib: 4096,
            watchdog: debra_bst::DEFAULT_WATCHDOG,
            pin: false,
            track_limbo: false,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.threads == 0 {
            return Err("need at least one thread".into());
        }
        if self.key_range == 0 || self.key_range > debra_bst::MAX_KEY {
            return Err(format!("key range {} out of bounds", self.key_range));
        }
        if !(self.duration_seconds > 0.0) {
            return Err("duration must be positive".into());
        }
        match (self.stall_thread, self.stall_point, self.stall_ms) {
            (None, None, None) => {}
            (Some(t), Some(_), Some(_)) if t < self.threads => {}
            (Some(t), Some(_), Some(_)) => {
                return Err(format!("stall thread {t} not below thread count {}", self.threads))
            }
            _ => return Err("--stall-thread, --stall-point and --stall-ms go together".into()),
        }
        Ok(())
    }

    pub fn stall(&self) -> Option<(usize, StallPoint, u64)> {
        Some((self.stall_thread?, self.stall_point?, self.stall_ms?))
    }

    pub fn smr_config(&self) -> SmrConfig {
        SmrConfig {
            block_size: self.block_size,
            block_pool_cap: self.block_pool_cap,
            check_thresh: self.check_thresh,
            incr_thresh: self.incr_thresh,
            suspect_threshold_blocks: self.neutralize_threshold_blocks,
            scan_threshold_blocks: self.scan_threshold_blocks,
            rprotect_capacity: self.rprotect_capacity,
            transport: self.transport.into(),
            hp_k: self.hp_k,
            hp_threshold: self.hp_threshold,
            poison: self.poison,
            bump_bytes_per_process: self.bump_mib << 20,
            track_limbo_total: self.track_limbo,
            ..SmrConfig::default()
        }
    }
}
