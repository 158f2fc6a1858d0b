//! Safe memory reclamation for lock-free data structures.
//!
//! The centerpiece is DEBRA, a distributed epoch-based reclaimer whose
//! per-operation overhead is a handful of loads and one announcement store,
//! and DEBRA+, which adds neutralization so that a stalled process cannot
//! hold back reclamation indefinitely. Classic EBR, hazard pointers and a
//! no-op reclaimer are included as baselines.
//!
//! Data structures talk to a [`RecordManager`], which composes one
//! [`Reclaimer`], one [`Pool`] and one [`Allocator`] chosen by type
//! parameters:
//!
//! ```
//! use debra::{Debra, PerThreadPool, RecordManager, SmrConfig, SystemAllocator};
//!
//! type Manager = RecordManager<u64, Debra<u64>, PerThreadPool<u64>, SystemAllocator<u64>>;
//!
//! let mgr = Manager::new(1, SmrConfig::default()).unwrap();
//! let mut h = mgr.handle(0);
//! let r = h.allocate(42).unwrap();
//! h.leave_qstate();
//! assert_eq!(unsafe { (*r).value }, 42);
//! h.enter_qstate();
//! h.retire(r);
//! ```

pub mod alloc;
pub mod block;
pub mod config;
pub mod epoch;
mod error;
pub mod manager;
pub mod neutralize;
pub mod pool;
pub mod reclaim;
pub mod record;

pub use alloc::{AllocStats, Allocator, BumpAllocator, SystemAllocator};
pub use config::{SmrConfig, Transport};
pub use error::{Neutralized, SmrError};
pub use manager::{Census, Handle, HandleStats, RecordManager};
pub use pool::{NoPool, PerThreadPool, Pool};
pub use reclaim::{
    ClassicEbr, Debra, DebraPlus, HazardPointers, NoReclaim, Reclaimer, ReclaimerCounters,
};
pub use record::{FaultKind, FaultReport, Record, RecordState};
