//! Cache hierarchy with MSHR-based miss handling and request cancellation.
//!
//! Requests travel core -> L1 -> ... -> memory, responses travel back up and
//! fill every level they pass through. A cancellation chases its request
//! downstream: at each cache it removes the squashed target from the matching
//! MSHR (MatchMSHR), deallocating the MSHR when no targets remain, and is
//! forwarded one level further unless that level is the last before memory.
//! Memory itself never sees cancellations; late responses are rejected by the
//! index/block double-check on arrival (CheckMSHR).

mod cache;
mod memory;

pub use cache::{Cache, Inflight, Line, LookupOutcome, MshrSlot, Target};
pub use memory::MainMemory;

use serde::{Deserialize, Serialize};

use crate::engine::Tick;
use crate::error::SimError;

pub const BLOCK_SIZE: u64 = 64;

/// One cache block worth of data.
pub type BlockData = [u8; BLOCK_SIZE as usize];

pub const ZERO_BLOCK: BlockData = [0u8; BLOCK_SIZE as usize];

/// Physical address aligned to the 64-byte block size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct BlockAddr(pub u64);

impl BlockAddr {
    pub fn containing(addr: u64) -> BlockAddr {
        BlockAddr(addr & !(BLOCK_SIZE - 1))
    }

    pub fn block_number(self) -> u64 {
        self.0 / BLOCK_SIZE
    }
}

impl std::fmt::Display for BlockAddr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RequestId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct InstId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CoreId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CacheId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReqKind {
    DataRead,
    DataWrite,
    InstFetch,
    PageTableWalk,
}

/// Who a response must be routed back to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Core { core: CoreId },
    Cache { cache: CacheId, mshr_index: usize },
}

/// An 8-byte aligned store carried by a write request until its line fills.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WriteOp {
    pub addr: u64,
    pub value: u64,
}

impl WriteOp {
    pub fn apply(&self, block: BlockAddr, data: &mut BlockData) {
        debug_assert_eq!(BlockAddr::containing(self.addr), block);
        let off = (self.addr - block.0) as usize & !7;
        data[off..off + 8].copy_from_slice(&self.value.to_le_bytes());
    }
}

/// A read/write/fetch/walk request flowing between core, caches, and memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemRequest {
    pub id: RequestId,
    pub addr: u64,
    pub kind: ReqKind,
    pub speculative: bool,
    pub inst_id: Option<InstId>,
    pub issue_tick: Tick,
    pub origin: Origin,
    pub write: Option<WriteOp>,
}

impl MemRequest {
    pub fn block(&self) -> BlockAddr {
        BlockAddr::containing(self.addr)
    }
}

/// Sent core -> memory-direction on squash; kills the named request's target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cancellation {
    pub request_id: RequestId,
    pub block: BlockAddr,
}

/// Response to a downstream request; `mshr_index` echoes the index the
/// request carried so the receiving cache can locate (and double-check) its
/// MSHR.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemResponse {
    pub request_id: RequestId,
    pub block: BlockAddr,
    pub data: BlockData,
    pub mshr_index: usize,
}

/// Per-level cache parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheLevelConfig {
    pub size_bytes: u64,
    pub associativity: u64,
    pub hit_latency_cycles: u64,
    pub mshr_count: usize,
    pub max_targets: usize,
}

impl CacheLevelConfig {
    pub fn validate(&self, name: &str) -> Result<(), SimError> {
        if self.associativity == 0 {
            return Err(SimError::Config(format!("{name}: associativity must be >= 1")));
        }
        if self.size_bytes == 0 || self.size_bytes % (self.associativity * BLOCK_SIZE) != 0 {
            return Err(SimError::Config(format!(
                "{name}: size {} not divisible by associativity {} x block size {}",
                self.size_bytes, self.associativity, BLOCK_SIZE
            )));
        }
        if self.hit_latency_cycles == 0 {
            return Err(SimError::Config(format!("{name}: hit latency must be >= 1 cycle")));
        }
        if self.mshr_count == 0 || self.max_targets == 0 {
            return Err(SimError::Config(format!(
                "{name}: mshr_count and max_targets must be >= 1"
            )));
        }
        Ok(())
    }

    pub fn sets(&self) -> u64 {
        self.size_bytes / (self.associativity * BLOCK_SIZE)
    }
}

/// Fixed-latency backing memory configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryConfig {
    pub access_latency_ns: u64,
    pub capacity_bytes: u64,
}

impl MemoryConfig {
    pub fn latency_ticks(&self) -> u64 {
        self.access_latency_ns * 1000
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheKind {
    L1Inst,
    L1Data,
    Shared,
}

/// Where a cache sends downstream traffic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Downstream {
    /// The shared level-1/level-2 bus segment (snooped).
    Bus,
    Cache(CacheId),
    Memory,
}
