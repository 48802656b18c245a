//! One cache level: set-associative LRU tag store plus the MSHR queue.
//!
//! The struct holds state only; the event choreography (what happens at
//! lookup completion, on responses, on cancellations) lives in the system
//! dispatcher. Keeping the state transitions here small and synchronous makes
//! the race windows explicit in one place.

use std::collections::VecDeque;

use crate::engine::Tick;

use super::{
    BlockAddr, BlockData, CacheId, CacheKind, CacheLevelConfig, CoreId, Downstream, InstId,
    MemRequest, Origin, ReqKind, RequestId, WriteOp,
};

#[derive(Debug, Clone, Copy)]
pub struct Line {
    pub valid: bool,
    pub dirty: bool,
    pub tag: u64,
    pub stamp: u64,
    pub data: BlockData,
}

impl Line {
    fn empty() -> Line {
        Line {
            valid: false,
            dirty: false,
            tag: 0,
            stamp: 0,
            data: super::ZERO_BLOCK,
        }
    }
}

/// One pending request coalesced into an MSHR.
#[derive(Debug, Clone, Copy)]
pub struct Target {
    pub request_id: RequestId,
    pub origin: Origin,
    pub write: Option<WriteOp>,
    pub speculative: bool,
    pub inst_id: Option<InstId>,
    pub kind: ReqKind,
}

/// Miss status holding register. `downstream_sent` is false only for
/// snoop-supply entries, which wait on a local timer instead of a response
/// from below.
#[derive(Debug, Clone)]
pub struct MshrSlot {
    pub allocated: bool,
    pub block: BlockAddr,
    pub targets: Vec<Target>,
    pub downstream_sent: bool,
    pub downstream_req_id: Option<RequestId>,
}

impl MshrSlot {
    fn free() -> MshrSlot {
        MshrSlot {
            allocated: false,
            block: BlockAddr(0),
            targets: Vec::new(),
            downstream_sent: false,
            downstream_req_id: None,
        }
    }
}

/// A request inside its tag/MSHR lookup window. A cancellation arriving in
/// this window is remembered and resolved when the lookup completes.
#[derive(Debug, Clone)]
pub struct Inflight {
    pub req: MemRequest,
    pub arrived: Tick,
    pub cancelled_at: Option<Tick>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LookupOutcome {
    Hit,
    MissAllocated(usize),
    Coalesced(usize),
    Blocked,
}

pub struct Cache {
    pub id: CacheId,
    pub level: u8,
    pub kind: CacheKind,
    pub core: Option<CoreId>,
    pub cfg: CacheLevelConfig,
    pub hit_latency_ticks: u64,
    pub is_llc: bool,
    pub downstream: Downstream,
    sets: u64,
    lines: Vec<Line>,
    stamp: u64,
    pub mshrs: Vec<MshrSlot>,
    pub inflight: Vec<Inflight>,
    pub retry_q: VecDeque<MemRequest>,
    pub retry_scheduled: bool,
}

impl Cache {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: CacheId,
        level: u8,
        kind: CacheKind,
        core: Option<CoreId>,
        cfg: CacheLevelConfig,
        hit_latency_ticks: u64,
        is_llc: bool,
        downstream: Downstream,
    ) -> Cache {
        let sets = cfg.sets();
        let ways = cfg.associativity;
        Cache {
            id,
            level,
            kind,
            core,
            cfg,
            hit_latency_ticks,
            is_llc,
            downstream,
            sets,
            lines: vec![Line::empty(); (sets * ways) as usize],
            stamp: 0,
            mshrs: vec![MshrSlot::free(); cfg.mshr_count],
            inflight: Vec::new(),
            retry_q: VecDeque::new(),
            retry_scheduled: false,
        }
    }

    fn set_of(&self, block: BlockAddr) -> u64 {
        block.block_number() % self.sets
    }

    fn set_range(&self, block: BlockAddr) -> std::ops::Range<usize> {
        let set = self.set_of(block);
        let ways = self.cfg.associativity as usize;
        let start = set as usize * ways;
        start..start + ways
    }

    pub fn probe(&self, block: BlockAddr) -> Option<usize> {
        let tag = block.block_number();
        self.set_range(block)
            .find(|&i| self.lines[i].valid && self.lines[i].tag == tag)
    }

    pub fn line(&self, idx: usize) -> &Line {
        &self.lines[idx]
    }

    pub fn line_mut(&mut self, idx: usize) -> &mut Line {
        &mut self.lines[idx]
    }

    pub fn touch(&mut self, idx: usize) {
        self.stamp += 1;
        self.lines[idx].stamp = self.stamp;
    }

    /// Install `block`, evicting the LRU way if the set is full. Returns the
    /// evicted victim when it was valid and dirty (it needs a writeback).
    pub fn install(
        &mut self,
        block: BlockAddr,
        data: BlockData,
        dirty: bool,
    ) -> Option<(BlockAddr, BlockData)> {
        debug_assert!(self.probe(block).is_none(), "install over resident line");
        let range = self.set_range(block);
        let victim_idx = range
            .clone()
            .find(|&i| !self.lines[i].valid)
            .unwrap_or_else(|| {
                range
                    .min_by_key(|&i| self.lines[i].stamp)
                    .expect("associativity >= 1")
            });
        let victim = self.lines[victim_idx];
        let evicted = if victim.valid && victim.dirty {
            Some((BlockAddr(victim.tag * super::BLOCK_SIZE), victim.data))
        } else {
            None
        };
        self.stamp += 1;
        self.lines[victim_idx] = Line {
            valid: true,
            dirty,
            tag: block.block_number(),
            stamp: self.stamp,
            data,
        };
        evicted
    }

    /// Drop the line holding `block` if present. Returns its data when dirty.
    pub fn invalidate(&mut self, block: BlockAddr) -> Option<(bool, BlockData)> {
        let idx = self.probe(block)?;
        let line = &mut self.lines[idx];
        line.valid = false;
        Some((line.dirty, line.data))
    }

    pub fn free_mshr(&self) -> Option<usize> {
        self.mshrs.iter().position(|m| !m.allocated)
    }

    /// Allocated MSHR handling `block`, if any. At most one can exist.
    pub fn mshr_for_block(&self, block: BlockAddr) -> Option<usize> {
        self.mshrs
            .iter()
            .position(|m| m.allocated && m.block == block)
    }

    /// MatchMSHR search half: the allocated entry holding `request_id` as a
    /// target for `block`.
    pub fn mshr_matching(&self, block: BlockAddr, request_id: RequestId) -> Option<usize> {
        self.mshrs.iter().position(|m| {
            m.allocated && m.block == block && m.targets.iter().any(|t| t.request_id == request_id)
        })
    }

    pub fn allocated_mshr_count(&self) -> usize {
        self.mshrs.iter().filter(|m| m.allocated).count()
    }
}
