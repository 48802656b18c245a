//! Timestamped record of everything the simulator does.
//!
//! Every issue, fill, cancel and discard lands here as a [`TraceEvent`]. The
//! log also keeps the request parent links needed to walk a request chain
//! from a core load down through the per-level requests the miss path spawns.

use std::collections::HashMap;

use crate::engine::Tick;
use crate::memsys::{BlockAddr, InstId, RequestId};

/// What happened. `level` in the enclosing event locates cache-side kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    IssueLoad,
    SpecStart,
    Squash,
    CancelSent,
    CancelRecv,
    MissAlloc,
    Fill,
    RespRecv,
    Hit,
    RespDiscarded,
    CancelDiscarded,
    FlushDone,
    ProbeResult,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::IssueLoad => "IssueLoad",
            EventKind::SpecStart => "SpecStart",
            EventKind::Squash => "Squash",
            EventKind::CancelSent => "CancelSent",
            EventKind::CancelRecv => "CancelRecv",
            EventKind::MissAlloc => "MissAlloc",
            EventKind::Fill => "Fill",
            EventKind::RespRecv => "RespRecv",
            EventKind::Hit => "Hit",
            EventKind::RespDiscarded => "RespDiscarded",
            EventKind::CancelDiscarded => "CancelDiscarded",
            EventKind::FlushDone => "FlushDone",
            EventKind::ProbeResult => "ProbeResult",
        }
    }
}

impl std::fmt::Display for EventKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceEvent {
    pub tick: Tick,
    pub seq: u64,
    pub kind: EventKind,
    pub request_id: Option<RequestId>,
    pub inst_id: Option<InstId>,
    /// Cache level 1..=K for cache-side events; None for core-side ones.
    pub level: Option<u8>,
    pub block: Option<BlockAddr>,
}

/// A fill and the coalesced targets it serviced. Attribution runs over the
/// serviced targets rather than the response id: an MSHR freed by a
/// cancellation can be reallocated for the same block before the stale
/// response arrives, in which case the fill belongs to the new owner.
#[derive(Debug, Clone)]
pub struct FillRecord {
    pub tick: Tick,
    pub level: u8,
    pub block: BlockAddr,
    pub serviced: Vec<RequestId>,
}

/// Append-only event sink plus request-chain bookkeeping.
#[derive(Debug, Default)]
pub struct TraceLog {
    events: Vec<TraceEvent>,
    next_seq: u64,
    /// Downstream request id -> the target request that allocated the MSHR.
    parent: HashMap<RequestId, RequestId>,
    fills: Vec<FillRecord>,
    enabled: bool,
}

impl TraceLog {
    pub fn new() -> Self {
        TraceLog {
            events: Vec::new(),
            next_seq: 0,
            parent: HashMap::new(),
            enabled: true,
        }
    }

    /// Recording can be switched off for bulk runs that only need final state.
    pub fn set_enabled(&mut self, enabled: bool) {
        self.enabled = enabled;
    }

    pub fn emit(
        &mut self,
        tick: Tick,
        kind: EventKind,
        request_id: Option<RequestId>,
        inst_id: Option<InstId>,
        level: Option<u8>,
        block: Option<BlockAddr>,
    ) {
        if !self.enabled {
            return;
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        debug_assert!(self.events.last().map_or(true, |e| e.tick <= tick));
        self.events.push(TraceEvent {
            tick,
            seq,
            kind,
            request_id,
            inst_id,
            level,
            block,
        });
    }

    /// Record that `child` was sent downstream on behalf of `parent`.
    pub fn link_request(&mut self, child: RequestId, parent: RequestId) {
        self.parent.insert(child, parent);
    }

    pub fn record_fill(&mut self, tick: Tick, level: u8, block: BlockAddr, serviced: Vec<RequestId>) {
        self.fills.push(FillRecord {
            tick,
            level,
            block,
            serviced,
        });
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn fills(&self) -> &[FillRecord] {
        &self.fills
    }

    pub fn clear(&mut self) {
        self.events.clear();
        self.parent.clear();
        self.fills.clear();
        self.next_seq = 0;
    }

    /// Root of the request chain `id` belongs to (the core-issued request).
    pub fn chain_root(&self, id: RequestId) -> RequestId {
        let mut cur = id;
        while let Some(&p) = self.parent.get(&cur) {
            cur = p;
        }
        cur
    }

    /// All request ids whose chain root is `root`, including `root`.
    pub fn chain_members(&self, root: RequestId) -> Vec<RequestId> {
        let mut members: Vec<RequestId> = self
            .parent
            .keys()
            .copied()
            .filter(|&id| self.chain_root(id) == root)
            .collect();
        members.push(root);
        members.sort_unstable();
        members
    }
}
