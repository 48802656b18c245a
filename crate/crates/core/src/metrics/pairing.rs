//! Pair each episode's access/transmit instructions with the cache events
//! their request chains produced, and derive the per-level change counts.
//!
//! An instruction counts toward the metric when it was squashed while its
//! memory request was still outstanding; "changed level i" means a Fill at
//! level i traceable to that instruction's request chain. Late-discarded
//! responses and cancelled MSHRs count as no change.

use std::collections::{BTreeSet, HashMap};

use crate::cpu::EpisodeRecord;
use crate::engine::Tick;
use crate::error::SimError;
use crate::memsys::RequestId;
use crate::metrics::cc::CcReport;
use crate::metrics::trace::{EventKind, TraceLog};

#[derive(Debug, Clone)]
pub struct AttackRecord {
    pub attack_no: u64,
    pub access_executed: bool,
    pub transmit_executed: bool,
    /// Squashed-while-outstanding, i.e. counted in N_total.
    pub access_counted: bool,
    pub transmit_counted: bool,
    pub access_levels: BTreeSet<u8>,
    pub transmit_levels: BTreeSet<u8>,
    pub spec_start: Tick,
    pub squash_tick: Option<Tick>,
}

impl AttackRecord {
    pub fn levels_changed(&self) -> BTreeSet<u8> {
        self.access_levels
            .union(&self.transmit_levels)
            .copied()
            .collect()
    }
}

fn levels_filled_by_chain(trace: &TraceLog, root: RequestId) -> BTreeSet<u8> {
    let members: BTreeSet<RequestId> = trace.chain_members(root).into_iter().collect();
    trace
        .events()
        .iter()
        .filter(|e| e.kind == EventKind::Fill)
        .filter(|e| e.request_id.map(|id| members.contains(&id)).unwrap_or(false))
        .filter_map(|e| e.level)
        .collect()
}

/// One record per episode, in episode order.
pub fn pair_attacks(
    trace: &TraceLog,
    episodes: &[EpisodeRecord],
) -> Result<Vec<AttackRecord>, SimError> {
    if episodes.is_empty() && !trace.events().is_empty() {
        return Err(SimError::Schema(
            "trace has no labeled access/transmit instructions to pair".into(),
        ));
    }
    let mut records = Vec::with_capacity(episodes.len());
    for ep in episodes {
        let access_levels = match (ep.access, ep.access_squashed_outstanding) {
            (Some((_, req)), true) => levels_filled_by_chain(trace, req),
            _ => BTreeSet::new(),
        };
        let transmit_levels = match (ep.transmit, ep.transmit_squashed_outstanding) {
            (Some((_, req)), true) => levels_filled_by_chain(trace, req),
            _ => BTreeSet::new(),
        };
        records.push(AttackRecord {
            attack_no: ep.episode_no,
            access_executed: ep.executed_access,
            transmit_executed: ep.executed_transmit,
            access_counted: ep.access_squashed_outstanding,
            transmit_counted: ep.transmit_squashed_outstanding,
            access_levels,
            transmit_levels,
            spec_start: ep.spec_start,
            squash_tick: ep.squash_tick,
        });
    }
    Ok(records)
}

/// Aggregate per-instruction counts into the metric report.
pub fn cc_report(records: &[AttackRecord], k: u8) -> CcReport {
    let mut n = vec![0u64; k as usize];
    let mut n_total = 0u64;
    let mut count = |counted: bool, levels: &BTreeSet<u8>| {
        if counted {
            n_total += 1;
            for &lvl in levels {
                if (1..=k).contains(&lvl) {
                    n[lvl as usize - 1] += 1;
                }
            }
        }
    };
    for r in records {
        count(r.access_counted, &r.access_levels);
        count(r.transmit_counted, &r.transmit_levels);
    }
    CcReport::compute(n, n_total, k)
}

/// Request -> attack number map used by the timeline export.
pub fn chain_attack_map(trace: &TraceLog, episodes: &[EpisodeRecord]) -> HashMap<RequestId, u64> {
    let mut map = HashMap::new();
    for ep in episodes {
        for req in [ep.access.map(|a| a.1), ep.transmit.map(|t| t.1)].into_iter().flatten() {
            for member in trace.chain_members(req) {
                map.insert(member, ep.episode_no);
            }
        }
    }
    map
}
