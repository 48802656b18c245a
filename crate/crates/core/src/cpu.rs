//! Scenario-driven speculative core.
//!
//! There is no full out-of-order pipeline here: a speculation episode issues
//! a condition load, runs the gadget body (a dependent access/transmit load
//! pair with address-generation delays) while the condition is unresolved,
//! and squashes everything still outstanding `resolve_latency` cycles after
//! the condition operand arrives. On squash, each load slot that has not
//! completed emits one cancellation into the hierarchy.

use std::collections::BTreeMap;

use crate::engine::Tick;
use crate::error::SimError;
use crate::memsys::{
    BlockAddr, BlockData, Cancellation, CoreId, InstId, MemRequest, Origin, ReqKind, RequestId,
    WriteOp, BLOCK_SIZE,
};
use crate::metrics::trace::EventKind;
use crate::system::{Ev, System};

pub const DEFAULT_RESOLVE_LATENCY_CYCLES: u64 = 10;
/// Cycles of offset arithmetic before the gadget's access load issues.
pub const DEFAULT_ACCESS_ADDR_GEN_CYCLES: u64 = 5;
/// Cycles of shift/add address generation between the access data arriving
/// and the transmit load issuing.
pub const DEFAULT_TRANSMIT_ADDR_GEN_CYCLES: u64 = 3;

pub const PAGE_SIZE: u64 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotState {
    Issued,
    Completed,
    Squashed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Plain,
    Probe,
    Condition,
    Access,
    Transmit,
    Fetch,
    Ptw,
}

/// One outstanding (or retired) memory instruction in the load-store queue.
#[derive(Debug, Clone, Copy)]
pub struct LoadSlot {
    pub inst_id: InstId,
    pub request_id: RequestId,
    pub addr: u64,
    pub kind: ReqKind,
    pub speculative: bool,
    pub state: SlotState,
    pub issue_tick: Tick,
    pub complete_tick: Option<Tick>,
    pub role: Role,
    /// Set when the slot went Issued -> Squashed, i.e. it was still
    /// outstanding when the squash fired.
    pub squashed_outstanding: bool,
}

/// One attack iteration: condition load, speculative access/transmit body,
/// resolution, squash.
#[derive(Debug, Clone, Copy)]
pub struct SpeculationEpisode {
    pub episode_no: u64,
    pub condition_load_addr: u64,
    pub access_addr: u64,
    pub timing_base: u64,
    pub stride: u64,
    pub resolve_latency_cycles: u64,
    pub access_addr_gen_cycles: u64,
    pub transmit_addr_gen_cycles: u64,
}

#[derive(Debug, Clone)]
pub struct EpisodeRun {
    pub spec: SpeculationEpisode,
    pub condition_inst: InstId,
    pub access_inst: Option<InstId>,
    pub transmit_inst: Option<InstId>,
    pub secret_byte: Option<u8>,
    pub squashed: bool,
    pub record: usize,
}

/// Post-run summary of one episode, consumed by the metrics pairing.
#[derive(Debug, Clone)]
pub struct EpisodeRecord {
    pub episode_no: u64,
    pub core: CoreId,
    pub spec_start: Tick,
    pub squash_tick: Option<Tick>,
    pub access: Option<(InstId, RequestId)>,
    pub transmit: Option<(InstId, RequestId)>,
    pub access_squashed_outstanding: bool,
    pub transmit_squashed_outstanding: bool,
    pub executed_access: bool,
    pub executed_transmit: bool,
}

#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub executed_access: bool,
    pub executed_transmit: bool,
    pub squash_tick: Option<Tick>,
    pub slots: Vec<LoadSlot>,
}

/// TLB: virtual page -> physical page, filled by page-table walks that read
/// the scenario's in-memory page table through the data cache path.
#[derive(Debug, Default)]
pub struct Tlb {
    pub entries: BTreeMap<u64, u64>,
    pub page_table: BTreeMap<u64, u64>,
    pub pt_base: u64,
    pub pending_walks: BTreeMap<InstId, u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Translation {
    Hit(u64),
    Walk(InstId),
}

pub struct CoreState {
    pub id: CoreId,
    pub slots: BTreeMap<InstId, LoadSlot>,
    pub episode: Option<EpisodeRun>,
    pub tlb: Tlb,
    pub resolve_latency_cycles: u64,
}

impl CoreState {
    pub fn new(id: CoreId) -> CoreState {
        CoreState {
            id,
            slots: BTreeMap::new(),
            episode: None,
            tlb: Tlb::default(),
            resolve_latency_cycles: DEFAULT_RESOLVE_LATENCY_CYCLES,
        }
    }

    pub fn slot(&self, inst: InstId) -> &LoadSlot {
        self.slots.get(&inst).expect("unknown inst id")
    }
}

/// Actions delivered to a core by the engine.
#[derive(Debug, Clone)]
pub enum CoreAction {
    Issue {
        addr: u64,
        kind: ReqKind,
        speculative: bool,
        role: Role,
        write: Option<u64>,
    },
    IssueAccess,
    IssueTransmit,
    ResolveEpisode,
    ResolveFetch { inst: InstId },
    Squash { insts: Vec<InstId> },
    SquashOutstanding,
    Flush { addr: u64 },
    EvictL1 { addr: u64 },
}

impl System {
    /// Issue a memory instruction from `core` at the current tick.
    pub fn issue_request(
        &mut self,
        core: CoreId,
        addr: u64,
        kind: ReqKind,
        speculative: bool,
        role: Role,
        write_value: Option<u64>,
    ) -> Result<(InstId, RequestId), SimError> {
        if addr.saturating_add(8) > self.memory.cfg.capacity_bytes {
            return Err(SimError::Config(format!(
                "address {addr:#x} outside configured physical memory"
            )));
        }
        let inst_id = self.alloc_inst_id();
        let request_id = self.alloc_request_id();
        let now = self.now();
        let write = write_value.map(|value| WriteOp { addr: addr & !7, value });
        let req = MemRequest {
            id: request_id,
            addr,
            kind,
            speculative,
            inst_id: Some(inst_id),
            issue_tick: now,
            origin: Origin::Core { core },
            write,
        };
        self.cores[core.0].slots.insert(
            inst_id,
            LoadSlot {
                inst_id,
                request_id,
                addr,
                kind,
                speculative,
                state: SlotState::Issued,
                issue_tick: now,
                complete_tick: None,
                role,
                squashed_outstanding: false,
            },
        );
        self.emit(
            EventKind::IssueLoad,
            Some(request_id),
            Some(inst_id),
            None,
            Some(BlockAddr::containing(addr)),
        );
        let port = match kind {
            ReqKind::InstFetch => self.l1i(core),
            _ => self.l1d(core),
        };
        self.engine.schedule(now, Ev::RequestArrive { cache: port, req });
        Ok((inst_id, request_id))
    }

    /// Squash the named instructions: every slot still Issued goes to
    /// Squashed and (with cancellation enabled) emits one cancellation into
    /// its port. Completed slots emit nothing.
    pub fn squash(&mut self, core: CoreId, insts: &[InstId]) -> Vec<Cancellation> {
        let now = self.now();
        let mut sent = Vec::new();
        for &inst in insts {
            let slot = *self.cores[core.0].slots.get(&inst).expect("squash of unknown inst id");
            if slot.state != SlotState::Issued {
                continue;
            }
            {
                let s = self.cores[core.0].slots.get_mut(&inst).unwrap();
                s.state = SlotState::Squashed;
                s.squashed_outstanding = true;
            }
            if let Some(ep) = &self.cores[core.0].episode {
                let record = ep.record;
                if ep.access_inst == Some(inst) {
                    self.episodes[record].access_squashed_outstanding = true;
                }
                if ep.transmit_inst == Some(inst) {
                    self.episodes[record].transmit_squashed_outstanding = true;
                }
            }
            if self.cancel_enabled {
                let block = BlockAddr::containing(slot.addr);
                let cxl = Cancellation {
                    request_id: slot.request_id,
                    block,
                };
                self.emit(
                    EventKind::CancelSent,
                    Some(slot.request_id),
                    Some(inst),
                    None,
                    Some(block),
                );
                let port = match slot.kind {
                    ReqKind::InstFetch => self.l1i(core),
                    _ => self.l1d(core),
                };
                self.engine.schedule(now, Ev::CancelArrive { cache: port, cxl });
                sent.push(cxl);
            }
        }
        sent
    }

    fn squash_outstanding_speculative(&mut self, core: CoreId) -> Vec<Cancellation> {
        let insts: Vec<InstId> = self.cores[core.0]
            .slots
            .values()
            .filter(|s| s.state == SlotState::Issued && s.speculative)
            .map(|s| s.inst_id)
            .collect();
        self.squash(core, &insts)
    }

    /// Run one speculation episode to completion (system must be quiescent).
    pub fn run_episode(
        &mut self,
        core: CoreId,
        ep: SpeculationEpisode,
    ) -> Result<EpisodeOutcome, SimError> {
        assert!(self.engine.is_idle(), "episode started on a busy system");
        assert!(self.cores[core.0].episode.is_none());
        let now = self.now();
        self.emit(EventKind::SpecStart, None, None, None, None);
        let record = self.episodes.len();
        self.episodes.push(EpisodeRecord {
            episode_no: ep.episode_no,
            core,
            spec_start: now,
            squash_tick: None,
            access: None,
            transmit: None,
            access_squashed_outstanding: false,
            transmit_squashed_outstanding: false,
            executed_access: false,
            executed_transmit: false,
        });
        let (condition_inst, _) = self.issue_request(
            core,
            ep.condition_load_addr,
            ReqKind::DataRead,
            false,
            Role::Condition,
            None,
        )?;
        self.cores[core.0].episode = Some(EpisodeRun {
            spec: ep,
            condition_inst,
            access_inst: None,
            transmit_inst: None,
            secret_byte: None,
            squashed: false,
            record,
        });
        let delay = self.clock.cycles_to_ticks(ep.access_addr_gen_cycles);
        self.engine.schedule(
            now + delay,
            Ev::CoreAct {
                core,
                act: CoreAction::IssueAccess,
            },
        );
        self.run_until_idle()?;

        let run = self.cores[core.0].episode.take().expect("episode state");
        let rec = &self.episodes[run.record];
        let mut slots: Vec<LoadSlot> = Vec::new();
        for inst in [Some(run.condition_inst), run.access_inst, run.transmit_inst]
            .into_iter()
            .flatten()
        {
            slots.push(*self.cores[core.0].slot(inst));
        }
        Ok(EpisodeOutcome {
            executed_access: rec.executed_access,
            executed_transmit: rec.executed_transmit,
            squash_tick: rec.squash_tick,
            slots,
        })
    }

    /// Non-speculative load of `addr`; returns its latency in core cycles.
    pub fn timed_probe(&mut self, core: CoreId, addr: u64) -> Result<u64, SimError> {
        let (inst, request_id) = self.issue_request(core, addr, ReqKind::DataRead, false, Role::Probe, None)?;
        self.run_until_idle()?;
        let slot = *self.cores[core.0].slot(inst);
        let done = slot.complete_tick.expect("probe did not complete");
        self.emit(
            EventKind::ProbeResult,
            Some(request_id),
            Some(inst),
            None,
            Some(BlockAddr::containing(addr)),
        );
        Ok(self.clock.ticks_to_cycles_ceil(done.saturating_sub(slot.issue_tick)))
    }

    /// Issue an instruction fetch; a mispredicted one is squashed (and its
    /// outstanding request cancelled) once the prediction resolves.
    pub fn fetch_with_cancel(&mut self, core: CoreId, pc: u64, mispredicted: bool) -> Result<InstId, SimError> {
        let (inst, _) = self.issue_request(core, pc, ReqKind::InstFetch, mispredicted, Role::Fetch, None)?;
        if mispredicted {
            let delay = self
                .clock
                .cycles_to_ticks(self.cores[core.0].resolve_latency_cycles);
            self.engine.schedule_after(
                delay,
                Ev::CoreAct {
                    core,
                    act: CoreAction::ResolveFetch { inst },
                },
            );
        }
        Ok(inst)
    }

    /// TLB lookup; on a miss, issue a page-table walk through the data-cache
    /// path. A squashed speculative walk installs nothing.
    pub fn translate_with_cancel(
        &mut self,
        core: CoreId,
        vaddr: u64,
        speculative: bool,
    ) -> Result<Translation, SimError> {
        let vpn = vaddr / PAGE_SIZE;
        if let Some(&ppn) = self.cores[core.0].tlb.entries.get(&vpn) {
            return Ok(Translation::Hit(ppn * PAGE_SIZE + vaddr % PAGE_SIZE));
        }
        if !self.cores[core.0].tlb.page_table.contains_key(&vpn) {
            return Err(SimError::Config(format!(
                "page {vpn:#x} not mapped in the scenario page table"
            )));
        }
        let pte_addr = self.cores[core.0].tlb.pt_base + vpn * 8;
        let (inst, _) =
            self.issue_request(core, pte_addr, ReqKind::PageTableWalk, speculative, Role::Ptw, None)?;
        self.cores[core.0].tlb.pending_walks.insert(inst, vpn);
        Ok(Translation::Walk(inst))
    }

    /// Install the scenario page table: identity entries for `pages` pages,
    /// both in the walker's map and as PTE words in backing memory.
    pub fn map_identity_pages(&mut self, core: CoreId, pt_base: u64, pages: u64) {
        self.cores[core.0].tlb.pt_base = pt_base;
        for vpn in 0..pages {
            self.cores[core.0].tlb.page_table.insert(vpn, vpn);
            let pte = vpn.to_le_bytes();
            self.memory.write_bytes(pt_base + vpn * 8, &pte);
        }
    }

    pub(crate) fn on_core_deliver(&mut self, core: CoreId, request_id: RequestId, data: BlockData) {
        let now = self.now();
        let inst = self.cores[core.0]
            .slots
            .values()
            .find(|s| s.request_id == request_id)
            .map(|s| s.inst_id);
        let Some(inst) = inst else { return };
        let slot = *self.cores[core.0].slot(inst);
        if slot.state != SlotState::Issued {
            // Late response for a squashed slot: the core ignores it. Cache
            // state changes (if any) already happened below.
            return;
        }
        {
            let s = self.cores[core.0].slots.get_mut(&inst).unwrap();
            s.state = SlotState::Completed;
            s.complete_tick = Some(now);
        }

        match slot.role {
            Role::Condition => {
                if let Some(ep) = &self.cores[core.0].episode {
                    if ep.condition_inst == inst && !ep.squashed {
                        let delay = self.clock.cycles_to_ticks(ep.spec.resolve_latency_cycles);
                        self.engine.schedule(
                            now + delay,
                            Ev::CoreAct {
                                core,
                                act: CoreAction::ResolveEpisode,
                            },
                        );
                    }
                }
            }
            Role::Access => {
                let offset = (slot.addr % BLOCK_SIZE) as usize;
                let byte = data[offset];
                if let Some(ep) = &mut self.cores[core.0].episode {
                    if ep.access_inst == Some(inst) {
                        ep.secret_byte = Some(byte);
                        if !ep.squashed {
                            let delay = self.clock.cycles_to_ticks(ep.spec.transmit_addr_gen_cycles);
                            self.engine.schedule(
                                now + delay,
                                Ev::CoreAct {
                                    core,
                                    act: CoreAction::IssueTransmit,
                                },
                            );
                        }
                    }
                }
            }
            Role::Ptw => {
                if let Some(vpn) = self.cores[core.0].tlb.pending_walks.remove(&inst) {
                    let off = ((slot.addr % BLOCK_SIZE) & !7) as usize;
                    let ppn = u64::from_le_bytes(data[off..off + 8].try_into().unwrap());
                    self.cores[core.0].tlb.entries.insert(vpn, ppn);
                }
            }
            _ => {}
        }
    }

    pub(crate) fn on_core_act(&mut self, core: CoreId, act: CoreAction) {
        match act {
            CoreAction::Issue {
                addr,
                kind,
                speculative,
                role,
                write,
            } => {
                // Driver-scheduled issue; address validity was checked when
                // the action was built.
                let _ = self.issue_request(core, addr, kind, speculative, role, write);
            }
            CoreAction::IssueAccess => {
                let Some(ep) = &self.cores[core.0].episode else { return };
                if ep.squashed {
                    return;
                }
                let (addr, record) = (ep.spec.access_addr, ep.record);
                let issued = self.issue_request(core, addr, ReqKind::DataRead, true, Role::Access, None);
                if let Ok((inst, req)) = issued {
                    if let Some(ep) = &mut self.cores[core.0].episode {
                        ep.access_inst = Some(inst);
                    }
                    self.episodes[record].access = Some((inst, req));
                    self.episodes[record].executed_access = true;
                }
            }
            CoreAction::IssueTransmit => {
                let Some(ep) = &self.cores[core.0].episode else { return };
                if ep.squashed || ep.transmit_inst.is_some() {
                    return;
                }
                let Some(byte) = ep.secret_byte else { return };
                let addr = ep.spec.timing_base + byte as u64 * ep.spec.stride;
                let record = ep.record;
                let issued = self.issue_request(core, addr, ReqKind::DataRead, true, Role::Transmit, None);
                if let Ok((inst, req)) = issued {
                    if let Some(ep) = &mut self.cores[core.0].episode {
                        ep.transmit_inst = Some(inst);
                    }
                    self.episodes[record].transmit = Some((inst, req));
                    self.episodes[record].executed_transmit = true;
                }
            }
            CoreAction::ResolveEpisode => {
                let Some(ep) = &mut self.cores[core.0].episode else { return };
                if ep.squashed {
                    return;
                }
                ep.squashed = true;
                let record = ep.record;
                let now = self.now();
                self.episodes[record].squash_tick = Some(now);
                self.emit(EventKind::Squash, None, None, None, None);
                self.squash_outstanding_speculative(core);
            }
            CoreAction::ResolveFetch { inst } => {
                self.emit(EventKind::Squash, None, Some(inst), None, None);
                self.squash(core, &[inst]);
            }
            CoreAction::Squash { insts } => {
                self.emit(EventKind::Squash, None, None, None, None);
                self.squash(core, &insts);
            }
            CoreAction::SquashOutstanding => {
                self.emit(EventKind::Squash, None, None, None, None);
                self.squash_outstanding_speculative(core);
            }
            CoreAction::Flush { addr } => self.flush_block(addr),
            CoreAction::EvictL1 { addr } => self.evict_block_from_level(1, addr),
        }
    }
}
