//! The simulated machine: cores, caches, bus, and memory wired to one event
//! engine.
//!
//! Latency model: a request spends `hit_latency` in tag/MSHR lookup at each
//! level before a hit response or a downstream request leaves; wire hops are
//! free. Responses fill and propagate upstream without additional per-level
//! latency. A cancellation takes effect the tick it arrives at a level
//! (arrival order against the response decides the race) and is forwarded one
//! level down after the same lookup latency a request pays. The last level
//! before memory never forwards cancellations.

use std::collections::HashMap;

use crate::config::SystemConfig;
use crate::cpu::{CoreAction, CoreState};
use crate::engine::{ClockDomain, Engine, Tick};
use crate::error::SimError;
use crate::memsys::{
    BlockAddr, BlockData, Cache, CacheId, CacheKind, Cancellation, CoreId, Downstream, InstId,
    LookupOutcome, MainMemory, MemRequest, MemResponse, MshrSlot, Origin, ReqKind, RequestId,
    Target,
};
use crate::metrics::trace::{EventKind, TraceLog};

/// Event payloads dispatched by the engine.
#[derive(Debug, Clone)]
pub enum Ev {
    RequestArrive { cache: CacheId, req: MemRequest },
    LookupDone { cache: CacheId, request_id: RequestId },
    ResponseArrive { cache: CacheId, resp: MemResponse },
    CancelArrive { cache: CacheId, cxl: Cancellation },
    /// Request placed on the shared level-1/level-2 bus; peers snoop it.
    BusRequest { req: MemRequest },
    /// Cancellation on the shared bus; every attached cache runs MatchMSHR.
    BusCancel { cxl: Cancellation },
    SupplyFire { cache: CacheId, block: BlockAddr, request_id: RequestId },
    SupplyDirect {
        cache: CacheId,
        block: BlockAddr,
        request_id: RequestId,
        to_cache: CacheId,
        to_mshr: usize,
    },
    MemArrive { req: MemRequest },
    RetryKick { cache: CacheId },
    CoreDeliver { core: CoreId, request_id: RequestId, data: BlockData },
    CoreAct { core: CoreId, act: CoreAction },
}

/// Where a request chain was ultimately served from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ServeLevel {
    Cache(u8),
    Memory,
    Peer,
}

/// Side log used by the invariant checkers; unlike the spec trace it keys
/// cache-side events by the concrete cache, not just the level.
#[derive(Debug, Clone, Copy)]
pub struct CheckEvent {
    pub tick: Tick,
    pub seq: u64,
    pub cache: CacheId,
    pub level: u8,
    pub kind: CheckKind,
    pub request_id: RequestId,
    pub block: BlockAddr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckKind {
    CancelRecv,
    RespRecv,
    Fill,
}

/// Test hook: deliberately broken behaviors for harness self-tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BugInjection {
    /// Receive cancellations but never act on them.
    IgnoreCancellations,
}

pub struct System {
    pub engine: Engine<Ev>,
    pub cfg: SystemConfig,
    pub clock: ClockDomain,
    pub caches: Vec<Cache>,
    pub memory: MainMemory,
    pub cores: Vec<CoreState>,
    pub trace: TraceLog,
    pub cancel_enabled: bool,
    pub episodes: Vec<crate::cpu::EpisodeRecord>,
    /// (chain root, where it was served) per completed lookup chain.
    pub access_outcomes: Vec<(RequestId, ServeLevel)>,
    pub check_log: Option<Vec<CheckEvent>>,
    pub bug: Option<BugInjection>,
    next_request: u64,
    next_inst: u64,
    check_seq: u64,
}

impl System {
    pub fn new(cfg: SystemConfig, cancel_enabled: bool) -> Result<System, SimError> {
        cfg.validate()?;
        let clock = cfg.core_clock();
        let n = cfg.cores;
        let levels = cfg.levels();
        let mut caches = Vec::new();
        for c in 0..n {
            let mk = |kind, level_cfg: &crate::memsys::CacheLevelConfig, id| {
                Cache::new(
                    CacheId(id),
                    1,
                    kind,
                    Some(CoreId(c)),
                    *level_cfg,
                    clock.cycles_to_ticks(level_cfg.hit_latency_cycles),
                    levels == 1,
                    Downstream::Bus,
                )
            };
            caches.push(mk(CacheKind::L1Inst, &cfg.l1i, 2 * c));
            caches.push(mk(CacheKind::L1Data, &cfg.l1d, 2 * c + 1));
        }
        for (i, lvl) in cfg.shared_levels.iter().enumerate() {
            let level = 2 + i as u8;
            let is_llc = level == levels;
            let downstream = if is_llc {
                Downstream::Memory
            } else {
                Downstream::Cache(CacheId(2 * n + i + 1))
            };
            caches.push(Cache::new(
                CacheId(2 * n + i),
                level,
                CacheKind::Shared,
                None,
                *lvl,
                clock.cycles_to_ticks(lvl.hit_latency_cycles),
                is_llc,
                downstream,
            ));
        }
        let cores = (0..n).map(|c| CoreState::new(CoreId(c))).collect();
        Ok(System {
            engine: Engine::new(),
            clock,
            caches,
            memory: MainMemory::new(cfg.memory),
            cores,
            trace: TraceLog::new(),
            cancel_enabled,
            episodes: Vec::new(),
            access_outcomes: Vec::new(),
            check_log: None,
            bug: None,
            next_request: 0,
            next_inst: 0,
            check_seq: 0,
            cfg,
        })
    }

    pub fn now(&self) -> Tick {
        self.engine.now()
    }

    pub fn l1i(&self, core: CoreId) -> CacheId {
        CacheId(2 * core.0)
    }

    pub fn l1d(&self, core: CoreId) -> CacheId {
        CacheId(2 * core.0 + 1)
    }

    pub fn shared_cache(&self, level: u8) -> CacheId {
        debug_assert!(level >= 2);
        CacheId(2 * self.cfg.cores + (level as usize - 2))
    }

    pub fn cache(&self, id: CacheId) -> &Cache {
        &self.caches[id.0]
    }

    pub fn alloc_request_id(&mut self) -> RequestId {
        let id = RequestId(self.next_request);
        self.next_request += 1;
        id
    }

    pub fn alloc_inst_id(&mut self) -> InstId {
        let id = InstId(self.next_inst);
        self.next_inst += 1;
        id
    }

    pub(crate) fn emit(
        &mut self,
        kind: EventKind,
        request_id: Option<RequestId>,
        inst_id: Option<InstId>,
        level: Option<u8>,
        block: Option<BlockAddr>,
    ) {
        self.trace
            .emit(self.engine.now(), kind, request_id, inst_id, level, block);
    }

    fn check_emit(&mut self, cache: CacheId, kind: CheckKind, request_id: RequestId, block: BlockAddr) {
        if self.check_log.is_some() {
            let ev = CheckEvent {
                tick: self.engine.now(),
                seq: self.check_seq,
                cache,
                level: self.caches[cache.0].level,
                kind,
                request_id,
                block,
            };
            self.check_seq += 1;
            self.check_log.as_mut().unwrap().push(ev);
        }
    }

    /// Fire exactly one event. Returns false once the queue is empty.
    pub fn step(&mut self) -> Result<bool, SimError> {
        match self.engine.pop() {
            None => Ok(false),
            Some((_, ev)) => {
                self.engine.check_watchdog()?;
                self.dispatch(ev);
                Ok(true)
            }
        }
    }

    /// Drain the event queue; returns the tick of the last fired event.
    pub fn run_until_idle(&mut self) -> Result<Tick, SimError> {
        self.engine.reset_watchdog();
        while self.step()? {}
        Ok(self.engine.now())
    }

    fn dispatch(&mut self, ev: Ev) {
        match ev {
            Ev::RequestArrive { cache, req } => self.on_request_arrive(cache, req),
            Ev::LookupDone { cache, request_id } => self.on_lookup_done(cache, request_id),
            Ev::ResponseArrive { cache, resp } => self.on_response(cache, resp),
            Ev::CancelArrive { cache, cxl } => self.on_cancel(cache, cxl),
            Ev::BusRequest { req } => self.on_bus_request(req),
            Ev::BusCancel { cxl } => self.on_bus_cancel(cxl),
            Ev::SupplyFire {
                cache,
                block,
                request_id,
            } => self.on_supply_fire(cache, block, request_id),
            Ev::SupplyDirect {
                cache,
                block,
                request_id,
                to_cache,
                to_mshr,
            } => self.on_supply_direct(cache, block, request_id, to_cache, to_mshr),
            Ev::MemArrive { req } => self.on_mem_arrive(req),
            Ev::RetryKick { cache } => self.on_retry_kick(cache),
            Ev::CoreDeliver {
                core,
                request_id,
                data,
            } => self.on_core_deliver(core, request_id, data),
            Ev::CoreAct { core, act } => self.on_core_act(core, act),
        }
    }

    // ------------------------------------------------------------------
    // Request path
    // ------------------------------------------------------------------

    fn on_request_arrive(&mut self, cache: CacheId, req: MemRequest) {
        let now = self.engine.now();
        let latency = self.caches[cache.0].hit_latency_ticks;
        self.caches[cache.0].inflight.push(crate::memsys::Inflight {
            req,
            arrived: now,
            cancelled_at: None,
        });
        self.engine.schedule(
            now + latency,
            Ev::LookupDone {
                cache,
                request_id: req.id,
            },
        );
    }

    fn on_lookup_done(&mut self, cache_id: CacheId, request_id: RequestId) {
        let pos = self.caches[cache_id.0]
            .inflight
            .iter()
            .position(|f| f.req.id == request_id)
            .expect("lookup completion without inflight entry");
        let inflight = self.caches[cache_id.0].inflight.remove(pos);
        let req = inflight.req;
        let cancelled_at = inflight.cancelled_at;
        let block = req.block();
        let level = self.caches[cache_id.0].level;

        if let Some(way) = self.caches[cache_id.0].probe(block) {
            // Hit. A cancellation that arrived during the lookup lost the
            // race: the response is already on its way out.
            if cancelled_at.is_some() {
                self.emit(EventKind::CancelDiscarded, Some(req.id), None, Some(level), Some(block));
            }
            self.record_outcome(req.id, ServeLevel::Cache(level));
            let data = {
                let cache = &mut self.caches[cache_id.0];
                if let Some(w) = req.write {
                    w.apply(block, &mut cache.line_mut(way).data);
                    cache.line_mut(way).dirty = true;
                }
                cache.touch(way);
                cache.line(way).data
            };
            if req.write.is_some() && level == 1 {
                self.invalidate_peers(cache_id, block);
            }
            self.emit(EventKind::Hit, Some(req.id), req.inst_id, Some(level), Some(block));
            self.respond_upstream(req.origin, req.id, block, data);
            return;
        }

        // Miss path: coalesce, allocate, or stall.
        let outcome = self.classify_miss(cache_id, block, cancelled_at.is_some());
        match outcome {
            LookupOutcome::Coalesced(idx) => {
                // A cancelled request simply never becomes a target; the MSHR
                // and its remaining targets are unaffected.
                if cancelled_at.is_none() {
                    self.caches[cache_id.0].mshrs[idx].targets.push(Target {
                        request_id: req.id,
                        origin: req.origin,
                        write: req.write,
                        speculative: req.speculative,
                        inst_id: req.inst_id,
                        kind: req.kind,
                    });
                }
            }
            LookupOutcome::MissAllocated(idx) => {
                let downstream_id = self.alloc_request_id();
                self.trace.link_request(downstream_id, req.id);
                {
                    let slot = &mut self.caches[cache_id.0].mshrs[idx];
                    slot.allocated = true;
                    slot.block = block;
                    slot.targets = vec![Target {
                        request_id: req.id,
                        origin: req.origin,
                        write: req.write,
                        speculative: req.speculative,
                        inst_id: req.inst_id,
                        kind: req.kind,
                    }];
                    slot.downstream_sent = true;
                    slot.downstream_req_id = Some(downstream_id);
                }
                self.emit(EventKind::MissAlloc, Some(req.id), req.inst_id, Some(level), Some(block));
                let rd = MemRequest {
                    id: downstream_id,
                    addr: block.0,
                    kind: ReqKind::DataRead,
                    speculative: req.speculative,
                    inst_id: None,
                    issue_tick: self.engine.now(),
                    origin: Origin::Cache {
                        cache: cache_id,
                        mshr_index: idx,
                    },
                    write: None,
                };
                self.send_downstream(cache_id, rd);
                if let Some(cancel_tick) = cancelled_at {
                    // The cancellation was pipelined right behind the lookup:
                    // it frees the fresh MSHR and chases the request it just
                    // sent, departing when its own search would have finished.
                    self.free_mshr_and_forward(cache_id, idx, req.id, Some(cancel_tick));
                }
            }
            LookupOutcome::Blocked => {
                if cancelled_at.is_none() {
                    self.caches[cache_id.0].retry_q.push_back(req);
                    self.schedule_retry_kick(cache_id);
                }
            }
            LookupOutcome::Hit => unreachable!(),
        }
    }

    fn classify_miss(&self, cache_id: CacheId, block: BlockAddr, cancelled: bool) -> LookupOutcome {
        let cache = &self.caches[cache_id.0];
        if let Some(idx) = cache.mshr_for_block(block) {
            if cache.mshrs[idx].targets.len() < cache.cfg.max_targets || cancelled {
                LookupOutcome::Coalesced(idx)
            } else {
                LookupOutcome::Blocked
            }
        } else if let Some(idx) = cache.free_mshr() {
            LookupOutcome::MissAllocated(idx)
        } else {
            LookupOutcome::Blocked
        }
    }

    fn send_downstream(&mut self, from: CacheId, rd: MemRequest) {
        let now = self.engine.now();
        match self.caches[from.0].downstream {
            Downstream::Bus => self.engine.schedule(now, Ev::BusRequest { req: rd }),
            Downstream::Cache(next) => self
                .engine
                .schedule(now, Ev::RequestArrive { cache: next, req: rd }),
            Downstream::Memory => self.engine.schedule(now, Ev::MemArrive { req: rd }),
        }
    }

    fn respond_upstream(&mut self, origin: Origin, request_id: RequestId, block: BlockAddr, data: BlockData) {
        let now = self.engine.now();
        match origin {
            Origin::Core { core } => self.engine.schedule(
                now,
                Ev::CoreDeliver {
                    core,
                    request_id,
                    data,
                },
            ),
            Origin::Cache { cache, mshr_index } => self.engine.schedule(
                now,
                Ev::ResponseArrive {
                    cache,
                    resp: MemResponse {
                        request_id,
                        block,
                        data,
                        mshr_index,
                    },
                },
            ),
        }
    }

    fn schedule_retry_kick(&mut self, cache_id: CacheId) {
        if !self.caches[cache_id.0].retry_scheduled {
            self.caches[cache_id.0].retry_scheduled = true;
            let period = self.clock.period_ticks;
            self.engine
                .schedule_after(period, Ev::RetryKick { cache: cache_id });
        }
    }

    fn on_retry_kick(&mut self, cache_id: CacheId) {
        self.caches[cache_id.0].retry_scheduled = false;
        if let Some(req) = self.caches[cache_id.0].retry_q.pop_front() {
            self.on_request_arrive(cache_id, req);
        }
        if !self.caches[cache_id.0].retry_q.is_empty() {
            self.schedule_retry_kick(cache_id);
        }
    }

    // ------------------------------------------------------------------
    // Bus: level-1 <-> level-2 segment with snooping
    // ------------------------------------------------------------------

    fn on_bus_request(&mut self, req: MemRequest) {
        let block = req.block();
        let from = match req.origin {
            Origin::Cache { cache, .. } => cache,
            Origin::Core { .. } => unreachable!("core requests do not ride the bus"),
        };
        // A peer holding the block dirty intervenes and supplies the data;
        // the shared level below is bypassed for this transfer.
        let supplier = self
            .level1_caches()
            .filter(|&c| c != from)
            .find(|&c| {
                let cache = &self.caches[c.0];
                cache
                    .probe(block)
                    .map(|w| cache.line(w).dirty)
                    .unwrap_or(false)
            });
        if let Some(supplier) = supplier {
            let (to_cache, to_mshr) = match req.origin {
                Origin::Cache { cache, mshr_index } => (cache, mshr_index),
                Origin::Core { .. } => unreachable!(),
            };
            let latency = self.caches[supplier.0].hit_latency_ticks;
            if let Some(idx) = self.caches[supplier.0].free_mshr() {
                let slot = &mut self.caches[supplier.0].mshrs[idx];
                *slot = MshrSlot {
                    allocated: true,
                    block,
                    targets: vec![Target {
                        request_id: req.id,
                        origin: req.origin,
                        write: None,
                        speculative: req.speculative,
                        inst_id: None,
                        kind: req.kind,
                    }],
                    downstream_sent: false,
                    downstream_req_id: None,
                };
                self.engine.schedule_after(
                    latency,
                    Ev::SupplyFire {
                        cache: supplier,
                        block,
                        request_id: req.id,
                    },
                );
            } else {
                // No MSHR free to track the probe; supply anyway, uncancellable.
                self.engine.schedule_after(
                    latency,
                    Ev::SupplyDirect {
                        cache: supplier,
                        block,
                        request_id: req.id,
                        to_cache,
                        to_mshr,
                    },
                );
            }
            return;
        }
        let l2 = self.shared_cache(2);
        self.on_request_arrive(l2, req);
    }

    fn level1_caches(&self) -> impl Iterator<Item = CacheId> {
        (0..2 * self.cfg.cores).map(CacheId)
    }

    fn invalidate_peers(&mut self, writer: CacheId, block: BlockAddr) {
        for c in self.level1_caches().collect::<Vec<_>>() {
            if c == writer {
                continue;
            }
            if let Some((dirty, data)) = self.caches[c.0].invalidate(block) {
                if dirty {
                    // A racing dirty peer loses its permission; salvage the
                    // data so nothing is silently dropped.
                    self.memory.write_block(block, data);
                }
            }
        }
    }

    fn on_supply_fire(&mut self, cache_id: CacheId, block: BlockAddr, request_id: RequestId) {
        let Some(idx) = self.caches[cache_id.0].mshrs.iter().position(|m| {
            m.allocated
                && !m.downstream_sent
                && m.block == block
                && m.targets.first().map(|t| t.request_id) == Some(request_id)
        }) else {
            return; // cancelled before the probe completed
        };
        let target = self.caches[cache_id.0].mshrs[idx].targets[0];
        let slot = &mut self.caches[cache_id.0].mshrs[idx];
        slot.allocated = false;
        slot.targets.clear();
        self.record_outcome(request_id, ServeLevel::Peer);
        self.do_supply(cache_id, block, target.origin, request_id);
    }

    fn on_supply_direct(
        &mut self,
        cache_id: CacheId,
        block: BlockAddr,
        request_id: RequestId,
        to_cache: CacheId,
        to_mshr: usize,
    ) {
        self.record_outcome(request_id, ServeLevel::Peer);
        self.do_supply(
            cache_id,
            block,
            Origin::Cache {
                cache: to_cache,
                mshr_index: to_mshr,
            },
            request_id,
        );
    }

    fn do_supply(&mut self, supplier: CacheId, block: BlockAddr, to: Origin, request_id: RequestId) {
        // Dirty data goes back to memory as it is handed over, so every copy
        // left behind is clean. If the line vanished meanwhile (flushed or
        // evicted), memory already holds the current data.
        let data = if let Some(way) = self.caches[supplier.0].probe(block) {
            let line = self.caches[supplier.0].line_mut(way);
            let data = line.data;
            if line.dirty {
                line.dirty = false;
                self.memory.write_block(block, data);
            }
            data
        } else {
            self.memory.read_block(block)
        };
        self.respond_upstream(to, request_id, block, data);
    }

    // ------------------------------------------------------------------
    // Response path (CheckMSHR)
    // ------------------------------------------------------------------

    fn on_response(&mut self, cache_id: CacheId, resp: MemResponse) {
        let level = self.caches[cache_id.0].level;
        self.emit(EventKind::RespRecv, Some(resp.request_id), None, Some(level), Some(resp.block));
        self.check_emit(cache_id, CheckKind::RespRecv, resp.request_id, resp.block);

        // CheckMSHR: the index must still hold an allocated entry for this
        // block; anything else means the request was cancelled (and the slot
        // possibly reassigned), so the response is dropped on the floor.
        let valid = {
            let cache = &self.caches[cache_id.0];
            resp.mshr_index < cache.mshrs.len() && {
                let slot = &cache.mshrs[resp.mshr_index];
                slot.allocated && slot.block == resp.block && slot.downstream_sent
            }
        };
        if !valid {
            self.emit(
                EventKind::RespDiscarded,
                Some(resp.request_id),
                None,
                Some(level),
                Some(resp.block),
            );
            return;
        }

        let targets = {
            let slot = &mut self.caches[cache_id.0].mshrs[resp.mshr_index];
            let t = std::mem::take(&mut slot.targets);
            slot.allocated = false;
            slot.downstream_req_id = None;
            t
        };

        // Fill the line; the victim's eviction (and writeback) happens now,
        // when the response arrives, not when the MSHR was allocated.
        let mut data = resp.data;
        let mut dirty = false;
        for t in &targets {
            if let Some(w) = t.write {
                w.apply(resp.block, &mut data);
                dirty = true;
            }
        }
        if let Some((victim_block, victim_data)) = self.caches[cache_id.0].install(resp.block, data, dirty) {
            self.writeback_downstream(cache_id, victim_block, victim_data);
        }
        self.emit(EventKind::Fill, Some(resp.request_id), None, Some(level), Some(resp.block));
        // Attribution goes to the serviced targets; a reused same-block MSHR
        // index makes the response id point at the wrong chain.
        let serviced: Vec<RequestId> = targets.iter().map(|t| t.request_id).collect();
        self.trace
            .record_fill(self.engine.now(), level, resp.block, serviced.clone());
        for id in serviced {
            self.check_emit(cache_id, CheckKind::Fill, id, resp.block);
        }
        if dirty && level == 1 {
            self.invalidate_peers(cache_id, resp.block);
        }

        for t in targets {
            self.respond_upstream(t.origin, t.request_id, resp.block, data);
        }
    }

    // ------------------------------------------------------------------
    // Cancellation path (MatchMSHR)
    // ------------------------------------------------------------------

    fn on_cancel(&mut self, cache_id: CacheId, cxl: Cancellation) {
        let level = self.caches[cache_id.0].level;
        self.emit(EventKind::CancelRecv, Some(cxl.request_id), None, Some(level), Some(cxl.block));
        self.check_emit(cache_id, CheckKind::CancelRecv, cxl.request_id, cxl.block);

        if self.bug == Some(BugInjection::IgnoreCancellations) {
            return;
        }

        // MatchMSHR. The removal takes effect now; only the downstream
        // forwarding waits out the search latency.
        if let Some(idx) = self.caches[cache_id.0].mshr_matching(cxl.block, cxl.request_id) {
            let slot = &mut self.caches[cache_id.0].mshrs[idx];
            slot.targets.retain(|t| t.request_id != cxl.request_id);
            if slot.targets.is_empty() {
                self.free_mshr_and_forward(cache_id, idx, cxl.request_id, None);
            }
            return;
        }

        // The request may still be in its lookup window here; remember the
        // cancellation and resolve it when the lookup completes.
        let now = self.engine.now();
        if let Some(f) = self.caches[cache_id.0]
            .inflight
            .iter_mut()
            .find(|f| f.req.id == cxl.request_id)
        {
            if f.cancelled_at.is_none() {
                f.cancelled_at = Some(now);
            }
            return;
        }

        // Or parked in the retry queue waiting for a free MSHR.
        let before = self.caches[cache_id.0].retry_q.len();
        self.caches[cache_id.0]
            .retry_q
            .retain(|r| r.id != cxl.request_id);
        if self.caches[cache_id.0].retry_q.len() != before {
            return;
        }

        self.emit(
            EventKind::CancelDiscarded,
            Some(cxl.request_id),
            None,
            Some(level),
            Some(cxl.block),
        );
    }

    /// Deallocate an emptied MSHR and forward the cancellation one level
    /// toward memory, unless this is the last level before memory.
    /// `cancel_arrival` carries the arrival tick when the cancellation was
    /// resolved late (it had been waiting on a lookup).
    fn free_mshr_and_forward(
        &mut self,
        cache_id: CacheId,
        idx: usize,
        _for_request: RequestId,
        cancel_arrival: Option<Tick>,
    ) {
        let (downstream_id, block, supply_entry) = {
            let slot = &mut self.caches[cache_id.0].mshrs[idx];
            let info = (slot.downstream_req_id, slot.block, !slot.downstream_sent);
            slot.allocated = false;
            slot.targets.clear();
            slot.downstream_req_id = None;
            info
        };
        if supply_entry {
            return; // a snoop-supply entry has nothing downstream to cancel
        }
        if self.caches[cache_id.0].is_llc {
            return; // never forwarded onto the memory bus
        }
        let downstream_id = downstream_id.expect("request MSHR without downstream id");
        let latency = self.caches[cache_id.0].hit_latency_ticks;
        let depart = cancel_arrival.unwrap_or(self.engine.now()) + latency;
        let fwd = Cancellation {
            request_id: downstream_id,
            block,
        };
        match self.caches[cache_id.0].downstream {
            Downstream::Bus => self.engine.schedule(depart, Ev::BusCancel { cxl: fwd }),
            Downstream::Cache(next) => self
                .engine
                .schedule(depart, Ev::CancelArrive { cache: next, cxl: fwd }),
            Downstream::Memory => unreachable!("LLC handled above"),
        }
    }

    /// Broadcast a cancellation on the shared bus segment: every attached
    /// cache (all L1s and the level-2 shared cache) runs MatchMSHR on it.
    fn on_bus_cancel(&mut self, cxl: Cancellation) {
        for c in self.level1_caches().collect::<Vec<_>>() {
            self.on_cancel(c, cxl);
        }
        let l2 = self.shared_cache(2);
        self.on_cancel(l2, cxl);
    }

    /// Place a cancellation on the shared bus (test/driver entry point).
    pub fn snoop_broadcast_cancellation(&mut self, cxl: Cancellation) {
        let now = self.engine.now();
        self.engine.schedule(now, Ev::BusCancel { cxl });
    }

    // ------------------------------------------------------------------
    // Memory
    // ------------------------------------------------------------------

    fn on_mem_arrive(&mut self, req: MemRequest) {
        let (cache, mshr_index) = match req.origin {
            Origin::Cache { cache, mshr_index } => (cache, mshr_index),
            Origin::Core { .. } => unreachable!("memory only talks to the LLC"),
        };
        let block = req.block();
        self.record_outcome(req.id, ServeLevel::Memory);
        let respond_at = self.memory.schedule_access(self.engine.now());
        let resp = MemResponse {
            request_id: req.id,
            block,
            data: self.memory.read_block(block),
            mshr_index,
        };
        self.engine
            .schedule(respond_at, Ev::ResponseArrive { cache, resp });
    }

    // ------------------------------------------------------------------
    // Writebacks, flush, eviction (functional, applied at the current tick)
    // ------------------------------------------------------------------

    fn writeback_downstream(&mut self, from: CacheId, block: BlockAddr, data: BlockData) {
        let mut ds = self.caches[from.0].downstream;
        loop {
            let next = match ds {
                Downstream::Bus => self.shared_cache(2),
                Downstream::Cache(c) => c,
                Downstream::Memory => {
                    self.memory.write_block(block, data);
                    return;
                }
            };
            if let Some(way) = self.caches[next.0].probe(block) {
                let line = self.caches[next.0].line_mut(way);
                line.data = data;
                line.dirty = true;
                return;
            }
            ds = self.caches[next.0].downstream;
        }
    }

    /// Invalidate `addr`'s block at every level, writing the newest dirty
    /// copy back to memory. Outstanding MSHRs are untouched; an in-flight
    /// response will still fill after the flush.
    pub fn flush_block(&mut self, addr: u64) {
        let block = BlockAddr::containing(addr);
        let mut dirty_data: Option<BlockData> = None;
        let order: Vec<CacheId> = self
            .level1_caches()
            .chain((2..=self.cfg.levels()).map(|l| self.shared_cache(l)))
            .collect();
        for c in order {
            if let Some((dirty, data)) = self.caches[c.0].invalidate(block) {
                if dirty && dirty_data.is_none() {
                    dirty_data = Some(data); // closest-to-core dirty copy wins
                }
            }
        }
        if let Some(data) = dirty_data {
            self.memory.write_block(block, data);
        }
        self.emit(EventKind::FlushDone, None, None, None, Some(block));
    }

    /// Remove the block from every cache at `level` only, writing dirty
    /// copies one level down. Other levels are untouched.
    pub fn evict_block_from_level(&mut self, level: u8, addr: u64) {
        let block = BlockAddr::containing(addr);
        let ids: Vec<CacheId> = if level == 1 {
            self.level1_caches().collect()
        } else {
            vec![self.shared_cache(level)]
        };
        for c in ids {
            if let Some((dirty, data)) = self.caches[c.0].invalidate(block) {
                if dirty {
                    self.writeback_downstream(c, block, data);
                }
            }
        }
    }

    // ------------------------------------------------------------------
    // Inspection helpers
    // ------------------------------------------------------------------

    fn record_outcome(&mut self, request_id: RequestId, level: ServeLevel) {
        let root = self.trace.chain_root(request_id);
        self.access_outcomes.push((root, level));
    }

    /// Closest level currently holding the block's line, if any.
    pub fn residency(&self, core: CoreId, addr: u64) -> Option<u8> {
        let block = BlockAddr::containing(addr);
        if self.caches[self.l1d(core).0].probe(block).is_some() {
            return Some(1);
        }
        for level in 2..=self.cfg.levels() {
            if self.caches[self.shared_cache(level).0].probe(block).is_some() {
                return Some(level);
            }
        }
        None
    }

    pub fn write_memory(&mut self, addr: u64, bytes: &[u8]) {
        self.memory.write_bytes(addr, bytes);
    }

    pub fn read_memory(&self, addr: u64, len: usize) -> Vec<u8> {
        self.memory.read_bytes(addr, len)
    }

    pub fn pending_events(&self) -> Vec<&Ev> {
        self.engine.iter_pending().collect()
    }
}

/// Per-request fan-out map: chain roots of every request id seen in `ids`.
pub fn chain_roots(trace: &TraceLog, ids: impl IntoIterator<Item = RequestId>) -> HashMap<RequestId, RequestId> {
    ids.into_iter().map(|id| (id, trace.chain_root(id))).collect()
}
