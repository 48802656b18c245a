//! Randomized invariant checking over the cache hierarchy.
//!
//! Three generators share one driver: `Race` cases issue overlapping
//! speculative loads, writes, flushes and squashes and check the structural
//! MSHR invariants after every event plus the cancellation race properties at
//! the end; `Oracle` cases drive a sequential no-squash stream and compare
//! hit/miss/level outcomes against the functional LRU reference model;
//! `NMinusOne` cases coalesce several loads onto one MSHR, cancel a strict
//! subset, and require the surviving fill to be unchanged in time and
//! content against an uncancelled baseline run.

use std::collections::{BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::SystemConfig;
use crate::cpu::{CoreAction, Role};
use crate::engine::Tick;
use crate::error::SimError;
use crate::memsys::{
    BlockAddr, CacheLevelConfig, CoreId, Downstream, MemoryConfig, ReqKind, RequestId,
};
use crate::refmodel::{RefHierarchy, RefOutcome};
use crate::system::{BugInjection, CheckKind, Ev, ServeLevel, System};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Race,
    Oracle,
    NMinusOne,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FuzzOp {
    Load { addr: u64, speculative: bool },
    Write { addr: u64, value: u64 },
    SquashOutstanding,
    Flush { addr: u64 },
    EvictL1 { addr: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FuzzAction {
    pub at_cycle: u64,
    pub core: usize,
    pub op: FuzzOp,
}

/// A self-contained reproducible case.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FuzzCase {
    pub mode: Mode,
    pub cancel_enabled: bool,
    pub config: SystemConfig,
    pub actions: Vec<FuzzAction>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Violation {
    pub iteration: u64,
    pub property: String,
    pub detail: String,
    pub case: FuzzCase,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FuzzSummary {
    pub iterations: u64,
    pub race_cases: u64,
    pub oracle_cases: u64,
    pub n_minus_one_cases: u64,
}

pub struct FuzzOptions {
    pub iters: u64,
    pub seed: u64,
    pub bug: Option<BugInjection>,
}

// ---------------------------------------------------------------------
// Case generation
// ---------------------------------------------------------------------

fn gen_config(rng: &mut ChaCha8Rng, cores: usize) -> SystemConfig {
    let mk = |rng: &mut ChaCha8Rng, sets: u64, ways: u64| CacheLevelConfig {
        size_bytes: sets * ways * 64,
        associativity: ways,
        hit_latency_cycles: rng.gen_range(1..=6),
        mshr_count: [1, 2, 4][rng.gen_range(0..3)],
        max_targets: [1, 2, 4][rng.gen_range(0..3)],
    };
    let sets = [2, 4][rng.gen_range(0..2)];
    let ways = [1, 2][rng.gen_range(0..2)];
    let l1 = mk(rng, sets, ways);
    let mut shared = vec![mk(rng, 8, 2)];
    if rng.gen_bool(0.3) {
        shared.push(mk(rng, 16, 2));
    }
    SystemConfig {
        cores,
        core_frequency_hz: [1_000_000_000, 3_000_000_000][rng.gen_range(0..2)],
        l1i: l1,
        l1d: l1,
        shared_levels: shared,
        memory: MemoryConfig {
            access_latency_ns: rng.gen_range(20..=100),
            capacity_bytes: 1 << 20,
        },
    }
}

fn gen_addr_pool(rng: &mut ChaCha8Rng) -> Vec<u64> {
    // A handful of blocks, biased to collide in the small L1 sets.
    let n = rng.gen_range(4..=10);
    (0..n).map(|_| rng.gen_range(0u64..64) * 64).collect()
}

fn gen_race_case(rng: &mut ChaCha8Rng) -> FuzzCase {
    let cores = if rng.gen_bool(0.3) { 2 } else { 1 };
    let config = gen_config(rng, cores);
    let pool = gen_addr_pool(rng);
    let n = rng.gen_range(8..=32);
    let mut cycle = 0u64;
    let mut actions = Vec::with_capacity(n);
    for _ in 0..n {
        cycle += rng.gen_range(0..=25);
        let addr = pool[rng.gen_range(0..pool.len())];
        let op = match rng.gen_range(0..100) {
            0..=49 => FuzzOp::Load {
                addr,
                speculative: rng.gen_bool(0.6),
            },
            50..=64 => FuzzOp::Write {
                addr,
                value: rng.gen(),
            },
            65..=79 => FuzzOp::SquashOutstanding,
            80..=89 => FuzzOp::Flush { addr },
            _ => FuzzOp::EvictL1 { addr },
        };
        actions.push(FuzzAction {
            at_cycle: cycle,
            core: rng.gen_range(0..cores),
            op,
        });
    }
    FuzzCase {
        mode: Mode::Race,
        cancel_enabled: true,
        config,
        actions,
    }
}

fn gen_oracle_case(rng: &mut ChaCha8Rng, cancel_enabled: bool) -> FuzzCase {
    let config = gen_config(rng, 1);
    let pool = gen_addr_pool(rng);
    let n = rng.gen_range(50..=200);
    let actions = (0..n)
        .map(|i| {
            let addr = pool[rng.gen_range(0..pool.len())];
            let op = match rng.gen_range(0..100) {
                0..=59 => FuzzOp::Load {
                    addr,
                    speculative: false,
                },
                60..=79 => FuzzOp::Write {
                    addr,
                    value: rng.gen(),
                },
                80..=89 => FuzzOp::Flush { addr },
                _ => FuzzOp::EvictL1 { addr },
            };
            FuzzAction {
                at_cycle: i as u64,
                core: 0,
                op,
            }
        })
        .collect();
    FuzzCase {
        mode: Mode::Oracle,
        cancel_enabled,
        config,
        actions,
    }
}

fn gen_n_minus_one_case(rng: &mut ChaCha8Rng) -> FuzzCase {
    let config = gen_config(rng, 1);
    let addr = rng.gen_range(0u64..64) * 64;
    let n = rng.gen_range(2..=4.min(config.l1d.max_targets));
    let cancelled = rng.gen_range(1..n); // strict subset of the targets
    let mut actions = Vec::new();
    let mut cycle = 0;
    for i in 0..n {
        actions.push(FuzzAction {
            at_cycle: cycle,
            core: 0,
            op: FuzzOp::Load {
                addr,
                speculative: i < cancelled,
            },
        });
        cycle += rng.gen_range(1..=3);
    }
    actions.push(FuzzAction {
        at_cycle: cycle + rng.gen_range(1..=5),
        core: 0,
        op: FuzzOp::SquashOutstanding,
    });
    FuzzCase {
        mode: Mode::NMinusOne,
        cancel_enabled: true,
        config,
        actions,
    }
}

// ---------------------------------------------------------------------
// Driving and checking
// ---------------------------------------------------------------------

fn schedule_actions(sys: &mut System, actions: &[FuzzAction]) {
    let period = sys.clock.period_ticks;
    for a in actions {
        let act = match a.op {
            FuzzOp::Load { addr, speculative } => CoreAction::Issue {
                addr,
                kind: ReqKind::DataRead,
                speculative,
                role: Role::Plain,
                write: None,
            },
            FuzzOp::Write { addr, value } => CoreAction::Issue {
                addr,
                kind: ReqKind::DataWrite,
                speculative: false,
                role: Role::Plain,
                write: Some(value),
            },
            FuzzOp::SquashOutstanding => CoreAction::SquashOutstanding,
            FuzzOp::Flush { addr } => CoreAction::Flush { addr },
            FuzzOp::EvictL1 { addr } => CoreAction::EvictL1 { addr },
        };
        sys.engine.schedule(
            Tick(a.at_cycle * period),
            Ev::CoreAct {
                core: CoreId(a.core),
                act,
            },
        );
    }
}

fn structural_check(sys: &System) -> Result<(), (String, String)> {
    for cache in &sys.caches {
        let mut blocks: Vec<BlockAddr> = Vec::new();
        for (i, m) in cache.mshrs.iter().enumerate() {
            if !m.allocated {
                continue;
            }
            if m.targets.is_empty() {
                return Err((
                    "mshr-structural".into(),
                    format!("cache {:?} mshr {i} allocated with no targets", cache.id),
                ));
            }
            if m.targets.len() > cache.cfg.max_targets {
                return Err((
                    "mshr-structural".into(),
                    format!("cache {:?} mshr {i} exceeds max_targets", cache.id),
                ));
            }
            if blocks.contains(&m.block) {
                return Err((
                    "mshr-structural".into(),
                    format!("cache {:?} has two allocated MSHRs for {}", cache.id, m.block),
                ));
            }
            blocks.push(m.block);
        }
    }
    Ok(())
}

/// Every allocated request-MSHR must have exactly one live carrier for its
/// downstream request: a queued event, a lookup/retry entry or MSHR target
/// at the next level, or an in-service memory access.
fn conservation_check(sys: &System) -> Result<(), (String, String)> {
    let mut event_carriers: Vec<RequestId> = Vec::new();
    for ev in sys.engine.iter_pending() {
        match ev {
            Ev::ResponseArrive { resp, .. } => event_carriers.push(resp.request_id),
            Ev::BusRequest { req } => event_carriers.push(req.id),
            Ev::RequestArrive { req, .. } => event_carriers.push(req.id),
            Ev::MemArrive { req } => event_carriers.push(req.id),
            Ev::SupplyFire { request_id, .. } | Ev::SupplyDirect { request_id, .. } => {
                event_carriers.push(*request_id)
            }
            _ => {}
        }
    }
    for cache in &sys.caches {
        for (i, m) in cache.mshrs.iter().enumerate() {
            if !(m.allocated && m.downstream_sent) {
                continue;
            }
            let d = m.downstream_req_id.expect("request MSHR without downstream id");
            let mut count = event_carriers.iter().filter(|&&id| id == d).count();
            let next = match cache.downstream {
                Downstream::Bus => Some(sys.shared_cache(2)),
                Downstream::Cache(c) => Some(c),
                Downstream::Memory => None,
            };
            if let Some(next) = next {
                let x = sys.cache(next);
                count += x.inflight.iter().filter(|f| f.req.id == d).count();
                count += x.retry_q.iter().filter(|r| r.id == d).count();
                count += x
                    .mshrs
                    .iter()
                    .filter(|mm| {
                        mm.allocated
                            && mm.downstream_sent
                            && mm.targets.iter().any(|t| t.request_id == d)
                    })
                    .count();
            }
            if count != 1 {
                return Err((
                    "mshr-conservation".into(),
                    format!(
                        "cache {:?} mshr {i} (block {}) downstream request {:?} has {count} carriers",
                        cache.id, m.block, d
                    ),
                ));
            }
        }
    }
    Ok(())
}

/// End-of-run race properties over the per-cache check log.
fn race_property_check(sys: &System) -> Result<(), (String, String)> {
    let log = sys.check_log.as_ref().expect("check log enabled");
    struct Group {
        first_cancel: Option<u64>,
        first_resp: Option<u64>,
        fills: Vec<u64>,
    }
    let mut groups: HashMap<(usize, RequestId), Group> = HashMap::new();
    for ev in log {
        let root = sys.trace.chain_root(ev.request_id);
        let g = groups.entry((ev.cache.0, root)).or_insert(Group {
            first_cancel: None,
            first_resp: None,
            fills: Vec::new(),
        });
        match ev.kind {
            CheckKind::CancelRecv => {
                g.first_cancel = Some(g.first_cancel.map_or(ev.seq, |s| s.min(ev.seq)))
            }
            CheckKind::RespRecv => {
                g.first_resp = Some(g.first_resp.map_or(ev.seq, |s| s.min(ev.seq)))
            }
            CheckKind::Fill => g.fills.push(ev.seq),
        }
    }
    for ((cache, root), g) in &groups {
        if let (Some(c), Some(r)) = (g.first_cancel, g.first_resp) {
            if c < r && !g.fills.is_empty() {
                return Err((
                    "cancel-beats-response".into(),
                    format!(
                        "cache {cache}: chain {root:?} filled although the cancellation (seq {c}) preceded the response (seq {r})"
                    ),
                ));
            }
        }
    }

    // Downward closure toward memory, for chains actually served by memory.
    let k = sys.cfg.levels();
    let memory_roots: BTreeSet<RequestId> = sys
        .access_outcomes
        .iter()
        .filter(|(_, o)| *o == ServeLevel::Memory)
        .map(|(root, _)| *root)
        .collect();
    let mut fills_by_root: HashMap<RequestId, BTreeSet<u8>> = HashMap::new();
    for ev in log {
        if ev.kind == CheckKind::Fill {
            let root = sys.trace.chain_root(ev.request_id);
            fills_by_root.entry(root).or_default().insert(ev.level);
        }
    }
    for root in &memory_roots {
        if let Some(fills) = fills_by_root.get(root) {
            for &lvl in fills {
                if lvl < k && !fills.contains(&(lvl + 1)) {
                    return Err((
                        "downward-closed-changes".into(),
                        format!(
                            "chain {root:?}: fill at level {lvl} without a fill at level {} (fills: {fills:?})",
                            lvl + 1
                        ),
                    ));
                }
            }
        }
    }
    Ok(())
}

fn run_race_case(case: &FuzzCase, bug: Option<BugInjection>) -> Result<(), (String, String)> {
    let mut sys = System::new(case.config.clone(), case.cancel_enabled)
        .map_err(|e| ("setup".to_string(), e.to_string()))?;
    sys.bug = bug;
    sys.check_log = Some(Vec::new());
    schedule_actions(&mut sys, &case.actions);
    sys.engine.reset_watchdog();
    loop {
        match sys.step() {
            Ok(false) => break,
            Ok(true) => {
                structural_check(&sys)?;
                conservation_check(&sys)?;
            }
            Err(e) => return Err(("divergence".into(), e.to_string())),
        }
    }
    race_property_check(&sys)
}

fn run_oracle_case(case: &FuzzCase) -> Result<(), (String, String)> {
    let mut sys = System::new(case.config.clone(), case.cancel_enabled)
        .map_err(|e| ("setup".to_string(), e.to_string()))?;
    let mut reference = RefHierarchy::new(&case.config);
    let core = CoreId(0);
    for (i, a) in case.actions.iter().enumerate() {
        match a.op {
            FuzzOp::Load { addr, .. } | FuzzOp::Write { addr, .. } => {
                let write = match a.op {
                    FuzzOp::Write { value, .. } => Some(value),
                    _ => None,
                };
                let kind = if write.is_some() {
                    ReqKind::DataWrite
                } else {
                    ReqKind::DataRead
                };
                let before = sys.access_outcomes.len();
                sys.issue_request(core, addr, kind, false, Role::Plain, write)
                    .map_err(|e| ("setup".to_string(), e.to_string()))?;
                sys.run_until_idle()
                    .map_err(|e| ("divergence".to_string(), e.to_string()))?;
                let expected = reference.access(addr);
                let got = sys.access_outcomes[before..]
                    .first()
                    .map(|(_, o)| *o)
                    .expect("sequential access records an outcome");
                let matches = matches!(
                    (expected, got),
                    (RefOutcome::Memory, ServeLevel::Memory)
                ) || matches!((expected, got), (RefOutcome::Level(l), ServeLevel::Cache(c)) if l == c);
                if !matches {
                    return Err((
                        "oracle-equivalence".into(),
                        format!(
                            "access {i} at {addr:#x}: reference says {expected:?}, simulator says {got:?}"
                        ),
                    ));
                }
            }
            FuzzOp::Flush { addr } => {
                sys.flush_block(addr);
                reference.flush(addr);
            }
            FuzzOp::EvictL1 { addr } => {
                sys.evict_block_from_level(1, addr);
                reference.evict_level(1, addr);
            }
            FuzzOp::SquashOutstanding => {}
        }
    }
    Ok(())
}

fn run_n_minus_one_case(case: &FuzzCase) -> Result<(), (String, String)> {
    let block = case
        .actions
        .iter()
        .find_map(|a| match a.op {
            FuzzOp::Load { addr, .. } => Some(BlockAddr::containing(addr)),
            _ => None,
        })
        .expect("n-1 case has loads");

    let fill_of = |with_squash: bool| -> Result<(Option<(Tick, u8)>, Option<Vec<u8>>), (String, String)> {
        let mut sys = System::new(case.config.clone(), case.cancel_enabled)
            .map_err(|e| ("setup".to_string(), e.to_string()))?;
        sys.check_log = Some(Vec::new());
        let actions: Vec<FuzzAction> = case
            .actions
            .iter()
            .filter(|a| with_squash || !matches!(a.op, FuzzOp::SquashOutstanding))
            .copied()
            .collect();
        schedule_actions(&mut sys, &actions);
        sys.run_until_idle()
            .map_err(|e| ("divergence".to_string(), e.to_string()))?;
        let l1d = sys.l1d(CoreId(0));
        let fill = sys
            .check_log
            .as_ref()
            .unwrap()
            .iter()
            .find(|e| e.kind == CheckKind::Fill && e.cache == l1d && e.block == block)
            .map(|e| (e.tick, e.level));
        let content = sys
            .cache(l1d)
            .probe(block)
            .map(|way| sys.cache(l1d).line(way).data.to_vec());
        Ok((fill, content))
    };

    let (fill_base, content_base) = fill_of(false)?;
    let (fill_cancelled, content_cancelled) = fill_of(true)?;
    if fill_base != fill_cancelled || content_base != content_cancelled {
        return Err((
            "n-minus-one-neutrality".into(),
            format!(
                "cancelling a strict subset changed the fill: baseline {fill_base:?}, cancelled {fill_cancelled:?}"
            ),
        ));
    }
    Ok(())
}

fn run_case(case: &FuzzCase, bug: Option<BugInjection>) -> Result<(), (String, String)> {
    match case.mode {
        Mode::Race => run_race_case(case, bug),
        Mode::Oracle => run_oracle_case(case),
        Mode::NMinusOne => run_n_minus_one_case(case),
    }
}

/// Greedy delta-debugging over the action list.
fn shrink(case: &FuzzCase, bug: Option<BugInjection>) -> FuzzCase {
    let mut best = case.clone();
    let mut budget = 300usize;
    let mut chunk = best.actions.len().max(1) / 2;
    while chunk >= 1 && budget > 0 {
        let mut start = 0;
        let mut removed_any = false;
        while start < best.actions.len() && budget > 0 {
            let mut candidate = best.clone();
            let end = (start + chunk).min(candidate.actions.len());
            candidate.actions.drain(start..end);
            budget -= 1;
            if !candidate.actions.is_empty() && run_case(&candidate, bug).is_err() {
                best = candidate;
                removed_any = true;
            } else {
                start += chunk;
            }
        }
        if !removed_any {
            chunk /= 2;
        }
    }
    best
}

/// Run `iters` randomized cases; the first violation is shrunk and returned.
pub fn run_fuzz(opts: &FuzzOptions) -> Result<FuzzSummary, Box<Violation>> {
    let mut summary = FuzzSummary::default();
    for i in 0..opts.iters {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(i.wrapping_mul(0x9e3779b97f4a7c15)));
        let case = match i % 4 {
            0 | 1 => {
                summary.race_cases += 1;
                gen_race_case(&mut rng)
            }
            2 => {
                summary.n_minus_one_cases += 1;
                gen_n_minus_one_case(&mut rng)
            }
            _ => {
                summary.oracle_cases += 1;
                gen_oracle_case(&mut rng, i % 8 < 4)
            }
        };
        if let Err((property, detail)) = run_case(&case, opts.bug) {
            let minimized = shrink(&case, opts.bug);
            return Err(Box::new(Violation {
                iteration: i,
                property,
                detail,
                case: minimized,
            }));
        }
        summary.iterations += 1;
    }
    Ok(summary)
}

/// Reference to SimError so fuzz callers can surface setup problems uniformly.
pub fn violation_to_error(v: &Violation) -> SimError {
    SimError::Schema(format!(
        "fuzz violation of {} at iteration {}: {}",
        v.property, v.iteration, v.detail
    ))
}
