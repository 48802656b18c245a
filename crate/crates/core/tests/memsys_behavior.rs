//! Hierarchy behavior: miss handling, coalescing, structural stalls, the
//! cancellation protocol races, flush/evict semantics, and memory timing.

use squashsim::config::{preset_c1, SystemConfig};
use squashsim::cpu::{CoreAction, Role};
use squashsim::engine::Tick;
use squashsim::memsys::{BlockAddr, Cancellation, CoreId, ReqKind};
use squashsim::metrics::EventKind;
use squashsim::system::{CheckKind, Ev, System};

const CORE: CoreId = CoreId(0);

fn new_c1(cancel: bool) -> System {
    System::new(preset_c1(), cancel).unwrap()
}

fn count_kind(sys: &System, kind: EventKind) -> usize {
    sys.trace.events().iter().filter(|e| e.kind == kind).count()
}

fn count_kind_at(sys: &System, kind: EventKind, level: u8) -> usize {
    sys.trace
        .events()
        .iter()
        .filter(|e| e.kind == kind && e.level == Some(level))
        .count()
}

#[test]
fn l1_hit_takes_four_core_cycles_under_c1() {
    let mut sys = new_c1(true);
    sys.timed_probe(CORE, 0x4000).unwrap(); // warm the line
    let cycles = sys.timed_probe(CORE, 0x4000).unwrap();
    assert_eq!(cycles, 4);
}

#[test]
fn l2_resident_probe_composes_l1_plus_l2_latency() {
    let mut sys = new_c1(true);
    sys.timed_probe(CORE, 0x4000).unwrap();
    sys.evict_block_from_level(1, 0x4000);
    assert_eq!(sys.timed_probe(CORE, 0x4000).unwrap(), 18);
    // The fill restored it to L1.
    assert_eq!(sys.timed_probe(CORE, 0x4000).unwrap(), 4);
}

#[test]
fn full_miss_pays_the_memory_latency() {
    let mut sys = new_c1(true);
    let cycles = sys.timed_probe(CORE, 0x4000).unwrap();
    // 18 cycles of lookups plus 50 ns at 333 ps/cycle.
    assert_eq!(cycles, 169);
    assert!(cycles >= 150);
}

#[test]
fn memory_response_arrives_after_50000_ticks() {
    let mut sys = new_c1(true);
    sys.timed_probe(CORE, 0x9000).unwrap();
    let mem_send = sys
        .trace
        .events()
        .iter()
        .find(|e| e.kind == EventKind::MissAlloc && e.level == Some(2))
        .unwrap()
        .tick;
    let fill = sys
        .trace
        .events()
        .iter()
        .find(|e| e.kind == EventKind::Fill && e.level == Some(2))
        .unwrap()
        .tick;
    assert_eq!(fill.0 - mem_send.0, 50_000);
}

#[test]
fn same_block_misses_coalesce_into_one_mshr() {
    let mut sys = new_c1(true);
    sys.issue_request(CORE, 0x8000, ReqKind::DataRead, false, Role::Plain, None)
        .unwrap();
    sys.issue_request(CORE, 0x8010, ReqKind::DataRead, false, Role::Plain, None)
        .unwrap();
    sys.run_until_idle().unwrap();
    // One allocation per level, one memory round trip, both served.
    assert_eq!(count_kind_at(&sys, EventKind::MissAlloc, 1), 1);
    assert_eq!(count_kind_at(&sys, EventKind::MissAlloc, 2), 1);
    assert_eq!(count_kind_at(&sys, EventKind::Fill, 1), 1);
    let completed = sys.cores[0]
        .slots
        .values()
        .filter(|s| s.complete_tick.is_some())
        .count();
    assert_eq!(completed, 2);
}

#[test]
fn single_mshr_stalls_the_second_miss_until_the_first_fills() {
    let mut cfg = preset_c1();
    cfg.l1d.mshr_count = 1;
    let mut sys = System::new(cfg, true).unwrap();
    let (a, _) = sys
        .issue_request(CORE, 0x1000, ReqKind::DataRead, false, Role::Plain, None)
        .unwrap();
    let (b, _) = sys
        .issue_request(CORE, 0x2000, ReqKind::DataRead, false, Role::Plain, None)
        .unwrap();
    sys.run_until_idle().unwrap();
    let slot_a = *sys.cores[0].slot(a);
    let slot_b = *sys.cores[0].slot(b);
    let done_a = slot_a.complete_tick.unwrap();
    let done_b = slot_b.complete_tick.unwrap();
    // B could only allocate after A's fill freed the single MSHR; it pays a
    // full second round trip.
    assert!(done_b.0 >= done_a.0 + 50_000);
}

#[test]
fn cancel_sole_target_frees_mshr_and_forwards_to_l2() {
    let mut sys = new_c1(true);
    let (inst, _) = sys
        .issue_request(CORE, 0x3000, ReqKind::DataRead, true, Role::Plain, None)
        .unwrap();
    // Let the miss reach memory, then squash.
    let squash_at = Tick(8 * 333);
    sys.engine.schedule(
        squash_at,
        Ev::CoreAct {
            core: CORE,
            act: CoreAction::Squash { insts: vec![inst] },
        },
    );
    sys.run_until_idle().unwrap();
    assert_eq!(count_kind(&sys, EventKind::CancelSent), 1);
    assert!(count_kind_at(&sys, EventKind::CancelRecv, 1) >= 1);
    assert!(count_kind_at(&sys, EventKind::CancelRecv, 2) >= 1);
    // The memory response still arrives at the LLC and is discarded there.
    assert_eq!(count_kind_at(&sys, EventKind::RespDiscarded, 2), 1);
    assert_eq!(count_kind(&sys, EventKind::Fill), 0);
    for cache in &sys.caches {
        assert_eq!(cache.allocated_mshr_count(), 0);
    }
}

#[test]
fn cancelling_one_of_two_targets_keeps_the_fill_identical() {
    // Baseline: two loads coalesce, no squash.
    let run = |squash: bool| -> (Tick, Vec<u8>) {
        let mut sys = new_c1(true);
        sys.write_memory(0x3000, b"payload!");
        sys.issue_request(CORE, 0x3000, ReqKind::DataRead, true, Role::Plain, None)
            .unwrap();
        sys.issue_request(CORE, 0x3008, ReqKind::DataRead, false, Role::Plain, None)
            .unwrap();
        if squash {
            sys.engine.schedule(
                Tick(6 * 333),
                Ev::CoreAct {
                    core: CORE,
                    act: CoreAction::SquashOutstanding,
                },
            );
        }
        sys.run_until_idle().unwrap();
        let fill = sys
            .trace
            .events()
            .iter()
            .find(|e| e.kind == EventKind::Fill && e.level == Some(1))
            .expect("the surviving target still fills");
        let l1d = sys.l1d(CORE);
        let way = sys.cache(l1d).probe(BlockAddr(0x3000)).unwrap();
        (fill.tick, sys.cache(l1d).line(way).data.to_vec())
    };
    let (t_base, d_base) = run(false);
    let (t_cancel, d_cancel) = run(true);
    assert_eq!(t_base, t_cancel);
    assert_eq!(d_base, d_cancel);
    assert_eq!(&d_base[0..8], b"payload!");
}

#[test]
fn cancellation_after_service_is_discarded() {
    let mut sys = new_c1(true);
    let (_, req) = sys
        .issue_request(CORE, 0x3000, ReqKind::DataRead, true, Role::Plain, None)
        .unwrap();
    sys.run_until_idle().unwrap(); // completes normally
    let before = count_kind(&sys, EventKind::CancelDiscarded);
    sys.engine.schedule(
        sys.now(),
        Ev::CancelArrive {
            cache: sys.l1d(CORE),
            cxl: Cancellation {
                request_id: req,
                block: BlockAddr::containing(0x3000),
            },
        },
    );
    sys.run_until_idle().unwrap();
    assert_eq!(count_kind(&sys, EventKind::CancelDiscarded), before + 1);
}

#[test]
fn reassigned_mshr_index_discards_the_stale_response() {
    // Squash a miss so its L1 MSHR frees, then immediately start a miss to a
    // different block that will reuse index 0 before the first response
    // returns. CheckMSHR must reject the stale response by block mismatch.
    let mut sys = new_c1(true);
    let (inst, _) = sys
        .issue_request(CORE, 0x5000, ReqKind::DataRead, true, Role::Plain, None)
        .unwrap();
    sys.engine.schedule(
        Tick(8 * 333),
        Ev::CoreAct {
            core: CORE,
            act: CoreAction::Squash { insts: vec![inst] },
        },
    );
    sys.engine.schedule(
        Tick(20 * 333),
        Ev::CoreAct {
            core: CORE,
            act: CoreAction::Issue {
                addr: 0x6000,
                kind: ReqKind::DataRead,
                speculative: false,
                role: Role::Plain,
                write: None,
            },
        },
    );
    sys.run_until_idle().unwrap();
    // First chain discarded at the LLC, second fills normally.
    assert_eq!(count_kind_at(&sys, EventKind::RespDiscarded, 2), 1);
    assert_eq!(count_kind_at(&sys, EventKind::Fill, 1), 1);
    let l1d = sys.l1d(CORE);
    assert!(sys.cache(l1d).probe(BlockAddr(0x6000)).is_some());
    assert!(sys.cache(l1d).probe(BlockAddr(0x5000)).is_none());
}

#[test]
fn flush_invalidates_everywhere_and_writes_back_dirty_data() {
    let mut sys = new_c1(true);
    // Establish a dirty line in L1.
    sys.issue_request(CORE, 0x7000, ReqKind::DataWrite, false, Role::Plain, Some(0xdead_beef))
        .unwrap();
    sys.run_until_idle().unwrap();
    assert_eq!(sys.residency(CORE, 0x7000), Some(1));
    sys.flush_block(0x7000);
    assert_eq!(sys.residency(CORE, 0x7000), None);
    assert_eq!(
        sys.read_memory(0x7000, 8),
        0xdead_beefu64.to_le_bytes().to_vec()
    );
    // Next access pays the full miss again.
    assert_eq!(sys.timed_probe(CORE, 0x7000).unwrap(), 169);
    // Flushing a non-resident block is a no-op.
    sys.flush_block(0xa000);
    assert_eq!(sys.residency(CORE, 0xa000), None);
}

#[test]
fn evict_from_l1_leaves_l2_and_writes_back_dirty_copies() {
    let mut sys = new_c1(true);
    sys.issue_request(CORE, 0x7100, ReqKind::DataWrite, false, Role::Plain, Some(77))
        .unwrap();
    sys.run_until_idle().unwrap();
    sys.evict_block_from_level(1, 0x7100);
    // The dirty data moved into the L2 copy.
    let l2 = sys.shared_cache(2);
    let way = sys.cache(l2).probe(BlockAddr(0x7100)).unwrap();
    assert!(sys.cache(l2).line(way).dirty);
    assert_eq!(&sys.cache(l2).line(way).data[0..8], &77u64.to_le_bytes());
    assert_eq!(sys.timed_probe(CORE, 0x7100).unwrap(), 18);
    // Evicting a non-resident line is a no-op.
    sys.evict_block_from_level(1, 0xb000);
}

#[test]
fn memory_responses_come_back_in_fifo_order() {
    let mut sys = new_c1(true);
    sys.issue_request(CORE, 0x1000, ReqKind::DataRead, false, Role::Plain, None)
        .unwrap();
    sys.issue_request(CORE, 0x2000, ReqKind::DataRead, false, Role::Plain, None)
        .unwrap();
    sys.run_until_idle().unwrap();
    let fills: Vec<BlockAddr> = sys
        .trace
        .events()
        .iter()
        .filter(|e| e.kind == EventKind::Fill && e.level == Some(2))
        .filter_map(|e| e.block)
        .collect();
    assert_eq!(fills, vec![BlockAddr(0x1000), BlockAddr(0x2000)]);
    // Serialized service: the second response leaves a full access after the first.
    let ticks: Vec<u64> = sys
        .trace
        .events()
        .iter()
        .filter(|e| e.kind == EventKind::Fill && e.level == Some(2))
        .map(|e| e.tick.0)
        .collect();
    assert_eq!(ticks[1] - ticks[0], 50_000);
}

#[test]
fn snooped_cancellation_frees_a_probe_allocated_peer_mshr() {
    let mut sys = new_c1(true);
    sys.check_log = Some(Vec::new());
    let core1 = CoreId(1);
    // Core 1 owns block X dirty in its L1D.
    sys.issue_request(core1, 0xc000, ReqKind::DataWrite, false, Role::Plain, Some(42))
        .unwrap();
    sys.run_until_idle().unwrap();
    let l1d1 = sys.l1d(core1);
    assert!(sys.cache(l1d1).probe(BlockAddr(0xc000)).is_some());
    let fills_from_setup = count_kind(&sys, EventKind::Fill);

    // Core 0 speculatively reads X; the bus probe will allocate a supply
    // MSHR in core 1's L1D. Squash while core 0's lookup is still running so
    // the chasing cancellation reaches the bus before the supply fires.
    let t0 = sys.now();
    let (inst, _) = sys
        .issue_request(CORE, 0xc000, ReqKind::DataRead, true, Role::Plain, None)
        .unwrap();
    sys.engine.schedule(
        Tick(t0.0 + 2 * 333),
        Ev::CoreAct {
            core: CORE,
            act: CoreAction::Squash { insts: vec![inst] },
        },
    );
    sys.run_until_idle().unwrap();

    // The snooped cancellation reached the peer and the supply never ran:
    // the peer's line is still dirty and memory still holds stale data.
    let log = sys.check_log.as_ref().unwrap();
    assert!(log
        .iter()
        .any(|e| e.kind == CheckKind::CancelRecv && e.cache == l1d1));
    let way = sys.cache(l1d1).probe(BlockAddr(0xc000)).unwrap();
    assert!(sys.cache(l1d1).line(way).dirty);
    assert_ne!(sys.read_memory(0xc000, 8), 42u64.to_le_bytes().to_vec());
    assert_eq!(count_kind(&sys, EventKind::Fill), fills_from_setup); // nothing new filled
    for cache in &sys.caches {
        assert_eq!(cache.allocated_mshr_count(), 0);
    }
}

#[test]
fn uncancelled_peer_probe_supplies_dirty_data() {
    let mut sys = new_c1(true);
    let core1 = CoreId(1);
    sys.issue_request(core1, 0xc000, ReqKind::DataWrite, false, Role::Plain, Some(42))
        .unwrap();
    sys.run_until_idle().unwrap();
    // Core 0 reads it; the peer supplies and memory absorbs the dirty data.
    sys.issue_request(CORE, 0xc000, ReqKind::DataRead, false, Role::Plain, None)
        .unwrap();
    sys.run_until_idle().unwrap();
    assert_eq!(sys.read_memory(0xc000, 8), 42u64.to_le_bytes().to_vec());
    let l1d0 = sys.l1d(CORE);
    assert!(sys.cache(l1d0).probe(BlockAddr(0xc000)).is_some());
    // Supplier downgraded to clean.
    let l1d1 = sys.l1d(core1);
    let way = sys.cache(l1d1).probe(BlockAddr(0xc000)).unwrap();
    assert!(!sys.cache(l1d1).line(way).dirty);
}

#[test]
fn broadcast_for_an_unknown_block_discards_everywhere() {
    let mut sys = new_c1(true);
    sys.snoop_broadcast_cancellation(Cancellation {
        request_id: squashsim::memsys::RequestId(9999),
        block: BlockAddr(0xf000),
    });
    sys.run_until_idle().unwrap();
    // 2 cores x (L1I + L1D) + L2, every one a no-match.
    assert_eq!(count_kind(&sys, EventKind::CancelDiscarded), 5);
}

#[test]
fn single_core_bus_cancellation_behaves_like_direct_forwarding() {
    let mut cfg: SystemConfig = preset_c1();
    cfg.cores = 1;
    let mut sys = System::new(cfg, true).unwrap();
    let (inst, _) = sys
        .issue_request(CORE, 0x3000, ReqKind::DataRead, true, Role::Plain, None)
        .unwrap();
    sys.engine.schedule(
        Tick(8 * 333),
        Ev::CoreAct {
            core: CORE,
            act: CoreAction::Squash { insts: vec![inst] },
        },
    );
    sys.run_until_idle().unwrap();
    // The L2 MSHR was cleaned via the bus path and the late response dropped.
    assert_eq!(count_kind_at(&sys, EventKind::RespDiscarded, 2), 1);
    assert_eq!(count_kind(&sys, EventKind::Fill), 0);
}

#[test]
fn out_of_range_address_is_a_config_error() {
    let mut sys = new_c1(true);
    let err = sys.issue_request(CORE, u64::MAX - 4, ReqKind::DataRead, false, Role::Plain, None);
    assert!(err.is_err());
}
