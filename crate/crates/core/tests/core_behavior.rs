//! Speculative-core behavior: episode execution, squash/cancellation rules,
//! the condition-resolution races under both case-study presets, fetch and
//! translation cancellation.

use squashsim::config::{preset_c1, preset_c2};
use squashsim::cpu::{Role, SlotState, SpeculationEpisode};
use squashsim::memsys::{BlockAddr, CoreId, ReqKind};
use squashsim::metrics::{EventKind, TraceLog};
use squashsim::system::System;

const CORE: CoreId = CoreId(0);
const CONDITION: u64 = 0x1040;
const SECRET: u64 = 0x2080;
const TIMING: u64 = 0x10_0000;

fn episode(no: u64) -> SpeculationEpisode {
    SpeculationEpisode {
        episode_no: no,
        condition_load_addr: CONDITION,
        access_addr: SECRET,
        timing_base: TIMING,
        stride: 4096,
        resolve_latency_cycles: 10,
        access_addr_gen_cycles: 5,
        transmit_addr_gen_cycles: 3,
    }
}

fn fills_for_chain(sys: &System, root: squashsim::memsys::RequestId) -> Vec<u8> {
    let trace: &TraceLog = &sys.trace;
    let members: Vec<_> = trace.chain_members(root);
    trace
        .events()
        .iter()
        .filter(|e| e.kind == EventKind::Fill)
        .filter(|e| e.request_id.map(|id| members.contains(&id)).unwrap_or(false))
        .filter_map(|e| e.level)
        .collect()
}

#[test]
fn uncached_secret_never_executes_the_transmit() {
    let mut sys = System::new(preset_c1(), true).unwrap();
    sys.write_memory(SECRET, b"S");
    let out = sys.run_episode(CORE, episode(0)).unwrap();
    assert!(out.executed_access);
    assert!(!out.executed_transmit);
    // The access was squashed while outstanding and its chain never filled.
    let rec = &sys.episodes[0];
    assert!(rec.access_squashed_outstanding);
    let (_, req) = rec.access.unwrap();
    assert!(fills_for_chain(&sys, req).is_empty());
}

#[test]
fn c1_cached_secret_cancellations_beat_the_memory_response() {
    // Experiment-3 shape: secret resident in L1, condition flushed.
    let mut sys = System::new(preset_c1(), true).unwrap();
    sys.write_memory(SECRET, b"S");
    sys.timed_probe(CORE, SECRET).unwrap(); // pre-cache the secret
    sys.flush_block(CONDITION);
    sys.flush_block(TIMING + (b'S' as u64) * 4096);
    let out = sys.run_episode(CORE, episode(0)).unwrap();
    assert!(out.executed_access);
    assert!(out.executed_transmit);
    let rec = &sys.episodes[0];
    assert!(rec.transmit_squashed_outstanding);
    let (_, req) = rec.transmit.unwrap();
    // Cancellations reached both levels before the response: no fills.
    assert!(fills_for_chain(&sys, req).is_empty());
    assert_eq!(sys.residency(CORE, TIMING + (b'S' as u64) * 4096), None);
}

#[test]
fn c2_cached_secret_response_beats_the_cancellation_at_l2_only() {
    // Experiment-4 shape: same episode under the slow-clock preset.
    let mut sys = System::new(preset_c2(), true).unwrap();
    sys.write_memory(SECRET, b"S");
    sys.timed_probe(CORE, SECRET).unwrap();
    sys.flush_block(CONDITION);
    sys.flush_block(TIMING + (b'S' as u64) * 4096);
    let out = sys.run_episode(CORE, episode(0)).unwrap();
    assert!(out.executed_transmit);
    let rec = &sys.episodes[0];
    assert!(rec.transmit_squashed_outstanding);
    let (_, req) = rec.transmit.unwrap();
    // L2 changed, L1 did not.
    assert_eq!(fills_for_chain(&sys, req), vec![2]);
    assert_eq!(sys.residency(CORE, TIMING + (b'S' as u64) * 4096), Some(2));
}

#[test]
fn cancel_disabled_lets_the_squashed_transmit_fill_both_levels() {
    let mut sys = System::new(preset_c1(), false).unwrap();
    sys.write_memory(SECRET, b"S");
    sys.timed_probe(CORE, SECRET).unwrap();
    sys.flush_block(CONDITION);
    sys.flush_block(TIMING + (b'S' as u64) * 4096);
    let out = sys.run_episode(CORE, episode(0)).unwrap();
    assert!(out.executed_transmit);
    let rec = &sys.episodes[0];
    let (_, req) = rec.transmit.unwrap();
    let mut fills = fills_for_chain(&sys, req);
    fills.sort_unstable();
    assert_eq!(fills, vec![1, 2]);
    assert_eq!(sys.residency(CORE, TIMING + (b'S' as u64) * 4096), Some(1));
    assert_eq!(sys.trace.events().iter().filter(|e| e.kind == EventKind::CancelSent).count(), 0);
}

#[test]
fn squash_emits_one_cancellation_per_outstanding_slot_only() {
    let mut sys = System::new(preset_c1(), true).unwrap();
    // One load completes (L1 hit after warming), two stay outstanding.
    sys.timed_probe(CORE, 0x4000).unwrap();
    let (done, _) = sys
        .issue_request(CORE, 0x4000, ReqKind::DataRead, true, Role::Plain, None)
        .unwrap();
    sys.run_until_idle().unwrap();
    let (a, _) = sys
        .issue_request(CORE, 0x5000, ReqKind::DataRead, true, Role::Plain, None)
        .unwrap();
    let (b, _) = sys
        .issue_request(CORE, 0x6000, ReqKind::DataRead, true, Role::Plain, None)
        .unwrap();
    let sent = sys.squash(CORE, &[done, a, b]);
    assert_eq!(sent.len(), 2);
    assert_eq!(sys.cores[0].slot(done).state, SlotState::Completed);
    assert_eq!(sys.cores[0].slot(a).state, SlotState::Squashed);
    assert_eq!(sys.cores[0].slot(b).state, SlotState::Squashed);
    sys.run_until_idle().unwrap();
    // Squashing again is a no-op: no slot is still Issued.
    let sent = sys.squash(CORE, &[done, a, b]);
    assert!(sent.is_empty());
}

#[test]
fn timed_probe_latencies_compose_under_c1() {
    let mut sys = System::new(preset_c1(), true).unwrap();
    assert_eq!(sys.timed_probe(CORE, 0x4000).unwrap(), 169); // flushed/cold
    assert_eq!(sys.timed_probe(CORE, 0x4000).unwrap(), 4); // L1 resident
    sys.evict_block_from_level(1, 0x4000);
    assert_eq!(sys.timed_probe(CORE, 0x4000).unwrap(), 18); // L2 resident
}

#[test]
fn window_lengthening_never_unexecutes_the_transmit() {
    // Monotonicity: once the transmit executes at some resolve latency, it
    // still executes at every longer one.
    let mut first_executed = None;
    for resolve in [1u64, 5, 8, 12, 20, 40, 80] {
        let mut sys = System::new(preset_c1(), true).unwrap();
        sys.write_memory(SECRET, b"S");
        sys.timed_probe(CORE, SECRET).unwrap();
        sys.flush_block(CONDITION);
        let mut ep = episode(0);
        ep.resolve_latency_cycles = resolve;
        let out = sys.run_episode(CORE, ep).unwrap();
        if out.executed_transmit {
            first_executed.get_or_insert(resolve);
        } else {
            assert!(
                first_executed.is_none(),
                "transmit executed at a shorter window but not at {resolve} cycles"
            );
        }
    }
    assert!(first_executed.is_some());
}

#[test]
fn transmit_issue_always_follows_access_completion() {
    let mut sys = System::new(preset_c1(), true).unwrap();
    sys.write_memory(SECRET, b"S");
    sys.timed_probe(CORE, SECRET).unwrap();
    sys.flush_block(CONDITION);
    sys.run_episode(CORE, episode(0)).unwrap();
    let rec = &sys.episodes[0];
    let access = sys.cores[0].slot(rec.access.unwrap().0);
    let transmit = sys.cores[0].slot(rec.transmit.unwrap().0);
    assert!(transmit.issue_tick > access.complete_tick.unwrap());
}

#[test]
fn mispredicted_fetch_cancellation_beats_the_response() {
    let mut sys = System::new(preset_c1(), true).unwrap();
    sys.fetch_with_cancel(CORE, 0x9000, true).unwrap();
    sys.run_until_idle().unwrap();
    // No I-cache fill: the fetch went to memory, the squash fired first.
    let l1i = sys.l1i(CORE);
    assert!(sys.cache(l1i).probe(BlockAddr(0x9000)).is_none());
    let fills = sys.trace.events().iter().filter(|e| e.kind == EventKind::Fill).count();
    assert_eq!(fills, 0);
}

#[test]
fn correct_path_fetch_fills_and_completed_fetch_is_not_cancelled() {
    let mut sys = System::new(preset_c1(), true).unwrap();
    let inst = sys.fetch_with_cancel(CORE, 0x9000, false).unwrap();
    sys.run_until_idle().unwrap();
    let l1i = sys.l1i(CORE);
    assert!(sys.cache(l1i).probe(BlockAddr(0x9000)).is_some());
    assert_eq!(sys.cores[0].slot(inst).state, SlotState::Completed);

    // Mispredicted but L1I-resident: it completes before the resolution, so
    // no cancellation is ever sent.
    let before = sys.trace.events().iter().filter(|e| e.kind == EventKind::CancelSent).count();
    let inst = sys.fetch_with_cancel(CORE, 0x9000, true).unwrap();
    sys.run_until_idle().unwrap();
    assert_eq!(sys.cores[0].slot(inst).state, SlotState::Completed);
    let after = sys.trace.events().iter().filter(|e| e.kind == EventKind::CancelSent).count();
    assert_eq!(before, after);
}

#[test]
fn tlb_walks_install_only_when_not_squashed() {
    use squashsim::cpu::Translation;
    let mut sys = System::new(preset_c1(), true).unwrap();
    sys.map_identity_pages(CORE, 0x20_0000, 16);

    // Non-speculative walk installs the entry.
    let t = sys.translate_with_cancel(CORE, 0x3_0a0, false).unwrap();
    assert!(matches!(t, Translation::Walk(_)));
    sys.run_until_idle().unwrap();
    assert_eq!(sys.cores[0].tlb.entries.get(&3), Some(&3));

    // Now a TLB hit, no memory traffic.
    let before = sys.trace.events().len();
    let t = sys.translate_with_cancel(CORE, 0x3_0a0, false).unwrap();
    assert_eq!(t, Translation::Hit(0x3_0a0));
    assert_eq!(sys.trace.events().len(), before);

    // A speculative walk squashed before its response installs nothing.
    let t = sys.translate_with_cancel(CORE, 0x7_000, true).unwrap();
    let Translation::Walk(inst) = t else { panic!() };
    sys.squash(CORE, &[inst]);
    sys.run_until_idle().unwrap();
    assert!(!sys.cores[0].tlb.entries.contains_key(&7));

    // Unmapped page is a configuration error.
    assert!(sys.translate_with_cancel(CORE, 0xdead_0000, false).is_err());
}

#[test]
fn episode_with_cached_condition_squashes_before_the_body_runs() {
    // A short window (condition in L1) can squash before the access issues.
    let mut sys = System::new(preset_c1(), true).unwrap();
    sys.write_memory(SECRET, b"S");
    sys.timed_probe(CORE, CONDITION).unwrap(); // condition L1-resident
    let mut ep = episode(0);
    ep.resolve_latency_cycles = 1;
    ep.access_addr_gen_cycles = 30;
    let out = sys.run_episode(CORE, ep).unwrap();
    assert!(!out.executed_access);
    assert!(!out.executed_transmit);
}
