//! End-to-end attack scenarios: bounds-check-bypass and return-mispredict
//! variants, a per-character attempt loop, and the timing-based receive
//! phase that extracts the leaked byte from cache state.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{preset_by_name, SystemConfig};
use crate::cpu::{
    SpeculationEpisode, DEFAULT_ACCESS_ADDR_GEN_CYCLES, DEFAULT_RESOLVE_LATENCY_CYCLES,
    DEFAULT_TRANSMIT_ADDR_GEN_CYCLES,
};
use crate::error::SimError;
use crate::memsys::{CoreId, ReqKind};
use crate::metrics::{cc_report, pair_attacks, AttackRecord, CcReport};
use crate::system::System;

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

pub const DEFAULT_SECRET: &str = "SQUASHME_16CHARS";
pub const DEFAULT_BUDGET_PER_CHAR: u32 = 100;
pub const FLUSH_RELOAD_STRIDE: u64 = 4096;
/// Tighter stride for the evict-from-L1 variant so the whole timing array
/// fits in the L2 at once.
pub const EVICT_VARIANT_STRIDE: u64 = 64;

const CONDITION_ADDR: u64 = 0x1040;
const SECRET_BASE: u64 = 0x2080;
const TIMING_BASE: u64 = 0x10_0000;
const SLOTS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    SpectrePht,
    Ret2Spec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReceiveMode {
    FlushReload,
    EvictL1Only,
}

/// On-disk scenario description. Optional knobs fall back to preset-derived
/// defaults when absent.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub schema_version: u32,
    pub variant: Variant,
    #[serde(default = "default_secret")]
    pub secret: String,
    #[serde(default)]
    pub secret_cached_each_iter: bool,
    /// "c1", "c2", or "custom" (with `custom_config`).
    pub config_preset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub custom_config: Option<SystemConfig>,
    #[serde(default = "default_true")]
    pub cancel_enabled: bool,
    #[serde(default = "default_budget")]
    pub budget_per_char: u32,
    pub receive_mode: ReceiveMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hit_threshold_cycles: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolve_latency_cycles: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub access_addr_gen_cycles: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transmit_addr_gen_cycles: Option<u64>,
}

fn default_secret() -> String {
    DEFAULT_SECRET.to_string()
}
fn default_true() -> bool {
    true
}
fn default_budget() -> u32 {
    DEFAULT_BUDGET_PER_CHAR
}

impl ScenarioFile {
    pub fn named(variant: Variant, preset: &str) -> ScenarioFile {
        ScenarioFile {
            schema_version: SCENARIO_SCHEMA_VERSION,
            variant,
            secret: default_secret(),
            secret_cached_each_iter: false,
            config_preset: preset.to_string(),
            custom_config: None,
            cancel_enabled: true,
            budget_per_char: DEFAULT_BUDGET_PER_CHAR,
            receive_mode: ReceiveMode::FlushReload,
            hit_threshold_cycles: None,
            stride: None,
            resolve_latency_cycles: None,
            access_addr_gen_cycles: None,
            transmit_addr_gen_cycles: None,
        }
    }

    pub fn from_json(text: &str) -> Result<ScenarioFile, SimError> {
        serde_json::from_str(text).map_err(|e| SimError::Schema(format!("scenario JSON: {e}")))
    }
}

/// Fully resolved, runnable attack description.
#[derive(Debug, Clone)]
pub struct AttackScenario {
    pub variant: Variant,
    pub secret: Vec<u8>,
    pub secret_cached_each_iter: bool,
    pub config: SystemConfig,
    pub cancel_enabled: bool,
    pub budget_per_char: u32,
    pub receive_mode: ReceiveMode,
    pub hit_threshold_cycles: u64,
    pub stride: u64,
    pub resolve_latency_cycles: u64,
    pub access_addr_gen_cycles: u64,
    pub transmit_addr_gen_cycles: u64,
    pub condition_addr: u64,
    pub secret_base: u64,
    pub timing_base: u64,
}

/// Resolve a scenario file against its preset: memory layout, stride, and
/// the timing threshold for the receive phase.
pub fn build_scenario(file: &ScenarioFile) -> Result<AttackScenario, SimError> {
    if file.schema_version != SCENARIO_SCHEMA_VERSION {
        return Err(SimError::Schema(format!(
            "scenario schema_version {} unsupported (expected {SCENARIO_SCHEMA_VERSION})",
            file.schema_version
        )));
    }
    let config = match file.config_preset.as_str() {
        "custom" => file
            .custom_config
            .clone()
            .ok_or_else(|| SimError::Config("config_preset \"custom\" needs custom_config".into()))?,
        name => preset_by_name(name)
            .ok_or_else(|| SimError::Config(format!("unknown config preset {name:?}")))?,
    };
    config.validate()?;

    if file.secret.is_empty() || !file.secret.bytes().all(|b| (0x20..=0x7e).contains(&b)) {
        return Err(SimError::Config(
            "secret must be non-empty printable ASCII (the receive phase only accepts printable bytes)".into(),
        ));
    }
    if file.budget_per_char == 0 {
        return Err(SimError::Config("budget_per_char must be >= 1".into()));
    }

    let stride = file.stride.unwrap_or(match file.receive_mode {
        ReceiveMode::FlushReload => FLUSH_RELOAD_STRIDE,
        ReceiveMode::EvictL1Only => EVICT_VARIANT_STRIDE,
    });
    if stride < 64 || stride % 64 != 0 {
        return Err(SimError::Config("stride must be a positive multiple of 64".into()));
    }
    if TIMING_BASE + SLOTS as u64 * stride > config.memory.capacity_bytes {
        return Err(SimError::Config("timing array exceeds physical memory".into()));
    }

    let l1_hit = config.resident_latency_cycles(1);
    let llc_hit = config.resident_latency_cycles(config.levels());
    let l2_hit = config.resident_latency_cycles(2);
    let full_miss = config.full_miss_latency_cycles();
    let threshold = file.hit_threshold_cycles.unwrap_or(match file.receive_mode {
        // Detect residence at any level: split the LLC-hit/full-miss gap.
        ReceiveMode::FlushReload => (llc_hit + full_miss) / 2,
        // Discriminate L1 from L2 residence.
        ReceiveMode::EvictL1Only => (l1_hit + l2_hit) / 2,
    });
    if threshold <= l1_hit || threshold >= full_miss {
        return Err(SimError::Config(format!(
            "hit threshold {threshold} cycles must lie strictly between the L1 hit ({l1_hit}) and the full miss ({full_miss})"
        )));
    }

    Ok(AttackScenario {
        variant: file.variant,
        secret: file.secret.clone().into_bytes(),
        secret_cached_each_iter: file.secret_cached_each_iter,
        config,
        cancel_enabled: file.cancel_enabled,
        budget_per_char: file.budget_per_char,
        receive_mode: file.receive_mode,
        hit_threshold_cycles: threshold,
        stride,
        resolve_latency_cycles: file
            .resolve_latency_cycles
            .unwrap_or(DEFAULT_RESOLVE_LATENCY_CYCLES),
        access_addr_gen_cycles: file
            .access_addr_gen_cycles
            .unwrap_or(DEFAULT_ACCESS_ADDR_GEN_CYCLES),
        transmit_addr_gen_cycles: file
            .transmit_addr_gen_cycles
            .unwrap_or(DEFAULT_TRANSMIT_ADDR_GEN_CYCLES),
        condition_addr: CONDITION_ADDR,
        secret_base: SECRET_BASE,
        timing_base: TIMING_BASE,
    })
}

/// The four built-in case-study experiments.
pub fn experiment_scenario(n: u8) -> Result<ScenarioFile, SimError> {
    let mut file = ScenarioFile::named(Variant::SpectrePht, "c1");
    match n {
        1 => file.cancel_enabled = false,
        2 => {}
        3 => file.secret_cached_each_iter = true,
        4 => {
            file.config_preset = "c2".into();
            file.secret_cached_each_iter = true;
        }
        other => {
            return Err(SimError::Config(format!(
                "experiment {other} does not exist (1..=4)"
            )))
        }
    }
    Ok(file)
}

#[derive(Debug, Clone)]
pub struct AttackOutcome {
    /// Recovered characters; unrecovered positions are marked '?'.
    pub leaked: String,
    pub attacks_attempted: u64,
    pub timed_out: bool,
    pub records: Vec<AttackRecord>,
}

pub struct AttackRun {
    pub outcome: AttackOutcome,
    pub report: CcReport,
    pub system: System,
}

fn plain_read(sys: &mut System, core: CoreId, addr: u64) -> Result<(), SimError> {
    sys.issue_request(core, addr, ReqKind::DataRead, false, crate::cpu::Role::Plain, None)?;
    sys.run_until_idle()?;
    Ok(())
}

fn prep_iteration(sys: &mut System, sc: &AttackScenario, core: CoreId) -> Result<(), SimError> {
    match sc.receive_mode {
        ReceiveMode::FlushReload => {
            sys.flush_block(sc.condition_addr);
            for slot in 0..SLOTS as u64 {
                sys.flush_block(sc.timing_base + slot * sc.stride);
            }
        }
        ReceiveMode::EvictL1Only => {
            // Bring everything into the hierarchy, then strip the L1 copies
            // so only the level-2 residence remains.
            plain_read(sys, core, sc.condition_addr)?;
            for slot in 0..SLOTS as u64 {
                plain_read(sys, core, sc.timing_base + slot * sc.stride)?;
            }
            sys.evict_block_from_level(1, sc.condition_addr);
            for slot in 0..SLOTS as u64 {
                sys.evict_block_from_level(1, sc.timing_base + slot * sc.stride);
            }
        }
    }
    Ok(())
}

/// Probe all 256 timing slots in the permuted order and return the unique
/// slot whose reload beat the threshold, if exactly one did.
fn probe_slots(
    sys: &mut System,
    core: CoreId,
    timing_base: u64,
    stride: u64,
    threshold: u64,
    perm: &[u8],
    flush_after_probe: bool,
    threshold_level: u8,
) -> Result<Option<u8>, SimError> {
    let resident_before: Vec<Option<u8>> = (0..SLOTS as u64)
        .map(|k| sys.residency(core, timing_base + k * stride))
        .collect();
    let mut candidates: Vec<u8> = Vec::new();
    for &slot in perm {
        let addr = timing_base + slot as u64 * stride;
        let cycles = sys.timed_probe(core, addr)?;
        if cycles < threshold {
            candidates.push(slot);
        }
        if flush_after_probe {
            sys.flush_block(addr);
        }
    }
    if candidates.len() != 1 {
        return Ok(None);
    }
    let byte = candidates[0];
    // Soundness: a reported byte must be backed by actual residence at or
    // below the level the threshold discriminates.
    let ground = resident_before[byte as usize];
    assert!(
        ground.is_some_and(|lvl| lvl <= threshold_level),
        "receive reported slot {byte:#04x} without cache residence to back it"
    );
    Ok(Some(byte))
}

fn threshold_level(config: &SystemConfig, threshold: u64) -> u8 {
    let mut level = 0;
    for l in 1..=config.levels() {
        if config.resident_latency_cycles(l) < threshold {
            level = l;
        }
    }
    level
}

/// Flush+Reload receive: timed reload of every slot, flushing each line
/// back out after its measurement.
pub fn receive_flush_reload(
    sys: &mut System,
    core: CoreId,
    sc: &AttackScenario,
    perm: &[u8],
) -> Result<Option<u8>, SimError> {
    probe_slots(
        sys,
        core,
        sc.timing_base,
        sc.stride,
        sc.hit_threshold_cycles,
        perm,
        true,
        threshold_level(&sc.config, sc.hit_threshold_cycles),
    )
}

/// Evict-based receive: the array stays resident in L2; the threshold
/// separates an L1 hit from an L2 hit.
pub fn receive_evict_variant(
    sys: &mut System,
    core: CoreId,
    sc: &AttackScenario,
    perm: &[u8],
) -> Result<Option<u8>, SimError> {
    probe_slots(
        sys,
        core,
        sc.timing_base,
        sc.stride,
        sc.hit_threshold_cycles,
        perm,
        false,
        threshold_level(&sc.config, sc.hit_threshold_cycles),
    )
}

/// Run the whole attack: per secret character, repeat flush/evict-prep,
/// one speculation episode, and the receive phase until a printable byte
/// comes back or the attempt budget runs out.
pub fn run_attack(sc: &AttackScenario, seed: u64) -> Result<AttackRun, SimError> {
    let mut sys = System::new(sc.config.clone(), sc.cancel_enabled)?;
    let core = CoreId(0);
    sys.write_memory(sc.secret_base, &sc.secret);

    let mut perm: Vec<u8> = (0..=255).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut leaked = String::new();
    let mut episode_no = 0u64;
    let mut timed_out = false;

    for ci in 0..sc.secret.len() as u64 {
        let mut recovered = None;
        for _attempt in 0..sc.budget_per_char {
            if sc.secret_cached_each_iter {
                plain_read(&mut sys, core, sc.secret_base + ci)?;
            }
            prep_iteration(&mut sys, sc, core)?;
            let episode = SpeculationEpisode {
                episode_no,
                condition_load_addr: sc.condition_addr,
                access_addr: sc.secret_base + ci,
                timing_base: sc.timing_base,
                stride: sc.stride,
                resolve_latency_cycles: sc.resolve_latency_cycles,
                access_addr_gen_cycles: sc.access_addr_gen_cycles,
                transmit_addr_gen_cycles: sc.transmit_addr_gen_cycles,
            };
            episode_no += 1;
            sys.run_episode(core, episode)?;
            let candidate = match sc.receive_mode {
                ReceiveMode::FlushReload => receive_flush_reload(&mut sys, core, sc, &perm)?,
                ReceiveMode::EvictL1Only => receive_evict_variant(&mut sys, core, sc, &perm)?,
            };
            if let Some(byte) = candidate {
                if (0x20..=0x7e).contains(&byte) {
                    recovered = Some(byte);
                    break;
                }
            }
        }
        match recovered {
            Some(byte) => leaked.push(byte as char),
            None => {
                leaked.push('?');
                timed_out = true;
            }
        }
    }

    let records = pair_attacks(&sys.trace, &sys.episodes)?;
    let report = cc_report(&records, sys.cfg.levels());
    Ok(AttackRun {
        outcome: AttackOutcome {
            leaked,
            attacks_attempted: episode_no,
            timed_out,
            records,
        },
        report,
        system: sys,
    })
}
