//! System configuration: core count, clocks, per-level cache parameters, and
//! memory latency, plus the named presets used by the built-in experiments.

use serde::{Deserialize, Serialize};

use crate::engine::ClockDomain;
use crate::error::SimError;
use crate::memsys::{CacheLevelConfig, MemoryConfig};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Full description of the simulated machine.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub cores: usize,
    pub core_frequency_hz: u64,
    pub l1i: CacheLevelConfig,
    pub l1d: CacheLevelConfig,
    /// Shared levels 2..=K, closest to the cores first. The last is the LLC.
    pub shared_levels: Vec<CacheLevelConfig>,
    pub memory: MemoryConfig,
}

impl SystemConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.cores == 0 || self.cores > 4 {
            return Err(SimError::Config(format!(
                "core count {} outside supported range 1..=4",
                self.cores
            )));
        }
        ClockDomain::from_frequency_hz(self.core_frequency_hz)?;
        self.l1i.validate("l1i")?;
        self.l1d.validate("l1d")?;
        if self.shared_levels.is_empty() || self.shared_levels.len() > 3 {
            return Err(SimError::Config(
                "need 1..=3 shared cache levels below the private L1s".into(),
            ));
        }
        for (i, lvl) in self.shared_levels.iter().enumerate() {
            lvl.validate(&format!("shared level {}", i + 2))?;
        }
        if self.memory.access_latency_ns == 0 {
            return Err(SimError::Config("memory latency must be >= 1 ns".into()));
        }
        if self.memory.capacity_bytes < 1 << 20 {
            return Err(SimError::Config("memory capacity below 1 MiB".into()));
        }
        Ok(())
    }

    pub fn core_clock(&self) -> ClockDomain {
        ClockDomain::from_frequency_hz(self.core_frequency_hz).expect("validated")
    }

    /// Number of cache levels K (private L1s count as level 1).
    pub fn levels(&self) -> u8 {
        1 + self.shared_levels.len() as u8
    }

    /// Core cycles a probe of an address resident at `level` takes, under the
    /// additive lookup-latency composition (level 0 request port, fills free).
    pub fn resident_latency_cycles(&self, level: u8) -> u64 {
        let mut cycles = self.l1d.hit_latency_cycles;
        for lvl in self.shared_levels.iter().take(level.saturating_sub(1) as usize) {
            cycles += lvl.hit_latency_cycles;
        }
        cycles
    }

    /// Core cycles (rounded up) for a probe that misses every level.
    pub fn full_miss_latency_cycles(&self) -> u64 {
        let clk = self.core_clock();
        let cache_ticks = clk.cycles_to_ticks(self.resident_latency_cycles(self.levels()));
        clk.ticks_to_cycles_ceil(cache_ticks + self.memory.latency_ticks())
    }
}

fn case_study_base(frequency_hz: u64, l1_cycles: u64, l2_cycles: u64) -> SystemConfig {
    let l1 = CacheLevelConfig {
        size_bytes: 32 * 1024,
        associativity: 8,
        hit_latency_cycles: l1_cycles,
        mshr_count: 8,
        max_targets: 8,
    };
    SystemConfig {
        cores: 2,
        core_frequency_hz: frequency_hz,
        l1i: l1,
        l1d: l1,
        shared_levels: vec![CacheLevelConfig {
            size_bytes: 512 * 1024,
            associativity: 16,
            hit_latency_cycles: l2_cycles,
            mshr_count: 8,
            max_targets: 8,
        }],
        memory: MemoryConfig {
            access_latency_ns: 50,
            capacity_bytes: 3 * (1 << 30),
        },
    }
}

/// Case-study preset C1: 3 GHz core, 4/4/14-cycle L1I/L1D/L2.
pub fn preset_c1() -> SystemConfig {
    case_study_base(3_000_000_000, 4, 14)
}

/// Case-study preset C2: core slowed to 0.1 GHz, 80/80/80-cycle latencies.
pub fn preset_c2() -> SystemConfig {
    case_study_base(100_000_000, 80, 80)
}

fn perf_base(cores: usize) -> SystemConfig {
    SystemConfig {
        cores,
        core_frequency_hz: 3_000_000_000,
        l1i: CacheLevelConfig {
            size_bytes: 32 * 1024,
            associativity: 2,
            hit_latency_cycles: 1,
            mshr_count: 8,
            max_targets: 8,
        },
        l1d: CacheLevelConfig {
            size_bytes: 64 * 1024,
            associativity: 2,
            hit_latency_cycles: 2,
            mshr_count: 8,
            max_targets: 8,
        },
        shared_levels: vec![CacheLevelConfig {
            size_bytes: cores as u64 * 2 * 1024 * 1024,
            associativity: 8,
            hit_latency_cycles: 20,
            mshr_count: 8,
            max_targets: 8,
        }],
        memory: MemoryConfig {
            access_latency_ns: 50,
            capacity_bytes: 3 * (1 << 30),
        },
    }
}

/// Throughput-style preset: single core, 1/2/20-cycle latencies, 2 MB LLC.
pub fn preset_perf1() -> SystemConfig {
    perf_base(1)
}

/// Same as `perf1` with four cores sharing an 8 MB LLC.
pub fn preset_perf4() -> SystemConfig {
    perf_base(4)
}

pub fn preset_by_name(name: &str) -> Option<SystemConfig> {
    match name {
        "c1" => Some(preset_c1()),
        "c2" => Some(preset_c2()),
        "perf1" => Some(preset_perf1()),
        "perf4" => Some(preset_perf4()),
        _ => None,
    }
}

/// On-disk config file: either a preset name or a full system description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<SystemConfig>,
}

impl ConfigFile {
    pub fn resolve(&self) -> Result<SystemConfig, SimError> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(SimError::Schema(format!(
                "config schema_version {} unsupported (expected {})",
                self.schema_version, CONFIG_SCHEMA_VERSION
            )));
        }
        let cfg = match (&self.preset, &self.system) {
            (Some(name), None) => preset_by_name(name).ok_or_else(|| {
                SimError::Config(format!(
                    "unknown preset {name:?} (expected c1, c2, perf1, or perf4)"
                ))
            })?,
            (None, Some(sys)) => sys.clone(),
            _ => {
                return Err(SimError::Config(
                    "config must name exactly one of `preset` or `system`".into(),
                ))
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<ConfigFile, SimError> {
        serde_json::from_str(text).map_err(|e| SimError::Schema(format!("config JSON: {e}")))
    }
}

/// Resolve a `--config` argument: a preset name or a path to a JSON file.
pub fn load_config_arg(arg: &str) -> Result<SystemConfig, SimError> {
    if let Some(cfg) = preset_by_name(arg) {
        return Ok(cfg);
    }
    let text =
        std::fs::read_to_string(arg).map_err(|e| SimError::Config(format!("config {arg}: {e}")))?;
    ConfigFile::from_json(&text)?.resolve()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn c1_matches_case_study_parameters() {
        let c1 = preset_c1();
        assert_eq!(c1.cores, 2);
        assert_eq!(c1.core_frequency_hz, 3_000_000_000);
        assert_eq!(c1.l1d.size_bytes, 32 * 1024);
        assert_eq!(c1.l1d.hit_latency_cycles, 4);
        assert_eq!(c1.shared_levels[0].size_bytes, 512 * 1024);
        assert_eq!(c1.shared_levels[0].hit_latency_cycles, 14);
        assert_eq!(c1.l1i.associativity, 8);
        assert_eq!(c1.shared_levels[0].associativity, 16);
        c1.validate().unwrap();
    }

    #[test]
    fn c2_slows_the_core_and_inflates_latencies() {
        let c2 = preset_c2();
        assert_eq!(c2.core_frequency_hz, 100_000_000);
        assert_eq!(c2.l1i.hit_latency_cycles, 80);
        assert_eq!(c2.l1d.hit_latency_cycles, 80);
        assert_eq!(c2.shared_levels[0].hit_latency_cycles, 80);
        c2.validate().unwrap();
    }

    #[test]
    fn composed_latencies_under_c1() {
        let c1 = preset_c1();
        assert_eq!(c1.resident_latency_cycles(1), 4);
        assert_eq!(c1.resident_latency_cycles(2), 18);
        // 18 cycles of cache lookups plus 50 ns of memory at 333 ps/cycle.
        assert_eq!(c1.full_miss_latency_cycles(), 169);
    }

    #[test]
    fn config_file_round_trip_and_validation() {
        let file = ConfigFile {
            schema_version: 1,
            preset: Some("c1".into()),
            system: None,
        };
        let json = serde_json::to_string(&file).unwrap();
        let cfg = ConfigFile::from_json(&json).unwrap().resolve().unwrap();
        assert_eq!(cfg, preset_c1());

        let bad = ConfigFile {
            schema_version: 2,
            preset: Some("c1".into()),
            system: None,
        };
        assert!(bad.resolve().is_err());

        assert!(ConfigFile::from_json("{\"schema_version\":1}").unwrap().resolve().is_err());
    }

    #[test]
    fn rejects_out_of_range_parameters() {
        let mut cfg = preset_c1();
        cfg.cores = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = preset_c1();
        cfg.l1d.hit_latency_cycles = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = preset_c1();
        cfg.l1d.size_bytes = 1000; // not divisible by assoc * block
        assert!(cfg.validate().is_err());
    }
}
