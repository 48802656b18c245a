//! Timeline and summary artifacts.
//!
//! The timeline lists, per attack, the events of that attack's access and
//! transmit request chains (plus the attack's SpecStart and Squash marks),
//! with ticks re-based so speculation start sits at zero. Column order is
//! fixed: attack_no, event_kind, level, relative_tick.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::cpu::EpisodeRecord;
use crate::error::SimError;
use crate::metrics::cc::CcReport;
use crate::metrics::pairing::chain_attack_map;
use crate::metrics::trace::{EventKind, TraceLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimelineFormat {
    Csv,
    Jsonl,
}

impl TimelineFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            TimelineFormat::Csv => "csv",
            TimelineFormat::Jsonl => "jsonl",
        }
    }
}

impl std::str::FromStr for TimelineFormat {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(TimelineFormat::Csv),
            "jsonl" => Ok(TimelineFormat::Jsonl),
            other => Err(SimError::Config(format!(
                "unknown timeline format {other:?} (expected csv or jsonl)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct TimelineRow {
    attack_no: u64,
    event_kind: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    level: Option<u8>,
    relative_tick: i64,
}

fn timeline_rows(trace: &TraceLog, episodes: &[EpisodeRecord]) -> Vec<TimelineRow> {
    let chain_map = chain_attack_map(trace, episodes);
    let start_of: std::collections::HashMap<u64, i64> = episodes
        .iter()
        .map(|e| (e.episode_no, e.spec_start.0 as i64))
        .collect();
    // Episode windows for the SpecStart/Squash marks, ordered by start tick.
    let mut windows: Vec<(u64, u64)> = episodes.iter().map(|e| (e.spec_start.0, e.episode_no)).collect();
    windows.sort_unstable();

    let window_of = |tick: u64| -> Option<u64> {
        match windows.binary_search_by_key(&tick, |w| w.0) {
            Ok(i) => Some(windows[i].1),
            Err(0) => None,
            Err(i) => Some(windows[i - 1].1),
        }
    };

    let mut rows = Vec::new();
    for e in trace.events() {
        let attack = match e.kind {
            EventKind::SpecStart | EventKind::Squash => window_of(e.tick.0),
            _ => e.request_id.and_then(|id| chain_map.get(&id).copied()),
        };
        let Some(attack_no) = attack else { continue };
        let Some(&start) = start_of.get(&attack_no) else { continue };
        rows.push(TimelineRow {
            attack_no,
            event_kind: e.kind.as_str(),
            level: e.level,
            relative_tick: e.tick.0 as i64 - start,
        });
    }
    rows
}

/// Write the per-attack event timeline; identical runs produce byte-identical
/// files.
pub fn export_timeline(
    trace: &TraceLog,
    episodes: &[EpisodeRecord],
    path: &Path,
    format: TimelineFormat,
) -> Result<(), SimError> {
    let rows = timeline_rows(trace, episodes);
    let display = path.display().to_string();
    let file = std::fs::File::create(path).map_err(|e| SimError::io(&display, e))?;
    let mut w = std::io::BufWriter::new(file);
    let result: std::io::Result<()> = (|| {
        match format {
            TimelineFormat::Csv => {
                writeln!(w, "attack_no,event_kind,level,relative_tick")?;
                for r in rows {
                    let level = r.level.map(|l| l.to_string()).unwrap_or_default();
                    writeln!(w, "{},{},{},{}", r.attack_no, r.event_kind, level, r.relative_tick)?;
                }
            }
            TimelineFormat::Jsonl => {
                for r in rows {
                    serde_json::to_writer(&mut w, &r)?;
                    writeln!(w)?;
                }
            }
        }
        w.flush()
    })();
    result.map_err(|e| SimError::io(&display, e))
}

/// Summary written after every run, even on timeout.
#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    /// Six-decimal exact-rational rendering; null when undefined (no
    /// squashed access/transmit instructions).
    pub cc: Option<String>,
    #[serde(rename = "N")]
    pub n: Vec<u64>,
    #[serde(rename = "N_total")]
    pub n_total: u64,
    pub leaked: String,
    pub attacks_attempted: u64,
    pub timed_out: bool,
}

impl Summary {
    pub fn new(report: &CcReport, leaked: String, attacks_attempted: u64, timed_out: bool) -> Summary {
        Summary {
            cc: report.cc.map(|v| v.to_decimal_string()),
            n: report.n.clone(),
            n_total: report.n_total,
            leaked,
            attacks_attempted,
            timed_out,
        }
    }
}

pub fn write_summary(summary: &Summary, path: &Path) -> Result<(), SimError> {
    let display = path.display().to_string();
    let mut text = serde_json::to_string_pretty(summary)
        .map_err(|e| SimError::Schema(format!("summary serialization: {e}")))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| SimError::io(&display, e))
}
