//! Trace recording, attack/event pairing, the cache-change metric, and the
//! timeline/summary exports.

pub mod cc;
pub mod export;
pub mod pairing;
pub mod trace;

pub use cc::{compute_cc, CcReport, CcValue};
pub use export::{export_timeline, write_summary, Summary, TimelineFormat};
pub use pairing::{cc_report, pair_attacks, AttackRecord};
pub use trace::{EventKind, TraceEvent, TraceLog};
