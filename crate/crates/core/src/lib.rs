//! Discrete-event simulator of a speculative CPU core, a multi-level cache
//! hierarchy with MSHR-based miss handling, and a fixed-latency main memory,
//! built around a cancellation protocol: when a mis-speculated load is
//! squashed, a cancellation chases its outstanding request toward memory and
//! removes it from every MSHR it reaches in time, preventing the cache state
//! changes its response would otherwise leave behind.
//!
//! The crate also ships the case-study machinery built on top of the model:
//! bounds-check-bypass and return-mispredict attack scenarios, a Flush+Reload
//! receive phase, the weighted cache-change metric, trace/timeline exports,
//! and a randomized invariant fuzzer.

pub mod attack;
pub mod config;
pub mod cpu;
pub mod engine;
pub mod error;
pub mod fuzz;
pub mod memsys;
pub mod metrics;
pub mod refmodel;
pub mod system;

pub use error::SimError;
