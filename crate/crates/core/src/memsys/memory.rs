//! Backing memory: a sparse byte store behind a single-ported fixed-latency
//! access pipe. Requests are served one at a time in arrival order, so a
//! request that arrives while an earlier one is in service waits for it.
//! Memory never sees cancellations; whatever reaches it gets a response.

use std::collections::BTreeMap;

use crate::engine::Tick;

use super::{BlockAddr, BlockData, MemoryConfig, ZERO_BLOCK};

pub struct MainMemory {
    pub cfg: MemoryConfig,
    latency_ticks: u64,
    store: BTreeMap<BlockAddr, BlockData>,
    busy_until: Tick,
}

impl MainMemory {
    pub fn new(cfg: MemoryConfig) -> MainMemory {
        MainMemory {
            cfg,
            latency_ticks: cfg.latency_ticks(),
            store: BTreeMap::new(),
            busy_until: Tick::ZERO,
        }
    }

    pub fn contains_addr(&self, addr: u64) -> bool {
        addr < self.cfg.capacity_bytes
    }

    /// Tick at which the response for a request arriving `now` leaves memory.
    pub fn schedule_access(&mut self, now: Tick) -> Tick {
        let start = if self.busy_until > now { self.busy_until } else { now };
        let done = start + self.latency_ticks;
        self.busy_until = done;
        done
    }

    pub fn read_block(&self, block: BlockAddr) -> BlockData {
        self.store.get(&block).copied().unwrap_or(ZERO_BLOCK)
    }

    pub fn write_block(&mut self, block: BlockAddr, data: BlockData) {
        self.store.insert(block, data);
    }

    pub fn write_bytes(&mut self, addr: u64, bytes: &[u8]) {
        for (i, &b) in bytes.iter().enumerate() {
            let a = addr + i as u64;
            let block = BlockAddr::containing(a);
            let entry = self.store.entry(block).or_insert(ZERO_BLOCK);
            entry[(a - block.0) as usize] = b;
        }
    }

    pub fn read_bytes(&self, addr: u64, len: usize) -> Vec<u8> {
        (0..len as u64)
            .map(|i| {
                let a = addr + i;
                let block = BlockAddr::containing(a);
                self.store.get(&block).map_or(0, |d| d[(a - block.0) as usize])
            })
            .collect()
    }
}
