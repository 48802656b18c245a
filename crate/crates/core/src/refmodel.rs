//! Functional set-associative LRU reference model.
//!
//! A plain presence/recency model of the same hierarchy, with no timing, no
//! MSHRs, and no messages, fed one access at a time. It exists as an
//! independent check on the timed hierarchy: on any sequentially-driven
//! access stream with no squashes, the (hit level | memory) outcome sequence
//! of the two must match exactly. Keep this file free of simulator types so
//! the two paths cannot share a bug.

use crate::config::SystemConfig;

const BLOCK: u64 = 64;

/// Where a reference access was served from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefOutcome {
    Level(u8),
    Memory,
}

struct RefSet {
    /// Most-recently-used last; values are block numbers.
    blocks: Vec<u64>,
    ways: usize,
}

impl RefSet {
    fn contains(&self, block: u64) -> bool {
        self.blocks.contains(&block)
    }

    fn touch(&mut self, block: u64) {
        if let Some(pos) = self.blocks.iter().position(|&b| b == block) {
            let b = self.blocks.remove(pos);
            self.blocks.push(b);
        }
    }

    fn install(&mut self, block: u64) {
        debug_assert!(!self.contains(block));
        if self.blocks.len() == self.ways {
            self.blocks.remove(0);
        }
        self.blocks.push(block);
    }

    fn remove(&mut self, block: u64) {
        self.blocks.retain(|&b| b != block);
    }
}

struct RefLevel {
    sets: Vec<RefSet>,
}

impl RefLevel {
    fn new(size_bytes: u64, ways: u64) -> RefLevel {
        let set_count = size_bytes / (ways * BLOCK);
        RefLevel {
            sets: (0..set_count)
                .map(|_| RefSet {
                    blocks: Vec::new(),
                    ways: ways as usize,
                })
                .collect(),
        }
    }

    fn set_mut(&mut self, block: u64) -> &mut RefSet {
        let idx = (block % self.sets.len() as u64) as usize;
        &mut self.sets[idx]
    }
}

/// Single-core view: one L1D plus the shared levels.
pub struct RefHierarchy {
    levels: Vec<RefLevel>,
}

impl RefHierarchy {
    pub fn new(cfg: &SystemConfig) -> RefHierarchy {
        let mut levels = vec![RefLevel::new(cfg.l1d.size_bytes, cfg.l1d.associativity)];
        for lvl in &cfg.shared_levels {
            levels.push(RefLevel::new(lvl.size_bytes, lvl.associativity));
        }
        RefHierarchy { levels }
    }

    /// One read or write. A hit touches only the hit level's recency; a miss
    /// installs the block at the hit level's upper levels... specifically, at
    /// every level above the serving one, mirroring fills on the response
    /// path. Writes behave like reads for placement (write-allocate).
    pub fn access(&mut self, addr: u64) -> RefOutcome {
        let block = addr / BLOCK;
        let mut hit_level = None;
        for (i, level) in self.levels.iter_mut().enumerate() {
            let set = level.set_mut(block);
            if set.contains(block) {
                set.touch(block);
                hit_level = Some(i);
                break;
            }
        }
        let fill_below = match hit_level {
            Some(i) => i,
            None => self.levels.len(),
        };
        for level in self.levels[..fill_below].iter_mut() {
            level.set_mut(block).install(block);
        }
        match hit_level {
            Some(i) => RefOutcome::Level(i as u8 + 1),
            None => RefOutcome::Memory,
        }
    }

    /// Mirror of `flush_block`: gone from every level.
    pub fn flush(&mut self, addr: u64) {
        let block = addr / BLOCK;
        for level in &mut self.levels {
            level.set_mut(block).remove(block);
        }
    }

    /// Mirror of `evict_block_from_level` for the given level (1-based).
    pub fn evict_level(&mut self, level: u8, addr: u64) {
        let block = addr / BLOCK;
        self.levels[level as usize - 1].set_mut(block).remove(block);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset_c1;

    #[test]
    fn miss_then_hit_then_l2_hit_after_l1_eviction() {
        let cfg = preset_c1();
        let mut h = RefHierarchy::new(&cfg);
        assert_eq!(h.access(0x1000), RefOutcome::Memory);
        assert_eq!(h.access(0x1000), RefOutcome::Level(1));
        h.evict_level(1, 0x1000);
        assert_eq!(h.access(0x1000), RefOutcome::Level(2));
        assert_eq!(h.access(0x1000), RefOutcome::Level(1));
        h.flush(0x1000);
        assert_eq!(h.access(0x1000), RefOutcome::Memory);
    }

    #[test]
    fn lru_eviction_order_within_a_set() {
        let cfg = preset_c1(); // L1: 64 sets, 8 ways
        let mut h = RefHierarchy::new(&cfg);
        let set_stride = 64 * 64; // same-set blocks in L1
        for i in 0..8 {
            h.access(i * set_stride);
        }
        h.access(0); // refresh block 0
        h.access(8 * set_stride); // evicts block at 1 * set_stride
        assert_eq!(h.access(0), RefOutcome::Level(1));
        assert_eq!(h.access(set_stride), RefOutcome::Level(2));
    }
}
