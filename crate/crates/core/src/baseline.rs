//! Reference tag-assignment strategies on a flat, contiguous heap.
//!
//! Every size class gets an arena at the base of its region. Slots are laid
//! out back to back (after a 16-byte untagged header for `RandomWithHeader`)
//! and freed slots are reused last-in first-out. The arena always keeps at
//! least one tagged slot past the highest slot ever handed out, so an
//! overflow off the end of the newest chunk hits tagged memory.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::address::{AccessCheck, Tag, TaggedAddress, GRANULE_SIZE, PAGE_SIZE};
use crate::config::ConfigError;
use crate::layout::{region_base, region_of, SizeClassTable, SizeLookup, CHUNKS_PER_CLUSTER};
use crate::metrics::SlotTagHistory;
use crate::model::{AllocError, AllocatorModel, LiveChunk, ModelKind, ModelStats};
use crate::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StrategyKind {
    /// Fresh random tag on every allocation and free.
    Random,
    /// `Random` plus an untagged header granule before every chunk.
    RandomWithHeader,
    /// Random draws from two disjoint halves of the tag space, alternating
    /// by slot parity.
    Staggered,
    /// Random first tag, incremented on every free.
    FixedTemporal,
    /// Slot index modulo the tag space, never changed.
    StickySpatial,
}

/// Tag source of one strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StrategyModel {
    kind: StrategyKind,
    tag_bits: u32,
}

impl StrategyModel {
    pub fn new(kind: StrategyKind, tag_bits: u32) -> Self {
        assert!((2..=8).contains(&tag_bits), "tag width must be 2..=8 bits");
        StrategyModel { kind, tag_bits }
    }

    pub fn kind(&self) -> StrategyKind {
        self.kind
    }

    pub fn tag_bits(&self) -> u32 {
        self.tag_bits
    }

    fn space(&self) -> u32 {
        1 << self.tag_bits
    }

    /// Parity group of a slot: even slots draw odd tags, odd slots even ones.
    fn staggered_draw<R: Rng + ?Sized>(&self, slot: u64, rng: &mut R) -> Tag {
        let half = self.space() / 2;
        let low = ((slot & 1) ^ 1) as u32;
        (rng.gen_range(0..half) * 2 + low) as Tag
    }

    fn random_draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Tag {
        match self.kind {
            StrategyKind::RandomWithHeader => rng.gen_range(1..self.space()) as Tag,
            _ => rng.gen_range(0..self.space()) as Tag,
        }
    }

    /// Tag for a slot receiving its first chunk.
    pub fn assign_spatial<R: Rng + ?Sized>(&self, slot: u64, rng: &mut R) -> Tag {
        match self.kind {
            StrategyKind::StickySpatial => (slot % self.space() as u64) as Tag,
            StrategyKind::Staggered => self.staggered_draw(slot, rng),
            _ => self.random_draw(rng),
        }
    }

    /// Lock written over a slot when its chunk is freed.
    pub fn assign_temporal<R: Rng + ?Sized>(&self, slot: u64, prev: Tag, rng: &mut R) -> Tag {
        debug_assert!((prev as u32) < self.space());
        match self.kind {
            StrategyKind::FixedTemporal => ((prev as u32 + 1) % self.space()) as Tag,
            StrategyKind::StickySpatial => prev,
            StrategyKind::Staggered => loop {
                let t = self.staggered_draw(slot, rng);
                if t != prev || self.space() <= 2 {
                    break t;
                }
            },
            _ => self.random_draw(rng),
        }
    }

    /// Tag for a slot handed out again; `lock` is its current lock.
    pub fn assign_reuse<R: Rng + ?Sized>(&self, slot: u64, lock: Tag, rng: &mut R) -> Tag {
        match self.kind {
            StrategyKind::FixedTemporal | StrategyKind::StickySpatial => lock,
            StrategyKind::Staggered => self.staggered_draw(slot, rng),
            _ => self.random_draw(rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineConfig {
    pub tag_bits: u32,
    pub size_classes: SizeClassTable,
    pub record_history: bool,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            tag_bits: 8,
            size_classes: SizeClassTable::default(),
            record_history: true,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(2..=8).contains(&self.tag_bits) {
            return Err(ConfigError::Invalid("tag bits must be in 2..=8".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    lock: Tag,
    live: bool,
    reallocs: u64,
}

#[derive(Debug, Clone)]
struct Arena {
    base: u64,
    chunk: u64,
    header: u64,
    slots: Vec<Slot>,
    /// Slots never handed out start here.
    fresh: usize,
    free: Vec<usize>,
}

impl Arena {
    fn stride(&self) -> u64 {
        self.chunk + self.header
    }

    fn chunk_addr(&self, slot: usize) -> u64 {
        self.base + slot as u64 * self.stride() + self.header
    }

    fn slot_at(&self, loc: u64) -> Option<usize> {
        let off = loc.checked_sub(self.base + self.header)?;
        let slot = (off / self.stride()) as usize;
        (off % self.stride() == 0 && slot < self.slots.len()).then_some(slot)
    }
}

#[derive(Debug, Clone, Copy)]
struct LargeBlock {
    len: u64,
    lock: Tag,
    live: bool,
}

pub struct BaselineAllocator {
    strategy: StrategyModel,
    config: BaselineConfig,
    rng: SimRng,
    arenas: Vec<Arena>,
    large: BTreeMap<u64, LargeBlock>,
    large_next: u64,
    round: u64,
    live: u64,
    history: Option<SlotTagHistory>,
}

impl BaselineAllocator {
    /// Panics on an invalid configuration; use `try_new` to get the error.
    pub fn new(kind: StrategyKind, config: BaselineConfig, seed: u64) -> Self {
        Self::try_new(kind, config, seed).expect("invalid baseline configuration")
    }

    pub fn try_new(kind: StrategyKind, config: BaselineConfig, seed: u64) -> Result<Self, ConfigError> {
        config.validate()?;
        let header = if kind == StrategyKind::RandomWithHeader {
            GRANULE_SIZE
        } else {
            0
        };
        let arenas = config
            .size_classes
            .classes()
            .iter()
            .map(|c| Arena {
                base: region_base(c.region_id()),
                chunk: c.chunk_size(),
                header,
                slots: Vec::new(),
                fresh: 0,
                free: Vec::new(),
            })
            .collect();
        let large_next = region_base(config.size_classes.large_region_id());
        let history = config.record_history.then(SlotTagHistory::new);
        Ok(BaselineAllocator {
            strategy: StrategyModel::new(kind, config.tag_bits),
            config,
            rng: SimRng::seed_from_u64(seed),
            arenas,
            large: BTreeMap::new(),
            large_next,
            round: 0,
            live: 0,
            history,
        })
    }

    pub fn strategy(&self) -> StrategyModel {
        self.strategy
    }

    /// Lock of the granule holding `location`: the slot's lock inside a
    /// laid-out chunk, 0 in headers and outside every arena.
    pub fn lock_at(&self, location: u64) -> Tag {
        let probe = TaggedAddress::new(location);
        if region_of(probe) == self.config.size_classes.large_region_id() {
            return match self.large.range(..=location).next_back() {
                Some((&b, blk)) if location < b + blk.len => blk.lock,
                _ => 0,
            };
        }
        let Some(class) = self.config.size_classes.by_region(region_of(probe)) else {
            return 0;
        };
        let arena = &self.arenas[class.index()];
        let Some(off) = location.checked_sub(arena.base) else {
            return 0;
        };
        let slot = (off / arena.stride()) as usize;
        if slot >= arena.slots.len() || off % arena.stride() < arena.header {
            return 0;
        }
        arena.slots[slot].lock
    }

    /// Lays out and tags another run of slots.
    fn carve(&mut self, class: usize) {
        let arena = &mut self.arenas[class];
        let start = arena.slots.len();
        for slot in start..start + CHUNKS_PER_CLUSTER {
            let lock = self.strategy.assign_spatial(slot as u64, &mut self.rng);
            arena.slots.push(Slot {
                lock,
                live: false,
                reallocs: 0,
            });
        }
    }

    pub fn allocate(&mut self, size: u64) -> Result<TaggedAddress, AllocError> {
        let class = match self.config.size_classes.lookup(size) {
            SizeLookup::LargeObject(len) => return Ok(self.allocate_large(len)),
            SizeLookup::Class(c) => c.index(),
        };
        let (slot, reused) = match self.arenas[class].free.pop() {
            Some(s) => (s, true),
            None => {
                let arena = &mut self.arenas[class];
                arena.fresh += 1;
                (arena.fresh - 1, false)
            }
        };
        while self.arenas[class].slots.len() <= self.arenas[class].fresh {
            self.carve(class);
        }
        let lock = self.arenas[class].slots[slot].lock;
        let tag = if reused {
            self.strategy.assign_reuse(slot as u64, lock, &mut self.rng)
        } else {
            lock
        };
        let arena = &mut self.arenas[class];
        let s = &mut arena.slots[slot];
        s.lock = tag;
        s.live = true;
        if reused {
            s.reallocs += 1;
        }
        let addr = arena.chunk_addr(slot);
        self.hand_out(addr, tag);
        Ok(TaggedAddress::from_parts(addr, tag))
    }

    fn allocate_large(&mut self, len: u64) -> TaggedAddress {
        let base = self.large_next;
        self.large_next += len + PAGE_SIZE;
        let index = self.large.len() as u64;
        let lock = self.strategy.assign_spatial(index, &mut self.rng);
        self.large.insert(base, LargeBlock { len, lock, live: true });
        self.hand_out(base, lock);
        TaggedAddress::from_parts(base, lock)
    }

    fn hand_out(&mut self, addr: u64, tag: Tag) {
        self.round += 1;
        self.live += 1;
        if let Some(h) = self.history.as_mut() {
            h.record(addr, tag, self.round);
        }
    }

    fn locate(&self, addr: TaggedAddress) -> Option<(usize, usize)> {
        let class = self.config.size_classes.by_region(region_of(addr))?;
        let arena = &self.arenas[class.index()];
        Some((class.index(), arena.slot_at(addr.untag())?))
    }

    /// Frees by comparing key and lock; a stale pointer whose key happens
    /// to match a freed slot's lock goes unnoticed.
    pub fn deallocate(&mut self, addr: TaggedAddress) -> Result<(), AllocError> {
        let key = addr.tag();
        if region_of(addr) == self.config.size_classes.large_region_id() {
            return self.deallocate_large(addr);
        }
        let (class, slot) = self.locate(addr).ok_or(AllocError::InvalidFree(addr))?;
        let arena = &mut self.arenas[class];
        let s = arena.slots[slot];
        if key != s.lock {
            return Err(AllocError::TagMismatch {
                addr,
                key,
                lock: s.lock,
            });
        }
        if !s.live {
            return Ok(());
        }
        let lock = self.strategy.assign_temporal(slot as u64, s.lock, &mut self.rng);
        let arena = &mut self.arenas[class];
        arena.slots[slot].lock = lock;
        arena.slots[slot].live = false;
        arena.free.push(slot);
        self.live -= 1;
        Ok(())
    }

    fn deallocate_large(&mut self, addr: TaggedAddress) -> Result<(), AllocError> {
        let key = addr.tag();
        let loc = addr.untag();
        let block = *self.large.get(&loc).ok_or(AllocError::InvalidFree(addr))?;
        if key != block.lock {
            return Err(AllocError::TagMismatch {
                addr,
                key,
                lock: block.lock,
            });
        }
        if !block.live {
            return Ok(());
        }
        let lock = self.strategy.assign_temporal(0, block.lock, &mut self.rng);
        self.large.insert(loc, LargeBlock { lock, live: false, ..block });
        self.live -= 1;
        Ok(())
    }

    fn chunks(&self, live_only: bool) -> Vec<LiveChunk> {
        let mut out = Vec::new();
        for arena in &self.arenas {
            for (i, s) in arena.slots.iter().enumerate() {
                if s.live || !live_only {
                    out.push(LiveChunk {
                        addr: TaggedAddress::from_parts(arena.chunk_addr(i), s.lock),
                        stride: arena.stride(),
                    });
                }
            }
        }
        out
    }
}

impl AllocatorModel for BaselineAllocator {
    fn kind(&self) -> ModelKind {
        match self.strategy.kind() {
            StrategyKind::Random => ModelKind::Random,
            StrategyKind::RandomWithHeader => ModelKind::RandomHeader,
            StrategyKind::Staggered => ModelKind::Staggered,
            StrategyKind::FixedTemporal => ModelKind::FixedTemporal,
            StrategyKind::StickySpatial => ModelKind::Sticky,
        }
    }

    fn allocate(&mut self, size: u64) -> Result<TaggedAddress, AllocError> {
        BaselineAllocator::allocate(self, size)
    }

    fn deallocate(&mut self, addr: TaggedAddress) -> Result<(), AllocError> {
        BaselineAllocator::deallocate(self, addr)
    }

    fn check_access(&self, addr: TaggedAddress, len: u64) -> AccessCheck {
        if len == 0 {
            return AccessCheck::Ok;
        }
        let key = addr.tag();
        let first = addr.untag() / GRANULE_SIZE;
        let last = (addr.untag() + len - 1) / GRANULE_SIZE;
        for granule in first..=last {
            let lock = self.lock_at(granule * GRANULE_SIZE);
            if lock != key {
                return AccessCheck::Violation { granule, key, lock };
            }
        }
        AccessCheck::Ok
    }

    fn stride(&self, size: u64) -> u64 {
        match self.config.size_classes.lookup(size) {
            SizeLookup::Class(c) => self.arenas[c.index()].stride(),
            SizeLookup::LargeObject(len) => len,
        }
    }

    fn reuse_rounds(&self, addr: TaggedAddress) -> Option<u64> {
        if let Some(b) = self.large.get(&addr.untag()) {
            return b.live.then_some(0);
        }
        let (class, slot) = self.locate(addr)?;
        Some(self.arenas[class].slots[slot].reallocs)
    }

    fn live_chunks(&self) -> Vec<LiveChunk> {
        self.chunks(true)
    }

    fn tagged_chunks(&self) -> Vec<LiveChunk> {
        self.chunks(false)
    }

    fn history(&self) -> Option<&SlotTagHistory> {
        self.history.as_ref()
    }

    fn stats(&self) -> ModelStats {
        let arena_pages: u64 = self
            .arenas
            .iter()
            .map(|a| (a.slots.len() as u64 * a.stride()).div_ceil(PAGE_SIZE))
            .sum();
        let large_pages: u64 = self.large.values().map(|b| b.len / PAGE_SIZE).sum();
        ModelStats {
            live_chunks: self.live,
            resident_pages: arena_pages + large_pages,
            allocation_rounds: self.round,
            ..ModelStats::default()
        }
    }
}
