//! The ClusterTag allocation scheme.
//!
//! Each size class keeps a cache of re-tagged chunks. An empty cache is
//! refilled from a uniformly chosen idle cluster (one with Freed slots),
//! whose tag ring is rotated first; with no idle cluster a fresh one is
//! placed. Every `scan_period` frees a region is scanned: clusters with all
//! slots Freed are released whole, and long runs of fully-Freed pages inside
//! partially used clusters stop being resident.

pub mod cluster;

use std::collections::{BTreeMap, HashMap};

use rand::seq::index::sample;
use rand::Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::address::{AccessCheck, AddressSpace, PageRange, ShadowMap, Tag, TaggedAddress, PAGE_SIZE};
use crate::config::ConfigError;
use crate::layout::{
    region_of, LargeObjectRegion, RegionState, SizeClass, SizeClassTable, SizeLookup,
};
use crate::metrics::SlotTagHistory;
use crate::model::{AllocError, AllocatorModel, LiveChunk, ModelKind, ModelStats};
use crate::tags::{init_cluster_tags, rotate_tags};
use crate::SimRng;

pub use cluster::{ClusterId, ClusterState, InvariantViolation, SlotStatus};

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterTagConfig {
    /// Randomization density: each pool admits `1GB / density` bytes.
    pub density: u32,
    pub quarantine: usize,
    pub allocatable: usize,
    pub cache_capacity: usize,
    /// Frees per region between periodic scans.
    pub scan_period: u64,
    /// Shortest run of fully-Freed pages that a scan releases.
    pub page_threshold: u64,
    pub size_classes: SizeClassTable,
    pub record_history: bool,
}

impl Default for ClusterTagConfig {
    fn default() -> Self {
        ClusterTagConfig {
            density: 5,
            quarantine: 16,
            allocatable: 239,
            cache_capacity: 64,
            scan_period: 1024,
            page_threshold: 4,
            size_classes: SizeClassTable::default(),
            record_history: true,
        }
    }
}

impl ClusterTagConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.density == 0 {
            return Err(ConfigError::Invalid("density must be at least 1".into()));
        }
        if !(1..=255).contains(&self.quarantine) {
            return Err(ConfigError::Invalid("quarantine must be in 1..=255".into()));
        }
        if self.allocatable == 0 || self.allocatable >= crate::layout::CHUNKS_PER_CLUSTER {
            return Err(ConfigError::Invalid(
                "allocatable slots per cluster must be in 1..=255".into(),
            ));
        }
        if self.allocatable + self.quarantine > 255 {
            return Err(ConfigError::Invalid(format!(
                "{} allocatable slots + {} quarantine tags exceed the 255 non-zero tags",
                self.allocatable, self.quarantine
            )));
        }
        if self.cache_capacity == 0 {
            return Err(ConfigError::Invalid("cache capacity must be at least 1".into()));
        }
        if self.scan_period == 0 {
            return Err(ConfigError::Invalid("scan period must be at least 1".into()));
        }
        if self.page_threshold == 0 {
            return Err(ConfigError::Invalid("page threshold must be at least 1".into()));
        }
        Ok(())
    }
}

/// A chunk parked in a cache, ready to be handed out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheEntry {
    pub cluster: ClusterId,
    pub slot: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReleaseReport {
    pub full_released: u64,
    pub pages_released: u64,
}

#[derive(Debug, Clone)]
struct ClassHeap {
    region: RegionState,
    cache: Vec<CacheEntry>,
    idle: Vec<ClusterId>,
    by_base: BTreeMap<u64, ClusterId>,
    head: Option<ClusterId>,
    tail: Option<ClusterId>,
    frees_since_scan: u64,
}

#[derive(Debug, Clone, Copy, Default)]
struct Counters {
    clusters_placed: u64,
    clusters_released: u64,
    pages_released: u64,
}

pub struct ClusterTagAllocator {
    config: ClusterTagConfig,
    rng: SimRng,
    space: AddressSpace,
    shadow: ShadowMap,
    heaps: Vec<ClassHeap>,
    large: LargeObjectRegion,
    large_tags: HashMap<u64, Tag>,
    clusters: Vec<Option<ClusterState>>,
    free_ids: Vec<u32>,
    round: u64,
    live: u64,
    history: Option<SlotTagHistory>,
    counters: Counters,
}

impl ClusterTagAllocator {
    /// Panics on an invalid configuration; use `try_new` to get the error.
    pub fn new(config: ClusterTagConfig, seed: u64) -> Self {
        Self::try_new(config, seed).expect("invalid ClusterTag configuration")
    }

    pub fn try_new(config: ClusterTagConfig, seed: u64) -> Result<Self, ConfigError> {
        config.validate()?;
        let heaps = config
            .size_classes
            .classes()
            .iter()
            .map(|&class| ClassHeap {
                region: RegionState::new(class, config.density),
                cache: Vec::with_capacity(config.cache_capacity),
                idle: Vec::new(),
                by_base: BTreeMap::new(),
                head: None,
                tail: None,
                frees_since_scan: 0,
            })
            .collect();
        let large = LargeObjectRegion::new(config.size_classes.large_region_id());
        let history = config.record_history.then(SlotTagHistory::new);
        Ok(ClusterTagAllocator {
            config,
            rng: SimRng::seed_from_u64(seed),
            space: AddressSpace::new(),
            shadow: ShadowMap::default(),
            heaps,
            large,
            large_tags: HashMap::new(),
            clusters: Vec::new(),
            free_ids: Vec::new(),
            round: 0,
            live: 0,
            history,
            counters: Counters::default(),
        })
    }

    pub fn config(&self) -> &ClusterTagConfig {
        &self.config
    }

    pub fn address_space(&self) -> &AddressSpace {
        &self.space
    }

    pub fn shadow(&self) -> &ShadowMap {
        &self.shadow
    }

    pub fn region(&self, class: usize) -> &RegionState {
        &self.heaps[class].region
    }

    pub fn cache(&self, class: usize) -> &[CacheEntry] {
        &self.heaps[class].cache
    }

    pub fn idle_clusters(&self, class: usize) -> &[ClusterId] {
        &self.heaps[class].idle
    }

    pub fn cluster(&self, id: ClusterId) -> Option<&ClusterState> {
        self.clusters.get(id.index()).and_then(Option::as_ref)
    }

    pub fn clusters(&self) -> impl Iterator<Item = &ClusterState> {
        self.clusters.iter().flatten()
    }

    /// Clusters of one class in chain order.
    pub fn chain(&self, class: usize) -> Vec<ClusterId> {
        let mut out = Vec::new();
        let mut cur = self.heaps[class].head;
        while let Some(id) = cur {
            out.push(id);
            cur = self.cluster_ref(id).next;
        }
        out
    }

    /// Allocation sequence number of the most recent hand-out.
    pub fn round(&self) -> u64 {
        self.round
    }

    /// The cluster holding `addr`, whether or not a chunk starts there.
    pub fn cluster_of(&self, addr: TaggedAddress) -> Option<&ClusterState> {
        let loc = addr.untag();
        let class = self.config.size_classes.by_region(region_of(addr))?;
        let (_, &id) = self.heaps[class.index()].by_base.range(..=loc).next_back()?;
        let c = self.cluster_ref(id);
        (loc < c.end()).then_some(c)
    }

    fn cluster_ref(&self, id: ClusterId) -> &ClusterState {
        self.clusters[id.index()].as_ref().expect("live cluster id")
    }

    fn cluster_mut(&mut self, id: ClusterId) -> &mut ClusterState {
        self.clusters[id.index()].as_mut().expect("live cluster id")
    }

    pub fn allocate(&mut self, size: u64) -> Result<TaggedAddress, AllocError> {
        match self.config.size_classes.lookup(size) {
            SizeLookup::LargeObject(len) => self.allocate_large(len),
            SizeLookup::Class(class) => self.allocate_small(class),
        }
    }

    fn allocate_large(&mut self, len: u64) -> Result<TaggedAddress, AllocError> {
        let base = self.large.place(len, &mut self.rng)?;
        self.space.reserve(base, len)?;
        let tag: Tag = self.rng.gen_range(1..=255);
        self.shadow.write(base, len, tag)?;
        self.large_tags.insert(base, tag);
        self.hand_out(base, tag);
        Ok(TaggedAddress::from_parts(base, tag))
    }

    fn allocate_small(&mut self, class: SizeClass) -> Result<TaggedAddress, AllocError> {
        let ci = class.index();
        if self.heaps[ci].cache.is_empty() {
            self.refill_cache(ci)?;
        }
        let entry = self.heaps[ci].cache.pop().expect("refill leaves the cache non-empty");
        let c = self.cluster_mut(entry.cluster);
        let SlotStatus::Cached(tag) = c.slot(entry.slot) else {
            unreachable!("cache entry points at a non-cached slot");
        };
        c.set_slot(entry.slot, SlotStatus::InUse(tag));
        let addr = c.chunk_addr(entry.slot);
        let chunk = c.chunk_size();
        self.space.touch(addr, chunk)?;
        self.shadow.write(addr, chunk, tag)?;
        self.hand_out(addr, tag);
        Ok(TaggedAddress::from_parts(addr, tag))
    }

    fn hand_out(&mut self, addr: u64, tag: Tag) {
        self.round += 1;
        self.live += 1;
        if let Some(h) = self.history.as_mut() {
            h.record(addr, tag, self.round);
        }
    }

    /// Uniform pick among the idle clusters of a class.
    pub fn pick_idle(&mut self, class: usize) -> Option<ClusterId> {
        let idle = &self.heaps[class].idle;
        if idle.is_empty() {
            return None;
        }
        Some(idle[self.rng.gen_range(0..idle.len())])
    }

    /// Loads the cache of `class` from a rotated idle cluster, or from a
    /// freshly placed one when no cluster has Freed slots.
    pub fn refill_cache(&mut self, class: usize) -> Result<(), AllocError> {
        let id = match self.pick_idle(class) {
            Some(id) => {
                rotate_tags(self.cluster_mut(id));
                id
            }
            None => self.place_cluster(class)?,
        };
        let cap = self.config.cache_capacity - self.heaps[class].cache.len();
        let freed: Vec<usize> = self.cluster_ref(id).freed_slots().collect();
        let take = cap.min(freed.len());
        let picks = sample(&mut self.rng, freed.len(), take);
        for i in picks.iter() {
            let slot = freed[i];
            let c = self.cluster_mut(id);
            let tag = c.slot(slot).tag().expect("freed slot carries a tag");
            c.set_slot(slot, SlotStatus::Cached(tag));
            self.heaps[class].cache.push(CacheEntry { cluster: id, slot });
        }
        self.sync_idle(id);
        Ok(())
    }

    fn place_cluster(&mut self, class: usize) -> Result<ClusterId, AllocError> {
        let heap = &mut self.heaps[class];
        let size_class = heap.region.size_class();
        let placement = heap.region.place_new_cluster(&mut self.rng)?;
        if let Err(e) = self.space.reserve(placement.base, size_class.cluster_size()) {
            self.heaps[class].region.release_cluster(&placement);
            return Err(e.into());
        }
        let id = match self.free_ids.pop() {
            Some(i) => ClusterId(i),
            None => {
                self.clusters.push(None);
                ClusterId((self.clusters.len() - 1) as u32)
            }
        };
        let mut c = ClusterState::new(id, size_class, placement, self.config.allocatable);
        init_cluster_tags(&mut c, self.config.quarantine, &mut self.rng);
        let heap = &mut self.heaps[class];
        c.prev = heap.tail;
        heap.by_base.insert(c.base(), id);
        let old_tail = heap.tail.replace(id);
        if heap.head.is_none() {
            heap.head = Some(id);
        }
        self.clusters[id.index()] = Some(c);
        if let Some(t) = old_tail {
            self.cluster_mut(t).next = Some(id);
        }
        self.counters.clusters_placed += 1;
        Ok(id)
    }

    /// Keeps idle-list membership in step with the cluster's Freed count.
    fn sync_idle(&mut self, id: ClusterId) {
        let c = self.cluster_ref(id);
        let class = c.size_class().index();
        match (c.freed_count() > 0, c.idle_pos) {
            (true, None) => {
                let heap = &mut self.heaps[class];
                heap.idle.push(id);
                let pos = heap.idle.len() - 1;
                self.cluster_mut(id).idle_pos = Some(pos);
            }
            (false, Some(pos)) => self.drop_idle(class, id, pos),
            _ => {}
        }
    }

    fn drop_idle(&mut self, class: usize, id: ClusterId, pos: usize) {
        let heap = &mut self.heaps[class];
        heap.idle.swap_remove(pos);
        let moved = heap.idle.get(pos).copied();
        self.cluster_mut(id).idle_pos = None;
        if let Some(m) = moved {
            self.cluster_mut(m).idle_pos = Some(pos);
        }
    }

    pub fn deallocate(&mut self, addr: TaggedAddress) -> Result<(), AllocError> {
        let loc = addr.untag();
        let region = region_of(addr);
        if region == self.large.region_id() {
            return self.deallocate_large(addr);
        }
        let invalid = AllocError::InvalidFree(addr);
        let class = self.config.size_classes.by_region(region).ok_or(invalid.clone())?;
        let ci = class.index();
        let (_, &id) = self.heaps[ci]
            .by_base
            .range(..=loc)
            .next_back()
            .ok_or(invalid.clone())?;
        let c = self.cluster_mut(id);
        let slot = c.slot_at(loc).ok_or(invalid.clone())?;
        match c.slot(slot) {
            SlotStatus::InUse(lock) => {
                if addr.tag() != lock {
                    return Err(AllocError::TagMismatch {
                        addr,
                        key: addr.tag(),
                        lock,
                    });
                }
                c.set_slot(slot, SlotStatus::Freed(lock));
                let chunk = c.chunk_size();
                self.shadow.write(loc, chunk, 0)?;
            }
            SlotStatus::Freed(_) | SlotStatus::Cached(_) => return Err(AllocError::DoubleFree(addr)),
            SlotStatus::Info => return Err(invalid),
        }
        self.live -= 1;
        self.sync_idle(id);
        let heap = &mut self.heaps[ci];
        heap.frees_since_scan += 1;
        if heap.frees_since_scan >= self.config.scan_period {
            heap.frees_since_scan = 0;
            self.periodic_scan(ci);
        }
        Ok(())
    }

    fn deallocate_large(&mut self, addr: TaggedAddress) -> Result<(), AllocError> {
        let loc = addr.untag();
        let Some(len) = self.large.len_at(loc) else {
            return Err(AllocError::InvalidFree(addr));
        };
        let lock = self.large_tags[&loc];
        if addr.tag() != lock {
            return Err(AllocError::TagMismatch {
                addr,
                key: addr.tag(),
                lock,
            });
        }
        self.large.remove(loc);
        self.large_tags.remove(&loc);
        let dropped = self.space.release(PageRange::new(loc, len))?;
        self.counters.pages_released += dropped;
        self.shadow.write(loc, len, 0)?;
        self.live -= 1;
        Ok(())
    }

    /// Full release of wholly Freed clusters and fragmented release of
    /// fully-Freed page runs in the others.
    pub fn periodic_scan(&mut self, class: usize) -> ReleaseReport {
        let mut report = ReleaseReport::default();
        for id in self.chain(class) {
            let c = self.cluster_ref(id);
            if c.is_fully_free() {
                report.pages_released += self.release_cluster(class, id);
                report.full_released += 1;
            } else if c.freed_count() > 0 {
                report.pages_released += self.release_fragments(id);
            }
        }
        self.counters.clusters_released += report.full_released;
        self.counters.pages_released += report.pages_released;
        report
    }

    fn release_cluster(&mut self, class: usize, id: ClusterId) -> u64 {
        if let Some(pos) = self.cluster_ref(id).idle_pos {
            self.drop_idle(class, id, pos);
        }
        let c = self.clusters[id.index()].take().expect("live cluster id");
        let heap = &mut self.heaps[class];
        match c.prev {
            Some(p) => self.clusters[p.index()].as_mut().expect("linked").next = c.next,
            None => heap.head = c.next,
        }
        match c.next {
            Some(n) => self.clusters[n.index()].as_mut().expect("linked").prev = c.prev,
            None => heap.tail = c.prev,
        }
        heap.by_base.remove(&c.base());
        heap.region.release_cluster(&c.placement);
        self.free_ids.push(id.0);
        self.space
            .release(PageRange::new(c.base(), c.size_class().cluster_size()))
            .expect("cluster reservation is tracked")
    }

    fn release_fragments(&mut self, id: ClusterId) -> u64 {
        let c = self.cluster_ref(id);
        let chunk = c.chunk_size();
        let pages = c.size_class().cluster_size() / PAGE_SIZE;
        let page_free = |p: u64| {
            let first = (p * PAGE_SIZE / chunk) as usize;
            let last = (((p + 1) * PAGE_SIZE - 1) / chunk) as usize;
            c.slots()[first..=last]
                .iter()
                .all(|s| matches!(s, SlotStatus::Freed(_)))
        };
        let mut runs = Vec::new();
        let mut start = None;
        for p in 0..=pages {
            let free = p < pages && page_free(p);
            match (free, start) {
                (true, None) => start = Some(p),
                (false, Some(s)) => {
                    if p - s >= self.config.page_threshold {
                        runs.push(PageRange::new(c.base() + s * PAGE_SIZE, (p - s) * PAGE_SIZE));
                    }
                    start = None;
                }
                _ => {}
            }
        }
        runs.into_iter()
            .map(|r| self.space.release(r).expect("run inside a tracked cluster"))
            .sum()
    }

    pub fn check_access(&self, addr: TaggedAddress, len: u64) -> AccessCheck {
        self.shadow.check_access(addr, len)
    }

    /// Tag uniqueness and status bookkeeping of one cluster.
    pub fn check_cluster(&self, id: ClusterId) -> Result<(), InvariantViolation> {
        let c = self
            .cluster(id)
            .ok_or_else(|| InvariantViolation(format!("cluster {} is not live", id.index())))?;
        c.check_unique()?;
        if c.quarantine().len() != self.config.quarantine {
            return Err(InvariantViolation(format!(
                "cluster {:#x} quarantine holds {} tags",
                c.base(),
                c.quarantine().len()
            )));
        }
        if c.freed_count() + c.cached_count() + c.in_use_count() != c.allocatable() {
            return Err(InvariantViolation(format!(
                "cluster {:#x} slot counts do not add up",
                c.base()
            )));
        }
        Ok(())
    }

    pub fn check_invariants(&self) -> Result<(), InvariantViolation> {
        for c in self.clusters() {
            self.check_cluster(c.id())?;
        }
        for heap in &self.heaps {
            for (i, pool) in heap.region.pools().iter().enumerate() {
                if pool.used_bytes() > pool.cap() {
                    return Err(InvariantViolation(format!(
                        "pool {i} of region {} holds {:#x} bytes over its {:#x} cap",
                        heap.region.region_id(),
                        pool.used_bytes(),
                        pool.cap()
                    )));
                }
            }
            for e in &heap.cache {
                let c = self.cluster(e.cluster).ok_or_else(|| {
                    InvariantViolation("cache entry references a released cluster".into())
                })?;
                if !matches!(c.slot(e.slot), SlotStatus::Cached(_)) {
                    return Err(InvariantViolation(format!(
                        "cache entry for slot {} of {:#x} is not cached",
                        e.slot,
                        c.base()
                    )));
                }
            }
        }
        let cached: usize = self.clusters().map(|c| c.cached_count()).sum();
        let in_cache: usize = self.heaps.iter().map(|h| h.cache.len()).sum();
        if cached != in_cache {
            return Err(InvariantViolation(format!(
                "{cached} cached slots but {in_cache} cache entries"
            )));
        }
        Ok(())
    }
}

impl AllocatorModel for ClusterTagAllocator {
    fn kind(&self) -> ModelKind {
        ModelKind::ClusterTag
    }

    fn allocate(&mut self, size: u64) -> Result<TaggedAddress, AllocError> {
        ClusterTagAllocator::allocate(self, size)
    }

    fn deallocate(&mut self, addr: TaggedAddress) -> Result<(), AllocError> {
        ClusterTagAllocator::deallocate(self, addr)
    }

    fn check_access(&self, addr: TaggedAddress, len: u64) -> AccessCheck {
        self.shadow.check_access(addr, len)
    }

    fn stride(&self, size: u64) -> u64 {
        match self.config.size_classes.lookup(size) {
            SizeLookup::Class(c) => c.chunk_size(),
            SizeLookup::LargeObject(len) => len,
        }
    }

    fn reuse_rounds(&self, addr: TaggedAddress) -> Option<u64> {
        self.cluster_of(addr).map(ClusterState::reuse_rounds)
    }

    fn cached_chunks(&self, size: u64) -> usize {
        match self.config.size_classes.lookup(size) {
            SizeLookup::Class(c) => self.heaps[c.index()].cache.len(),
            SizeLookup::LargeObject(_) => 0,
        }
    }

    fn live_chunks(&self) -> Vec<LiveChunk> {
        let mut out = Vec::with_capacity(self.live as usize);
        for c in self.clusters() {
            for (i, s) in c.slots().iter().enumerate() {
                if let SlotStatus::InUse(t) = *s {
                    out.push(LiveChunk {
                        addr: TaggedAddress::from_parts(c.chunk_addr(i), t),
                        stride: c.chunk_size(),
                    });
                }
            }
        }
        out
    }

    fn history(&self) -> Option<&SlotTagHistory> {
        self.history.as_ref()
    }

    fn stats(&self) -> ModelStats {
        ModelStats {
            live_chunks: self.live,
            resident_pages: self.space.resident_pages(),
            clusters_placed: self.counters.clusters_placed,
            clusters_released: self.counters.clusters_released,
            pages_released: self.counters.pages_released,
            allocation_rounds: self.round,
        }
    }

    fn check_invariants(&self) -> Result<(), InvariantViolation> {
        ClusterTagAllocator::check_invariants(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn alloc(seed: u64) -> ClusterTagAllocator {
        ClusterTagAllocator::new(ClusterTagConfig::default(), seed)
    }

    #[test]
    fn small_allocation_is_tagged_over_its_granules() {
        let mut a = alloc(1);
        let p = a.allocate(0x18).unwrap();
        assert_eq!(p.untag() % 16, 0);
        assert_ne!(p.tag(), 0);
        assert_eq!(a.stride(0x18), 0x20);
        assert_eq!(a.check_access(p, 0x20), AccessCheck::Ok);
        assert!(a.check_access(p, 0x21).is_violation());
        assert_eq!(region_of(p), 1);
        a.check_invariants().unwrap();
    }

    #[test]
    fn one_cluster_serves_exactly_its_allocatable_slots() {
        let mut a = alloc(2);
        let bases: BTreeSet<u64> = (0..239)
            .map(|_| {
                let p = a.allocate(0x40).unwrap();
                a.cluster_of(p).unwrap().base()
            })
            .collect();
        assert_eq!(bases.len(), 1);
        let next = a.allocate(0x40).unwrap();
        assert!(!bases.contains(&a.cluster_of(next).unwrap().base()));
        a.check_invariants().unwrap();
    }

    #[test]
    fn large_object_gets_one_tag() {
        let mut a = alloc(3);
        let p = a.allocate(0x20000).unwrap();
        assert_eq!(region_of(p), a.config().size_classes.large_region_id());
        assert_eq!(a.check_access(p, 0x20000), AccessCheck::Ok);
        assert!(a.check_access(p.offset(0x20000), 1).is_violation());
        let pages = a.address_space().resident_pages();
        a.deallocate(p).unwrap();
        assert_eq!(a.address_space().resident_pages(), pages - 0x20);
        assert!(a.check_access(p, 1).is_violation());
    }

    #[test]
    fn double_and_invalid_frees() {
        let mut a = alloc(4);
        let p = a.allocate(0x100).unwrap();
        a.deallocate(p).unwrap();
        assert_eq!(a.deallocate(p), Err(AllocError::DoubleFree(p)));
        let bogus = TaggedAddress::from_parts(0x0500_0000_0000, 7);
        assert_eq!(a.deallocate(bogus), Err(AllocError::InvalidFree(bogus)));
        let q = a.allocate(0x100).unwrap();
        let wrong = q.with_tag(q.tag().wrapping_add(1).max(1));
        assert!(matches!(a.deallocate(wrong), Err(AllocError::TagMismatch { .. })));
        assert!(matches!(a.deallocate(q.offset(16)), Err(AllocError::InvalidFree(_))));
    }

    #[test]
    fn stale_key_faults_after_free() {
        let mut a = alloc(5);
        let p = a.allocate(0x30).unwrap();
        a.deallocate(p).unwrap();
        assert_eq!(
            a.check_access(p, 1),
            AccessCheck::Violation {
                granule: p.untag() / 16,
                key: p.tag(),
                lock: 0
            }
        );
    }

    #[test]
    fn header_slots_stay_untagged() {
        let mut a = alloc(6);
        let p = a.allocate(0x20).unwrap();
        let c = a.cluster_of(p).unwrap();
        for g in (c.base()..c.chunk_addr(c.info_slots())).step_by(16) {
            assert_eq!(a.shadow().tag_of_byte(g), 0);
        }
    }

    #[test]
    fn refill_rotates_the_single_idle_cluster() {
        let cfg = ClusterTagConfig {
            cache_capacity: 8,
            ..ClusterTagConfig::default()
        };
        let mut a = ClusterTagAllocator::new(cfg, 7);
        let ptrs: Vec<_> = (0..8).map(|_| a.allocate(0x20).unwrap()).collect();
        let id = a.cluster_of(ptrs[0]).unwrap().id();
        assert_eq!(a.cluster(id).unwrap().reuse_rounds(), 0);
        // Cache drained; the cluster still has Freed slots, so it is reused.
        a.allocate(0x20).unwrap();
        assert_eq!(a.cluster(id).unwrap().reuse_rounds(), 1);
        assert_eq!(a.cache(0).len(), 7);
        assert!(a.cache(0).iter().all(|e| e.cluster == id));
        a.check_invariants().unwrap();
    }

    #[test]
    fn fresh_cluster_base_depends_on_seed() {
        let base = |seed| {
            let mut a = alloc(seed);
            let p = a.allocate(0x20).unwrap();
            a.cluster_of(p).unwrap().base()
        };
        assert_ne!(base(10), base(11));
    }

    #[test]
    fn idle_selection_is_uniform() {
        let mut a = alloc(8);
        let ptrs: Vec<_> = (0..4 * 239).map(|_| a.allocate(0x20).unwrap()).collect();
        assert!(a.idle_clusters(0).is_empty());
        let mut freed_in = BTreeSet::new();
        for p in &ptrs {
            if freed_in.insert(a.cluster_of(*p).unwrap().base()) {
                a.deallocate(*p).unwrap();
            }
        }
        assert_eq!(freed_in.len(), 4);
        let idle: Vec<ClusterId> = a.idle_clusters(0).to_vec();
        assert_eq!(idle.len(), 4);
        let trials = 10_000;
        let mut counts: HashMap<ClusterId, u64> = HashMap::new();
        for _ in 0..trials {
            *counts.entry(a.pick_idle(0).unwrap()).or_default() += 1;
        }
        let expected = trials as f64 / 4.0;
        let chi2: f64 = idle
            .iter()
            .map(|id| (counts[id] as f64 - expected).powi(2) / expected)
            .sum();
        // 99% quantile of chi-square with 3 degrees of freedom.
        assert!(chi2 < 11.345, "chi2 {chi2}");
    }

    #[test]
    fn full_release_drops_the_cluster() {
        let cfg = ClusterTagConfig {
            scan_period: u64::MAX,
            ..ClusterTagConfig::default()
        };
        let mut a = ClusterTagAllocator::new(cfg, 9);
        // Fill the first cluster completely so nothing of it stays cached.
        let ptrs: Vec<_> = (0..239).map(|_| a.allocate(0x400).unwrap()).collect();
        let c = a.cluster_of(ptrs[0]).unwrap();
        let (id, base, pages) = (c.id(), c.base(), c.size_class().cluster_size() / PAGE_SIZE);
        assert_eq!(a.cache(10).len(), 0);
        for p in &ptrs {
            a.deallocate(*p).unwrap();
        }
        let before = a.address_space().resident_pages();
        let report = a.periodic_scan(10);
        assert_eq!(report.full_released, 1);
        assert_eq!(report.pages_released, pages);
        assert_eq!(a.address_space().resident_pages(), before - pages);
        assert!(a.cluster(id).is_none());
        assert!(a.chain(10).is_empty());
        assert!(a.region(10).pools().iter().all(|p| p.reservations().all(|(b, _)| b != base)));
        assert_eq!(a.periodic_scan(10), ReleaseReport::default());
    }

    #[test]
    fn fragmented_release_of_a_two_page_cluster() {
        let cfg = ClusterTagConfig {
            scan_period: u64::MAX,
            page_threshold: 1,
            ..ClusterTagConfig::default()
        };
        let mut a = ClusterTagAllocator::new(cfg, 12);
        let ptrs: Vec<_> = (0..239).map(|_| a.allocate(0x20).unwrap()).collect();
        assert_eq!(a.periodic_scan(0), ReleaseReport::default());
        // Page 1 covers slots 128..256; page 0 keeps header and live slots.
        let c = a.cluster_of(ptrs[0]).unwrap();
        let page1 = c.base() + PAGE_SIZE;
        for p in &ptrs {
            if p.untag() >= page1 {
                a.deallocate(*p).unwrap();
            }
        }
        let before = a.address_space().resident_pages();
        let report = a.periodic_scan(0);
        assert_eq!(report, ReleaseReport { full_released: 0, pages_released: 1 });
        assert_eq!(a.address_space().resident_pages(), before - 1);
        assert!(!a.address_space().is_resident(page1));
        // Handing a chunk of that page out again brings it back.
        a.allocate(0x20).unwrap();
        assert!(a.address_space().is_resident(page1));
        a.check_invariants().unwrap();
    }

    #[test]
    fn history_records_hand_outs() {
        let mut a = alloc(13);
        for _ in 0..10 {
            let p = a.allocate(0x80).unwrap();
            a.deallocate(p).unwrap();
        }
        assert_eq!(a.history().unwrap().events(), 10);
        assert_eq!(a.stats().allocation_rounds, 10);
        assert_eq!(a.stats().live_chunks, 0);
    }
}
