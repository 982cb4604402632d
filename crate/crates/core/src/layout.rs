//! Size classes and Region–Pool–Cluster placement.
//!
//! Every size class owns a 1TB region whose id sits in address bits 40..48.
//! A region is carved into 1024 pools of 1GB; pools are opened at random
//! slots and capped at `1GB / d` bytes of cluster reservations. A new cluster
//! reserves twice its size at a random page-aligned offset and only occupies
//! the first half, which keeps at least one cluster size between any two
//! occupied ranges.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::address::{TaggedAddress, PAGE_SIZE};

pub const CHUNKS_PER_CLUSTER: usize = 256;
pub const REGION_SHIFT: u32 = 40;
pub const REGION_SIZE: u64 = 1 << REGION_SHIFT;
pub const POOL_SIZE: u64 = 1 << 30;
pub const POOLS_PER_REGION: usize = (REGION_SIZE / POOL_SIZE) as usize;
/// Requests above this size bypass the clusters.
pub const LARGE_OBJECT_THRESHOLD: u64 = 0x10000;
/// Overlap retries inside one pool before moving on.
pub const PLACEMENT_RETRIES: usize = 64;

/// Default class table: eight 0x20 steps, fifteen 0x100 steps, then a
/// coarse tail up to the large-object threshold. Thirty classes in total.
pub const DEFAULT_CHUNK_SIZES: [u64; 30] = [
    0x20, 0x40, 0x60, 0x80, 0xA0, 0xC0, 0xE0, 0x100, //
    0x200, 0x300, 0x400, 0x500, 0x600, 0x700, 0x800, 0x900, 0xA00, 0xB00, 0xC00, 0xD00, 0xE00,
    0xF00, 0x1000, //
    0x2000, 0x3000, 0x4000, 0x6000, 0x8000, 0xC000, 0x10000,
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LayoutError {
    #[error("all {POOLS_PER_REGION} pools of region {region} are open")]
    RegionFull { region: u8 },
    #[error("no room for a {size:#x}-byte reservation in region {region}")]
    PlacementExhausted { region: u8, size: u64 },
    #[error("invalid size-class table: {0}")]
    InvalidClassTable(String),
}

/// One chunk size and the region that serves it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SizeClass {
    index: u8,
    chunk_size: u64,
}

impl SizeClass {
    pub fn index(&self) -> usize {
        self.index as usize
    }

    pub fn chunk_size(&self) -> u64 {
        self.chunk_size
    }

    pub fn cluster_size(&self) -> u64 {
        CHUNKS_PER_CLUSTER as u64 * self.chunk_size
    }

    /// Class `i` lives in region `i + 1`; region 0 stays unused.
    pub fn region_id(&self) -> u8 {
        self.index + 1
    }
}

/// Result of routing a request size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizeLookup {
    Class(SizeClass),
    /// Page-rounded length of a large object.
    LargeObject(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeClassTable {
    classes: Vec<SizeClass>,
}

impl Default for SizeClassTable {
    fn default() -> Self {
        Self::from_chunk_sizes(&DEFAULT_CHUNK_SIZES).expect("default table is valid")
    }
}

impl SizeClassTable {
    pub fn from_chunk_sizes(sizes: &[u64]) -> Result<Self, LayoutError> {
        let bad = |msg: String| Err(LayoutError::InvalidClassTable(msg));
        if sizes.is_empty() {
            return bad("no classes".into());
        }
        // Region ids 1..=len for classes plus one large-object region.
        if sizes.len() > 253 {
            return bad(format!("{} classes exceed the region id space", sizes.len()));
        }
        for (i, &s) in sizes.iter().enumerate() {
            if s == 0 || s % 0x10 != 0 {
                return bad(format!("chunk size {s:#x} is not a positive multiple of 0x10"));
            }
            if s > LARGE_OBJECT_THRESHOLD {
                return bad(format!("chunk size {s:#x} exceeds the large-object threshold"));
            }
            if i > 0 && s <= sizes[i - 1] {
                return bad("chunk sizes must be strictly increasing".into());
            }
        }
        let classes = sizes
            .iter()
            .enumerate()
            .map(|(i, &chunk_size)| SizeClass {
                index: i as u8,
                chunk_size,
            })
            .collect();
        Ok(SizeClassTable { classes })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn classes(&self) -> &[SizeClass] {
        &self.classes
    }

    pub fn get(&self, index: usize) -> Option<SizeClass> {
        self.classes.get(index).copied()
    }

    pub fn by_region(&self, region_id: u8) -> Option<SizeClass> {
        region_id
            .checked_sub(1)
            .and_then(|i| self.classes.get(i as usize).copied())
    }

    /// Region reserved for objects above the largest class.
    pub fn large_region_id(&self) -> u8 {
        self.classes.len() as u8 + 1
    }

    /// Smallest class that fits `request`. Zero-byte requests get the
    /// smallest class.
    pub fn lookup(&self, request: u64) -> SizeLookup {
        let largest = self.classes.last().expect("table is non-empty");
        if request > largest.chunk_size {
            return SizeLookup::LargeObject(request.div_ceil(PAGE_SIZE) * PAGE_SIZE);
        }
        let i = self.classes.partition_point(|c| c.chunk_size < request);
        SizeLookup::Class(self.classes[i])
    }
}

/// Routes `request` through the default class table.
pub fn size_class_of(request: u64) -> SizeLookup {
    thread_local! {
        static TABLE: SizeClassTable = SizeClassTable::default();
    }
    TABLE.with(|t| t.lookup(request))
}

/// `(PTR >> 40) & 0xFF`, ignoring the tag byte.
pub fn region_of(addr: TaggedAddress) -> u8 {
    ((addr.untag() >> REGION_SHIFT) & 0xFF) as u8
}

pub fn region_base(region_id: u8) -> u64 {
    (region_id as u64) << REGION_SHIFT
}

/// A 1GB window inside a region.
#[derive(Debug, Clone)]
pub struct PoolState {
    base: u64,
    cap: u64,
    used_bytes: u64,
    /// start → length of every reservation made in this pool
    reservations: BTreeMap<u64, u64>,
}

impl PoolState {
    fn new(base: u64, density: u32) -> Self {
        PoolState {
            base,
            cap: POOL_SIZE / density as u64,
            used_bytes: 0,
            reservations: BTreeMap::new(),
        }
    }

    pub fn base(&self) -> u64 {
        self.base
    }

    pub fn used_bytes(&self) -> u64 {
        self.used_bytes
    }

    /// `floor(1GB / d)`.
    pub fn cap(&self) -> u64 {
        self.cap
    }

    pub fn contains(&self, addr: u64) -> bool {
        (self.base..self.base + POOL_SIZE).contains(&addr)
    }

    pub fn reservations(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.reservations.iter().map(|(&b, &l)| (b, l))
    }

    fn admits(&self, len: u64) -> bool {
        self.used_bytes + len <= self.cap
    }

    fn overlaps(&self, start: u64, len: u64) -> bool {
        let end = start + len;
        matches!(self.reservations.range(..end).next_back(), Some((&s, &l)) if s + l > start)
    }

    /// Rejection-samples a page-aligned offset for `len` bytes.
    fn try_place<R: Rng + ?Sized>(&mut self, len: u64, rng: &mut R) -> Option<u64> {
        if !self.admits(len) || len > POOL_SIZE {
            return None;
        }
        let slots = (POOL_SIZE - len) / PAGE_SIZE + 1;
        for _ in 0..PLACEMENT_RETRIES {
            let start = self.base + rng.gen_range(0..slots) * PAGE_SIZE;
            if !self.overlaps(start, len) {
                self.reservations.insert(start, len);
                self.used_bytes += len;
                return Some(start);
            }
        }
        None
    }

    fn remove(&mut self, start: u64) -> Option<u64> {
        let len = self.reservations.remove(&start)?;
        self.used_bytes -= len;
        Some(len)
    }
}

/// Where a new cluster went.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    /// Start of the cluster, which is also the start of its reservation.
    pub base: u64,
    /// Bytes reserved in the pool (twice the cluster size).
    pub reserved: u64,
    pub pool: usize,
}

/// Pool bookkeeping for one size-class region.
#[derive(Debug, Clone)]
pub struct RegionState {
    region_id: u8,
    size_class: SizeClass,
    density: u32,
    pools: Vec<PoolState>,
    unopened: Vec<u16>,
}

impl RegionState {
    pub fn new(size_class: SizeClass, density: u32) -> Self {
        assert!(density >= 1, "density must be at least 1");
        RegionState {
            region_id: size_class.region_id(),
            size_class,
            density,
            pools: Vec::new(),
            unopened: (0..POOLS_PER_REGION as u16).collect(),
        }
    }

    pub fn region_id(&self) -> u8 {
        self.region_id
    }

    pub fn size_class(&self) -> SizeClass {
        self.size_class
    }

    pub fn base(&self) -> u64 {
        region_base(self.region_id)
    }

    pub fn pools(&self) -> &[PoolState] {
        &self.pools
    }

    pub fn pool_of(&self, addr: u64) -> Option<usize> {
        self.pools.iter().position(|p| p.contains(addr))
    }

    /// Opens a uniformly random unopened 1GB slot.
    pub fn open_new_pool<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<usize, LayoutError> {
        if self.unopened.is_empty() {
            return Err(LayoutError::RegionFull {
                region: self.region_id,
            });
        }
        let pick = rng.gen_range(0..self.unopened.len());
        let slot = self.unopened.swap_remove(pick);
        let base = self.base() + slot as u64 * POOL_SIZE;
        self.pools.push(PoolState::new(base, self.density));
        Ok(self.pools.len() - 1)
    }

    /// Reserves `2 × cluster_size` at a random spot in a pool whose density
    /// cap admits it, opening pools as needed.
    pub fn place_new_cluster<R: Rng + ?Sized>(
        &mut self,
        rng: &mut R,
    ) -> Result<Placement, LayoutError> {
        let reserved = 2 * self.size_class.cluster_size();
        let exhausted = LayoutError::PlacementExhausted {
            region: self.region_id,
            size: reserved,
        };
        if reserved > POOL_SIZE / self.density as u64 {
            return Err(exhausted);
        }
        let mut order: Vec<usize> = (0..self.pools.len())
            .filter(|&i| self.pools[i].admits(reserved))
            .collect();
        order.shuffle(rng);
        for i in order {
            if let Some(base) = self.pools[i].try_place(reserved, rng) {
                return Ok(Placement { base, reserved, pool: i });
            }
        }
        let i = self.open_new_pool(rng).map_err(|_| exhausted.clone())?;
        self.pools[i]
            .try_place(reserved, rng)
            .map(|base| Placement { base, reserved, pool: i })
            .ok_or(exhausted)
    }

    /// Returns a cluster's reservation to its pool.
    pub fn release_cluster(&mut self, placement: &Placement) -> bool {
        self.pools
            .get_mut(placement.pool)
            .and_then(|p| p.remove(placement.base))
            .is_some()
    }
}

/// Large objects: page-rounded reservations at uniformly random page-aligned
/// spots of a dedicated region.
#[derive(Debug, Clone)]
pub struct LargeObjectRegion {
    region_id: u8,
    reservations: BTreeMap<u64, u64>,
}

impl LargeObjectRegion {
    pub fn new(region_id: u8) -> Self {
        LargeObjectRegion {
            region_id,
            reservations: BTreeMap::new(),
        }
    }

    pub fn region_id(&self) -> u8 {
        self.region_id
    }

    pub fn len_at(&self, base: u64) -> Option<u64> {
        self.reservations.get(&base).copied()
    }

    pub fn live(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.reservations.iter().map(|(&b, &l)| (b, l))
    }

    pub fn place<R: Rng + ?Sized>(&mut self, len: u64, rng: &mut R) -> Result<u64, LayoutError> {
        let exhausted = LayoutError::PlacementExhausted {
            region: self.region_id,
            size: len,
        };
        if len == 0 || !len.is_multiple_of(PAGE_SIZE) || len > REGION_SIZE {
            return Err(exhausted);
        }
        let slots = (REGION_SIZE - len) / PAGE_SIZE + 1;
        let base = region_base(self.region_id);
        for _ in 0..PLACEMENT_RETRIES {
            let start = base + rng.gen_range(0..slots) * PAGE_SIZE;
            let clash = matches!(
                self.reservations.range(..start + len).next_back(),
                Some((&s, &l)) if s + l > start
            );
            if !clash {
                self.reservations.insert(start, len);
                return Ok(start);
            }
        }
        Err(exhausted)
    }

    pub fn remove(&mut self, base: u64) -> Option<u64> {
        self.reservations.remove(&base)
    }
}
