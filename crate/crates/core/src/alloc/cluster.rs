//! Per-cluster slot metadata kept in the cluster header.

use std::fmt;

use crate::address::Tag;
use crate::layout::{Placement, SizeClass, CHUNKS_PER_CLUSTER};

/// Index of a cluster inside its allocator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClusterId(pub(crate) u32);

impl ClusterId {
    pub fn new(index: u32) -> Self {
        ClusterId(index)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// State of one of the 256 slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotStatus {
    /// Occupied by the cluster header; locked with tag 0.
    Info,
    /// Free, carrying the tag it will be re-tagged from.
    Freed(Tag),
    /// Free and parked in the cache array, already re-tagged.
    Cached(Tag),
    InUse(Tag),
}

impl SlotStatus {
    pub fn tag(&self) -> Option<Tag> {
        match *self {
            SlotStatus::Info => None,
            SlotStatus::Freed(t) | SlotStatus::Cached(t) | SlotStatus::InUse(t) => Some(t),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InvariantViolation(pub String);

impl fmt::Display for InvariantViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InvariantViolation {}

#[derive(Debug, Clone)]
pub struct ClusterState {
    pub(crate) id: ClusterId,
    pub(crate) base: u64,
    pub(crate) size_class: SizeClass,
    pub(crate) placement: Placement,
    pub(crate) slots: Vec<SlotStatus>,
    pub(crate) quarantine: Vec<Tag>,
    pub(crate) reuse_rounds: u64,
    pub(crate) info_slots: usize,
    pub(crate) freed: usize,
    pub(crate) cached: usize,
    pub(crate) in_use: usize,
    // cluster chain links
    pub(crate) prev: Option<ClusterId>,
    pub(crate) next: Option<ClusterId>,
    /// Position in the region's idle list while `freed > 0`.
    pub(crate) idle_pos: Option<usize>,
}

impl ClusterState {
    /// A cluster with every allocatable slot unassigned. `init_cluster_tags`
    /// gives the slots their first tags.
    pub fn new(
        id: ClusterId,
        size_class: SizeClass,
        placement: Placement,
        allocatable: usize,
    ) -> Self {
        assert!((1..CHUNKS_PER_CLUSTER).contains(&allocatable));
        let info_slots = CHUNKS_PER_CLUSTER - allocatable;
        let mut slots = vec![SlotStatus::Info; CHUNKS_PER_CLUSTER];
        for s in &mut slots[info_slots..] {
            *s = SlotStatus::Freed(0);
        }
        ClusterState {
            id,
            base: placement.base,
            size_class,
            placement,
            slots,
            quarantine: Vec::new(),
            reuse_rounds: 0,
            info_slots,
            freed: allocatable,
            cached: 0,
            in_use: 0,
            prev: None,
            next: None,
            idle_pos: None,
        }
    }

    pub fn id(&self) -> ClusterId {
        self.id
    }

    pub fn base(&self) -> u64 {
        self.base
    }

    pub fn size_class(&self) -> SizeClass {
        self.size_class
    }

    pub fn chunk_size(&self) -> u64 {
        self.size_class.chunk_size()
    }

    pub fn end(&self) -> u64 {
        self.base + self.size_class.cluster_size()
    }

    pub fn slots(&self) -> &[SlotStatus] {
        &self.slots
    }

    pub fn slot(&self, index: usize) -> SlotStatus {
        self.slots[index]
    }

    pub fn quarantine(&self) -> &[Tag] {
        &self.quarantine
    }

    pub fn reuse_rounds(&self) -> u64 {
        self.reuse_rounds
    }

    pub fn info_slots(&self) -> usize {
        self.info_slots
    }

    pub fn allocatable(&self) -> usize {
        CHUNKS_PER_CLUSTER - self.info_slots
    }

    pub fn freed_count(&self) -> usize {
        self.freed
    }

    pub fn cached_count(&self) -> usize {
        self.cached
    }

    pub fn in_use_count(&self) -> usize {
        self.in_use
    }

    /// Every allocatable slot is Freed and none is parked in a cache.
    pub fn is_fully_free(&self) -> bool {
        self.freed == self.allocatable()
    }

    pub fn chunk_addr(&self, slot: usize) -> u64 {
        self.base + slot as u64 * self.chunk_size()
    }

    /// Slot whose chunk starts exactly at `addr`.
    pub fn slot_at(&self, addr: u64) -> Option<usize> {
        if addr < self.base || addr >= self.end() {
            return None;
        }
        let off = addr - self.base;
        off.is_multiple_of(self.chunk_size()).then(|| (off / self.chunk_size()) as usize)
    }

    /// Overwrites a slot's status, keeping the per-state counts in step.
    pub fn set_slot(&mut self, index: usize, status: SlotStatus) {
        let count = |s: &SlotStatus| match s {
            SlotStatus::Freed(_) => (1, 0, 0),
            SlotStatus::Cached(_) => (0, 1, 0),
            SlotStatus::InUse(_) => (0, 0, 1),
            SlotStatus::Info => (0, 0, 0),
        };
        let (f0, c0, u0) = count(&self.slots[index]);
        let (f1, c1, u1) = count(&status);
        self.freed = self.freed + f1 - f0;
        self.cached = self.cached + c1 - c0;
        self.in_use = self.in_use + u1 - u0;
        self.slots[index] = status;
    }

    /// Slots currently Freed, ascending.
    pub fn freed_slots(&self) -> impl Iterator<Item = usize> + '_ {
        self.slots
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s, SlotStatus::Freed(_)))
            .map(|(i, _)| i)
    }

    /// No tag appears twice across slots and quarantine, and tag 0 is never
    /// handed to a slot or the quarantine.
    pub fn check_unique(&self) -> Result<(), InvariantViolation> {
        let mut seen = [false; 256];
        let tags = self
            .slots
            .iter()
            .filter_map(SlotStatus::tag)
            .chain(self.quarantine.iter().copied());
        for t in tags {
            if t == 0 {
                return Err(InvariantViolation(format!(
                    "cluster {:#x} holds reserved tag 0 outside its header",
                    self.base
                )));
            }
            if std::mem::replace(&mut seen[t as usize], true) {
                return Err(InvariantViolation(format!(
                    "cluster {:#x} holds tag {t:#04x} twice",
                    self.base
                )));
            }
        }
        Ok(())
    }
}
