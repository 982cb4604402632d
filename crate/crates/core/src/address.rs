//! Simulated 64-bit tagged address space.
//!
//! Three pieces live here and are shared by every allocator model:
//!
//! - [`TaggedAddress`], the pointer codec. The key tag sits in bits 56..64,
//!   the remaining 56 bits locate a byte in the simulated space.
//! - [`AddressSpace`], which tracks page-granular reservations and how many of
//!   their pages are resident. Nothing backs the bytes; only the bookkeeping
//!   that `mmap`/`munmap`/`madvise` would change is modelled.
//! - [`ShadowMap`], the lock store: one tag per 16-byte granule, absent
//!   granules read as tag 0.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A memory tag. Models with narrower tags only use the low bits.
pub type Tag = u8;

pub const TAG_SHIFT: u32 = 56;
pub const LOCATION_MASK: u64 = (1 << TAG_SHIFT) - 1;
pub const PAGE_SIZE: u64 = 4096;
pub const GRANULE_SIZE: u64 = 16;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AddressError {
    #[error("range [{base:#x}, +{size:#x}) overlaps an existing reservation")]
    Overlap { base: u64, size: u64 },
    #[error("range [{base:#x}, +{size:#x}) is not reserved")]
    UnknownRange { base: u64, size: u64 },
    #[error("range [{start:#x}, +{len:#x}) is not aligned to {align:#x}")]
    Alignment { start: u64, len: u64, align: u64 },
}

/// Pointer value carrying a key tag in its top byte.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaggedAddress(u64);

impl TaggedAddress {
    pub const fn new(raw: u64) -> Self {
        TaggedAddress(raw)
    }

    pub const fn from_parts(location: u64, tag: Tag) -> Self {
        TaggedAddress((location & LOCATION_MASK) | ((tag as u64) << TAG_SHIFT))
    }

    pub const fn raw(self) -> u64 {
        self.0
    }

    pub const fn tag(self) -> Tag {
        ((self.0 >> TAG_SHIFT) & 0xFF) as Tag
    }

    /// The location with the tag bits cleared.
    pub const fn untag(self) -> u64 {
        self.0 & LOCATION_MASK
    }

    pub const fn with_tag(self, tag: Tag) -> Self {
        Self::from_parts(self.untag(), tag)
    }

    /// Moves the location by `delta` bytes, keeping the key tag.
    pub const fn offset(self, delta: i64) -> Self {
        Self::from_parts(self.untag().wrapping_add_signed(delta), self.tag())
    }
}

/// Free-function form of [`TaggedAddress::with_tag`].
pub fn tag_with(addr: TaggedAddress, tag: Tag) -> TaggedAddress {
    addr.with_tag(tag)
}

impl fmt::Debug for TaggedAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#018x}", self.0)
    }
}

impl fmt::Display for TaggedAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#018x}", self.0)
    }
}

impl From<u64> for TaggedAddress {
    fn from(raw: u64) -> Self {
        TaggedAddress(raw)
    }
}

/// A page-aligned byte range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PageRange {
    pub base: u64,
    pub size: u64,
}

impl PageRange {
    pub fn new(base: u64, size: u64) -> Self {
        PageRange { base, size }
    }

    pub fn end(&self) -> u64 {
        self.base + self.size
    }

    pub fn pages(&self) -> u64 {
        self.size / PAGE_SIZE
    }

    fn check_aligned(&self) -> Result<(), AddressError> {
        if !self.base.is_multiple_of(PAGE_SIZE) || !self.size.is_multiple_of(PAGE_SIZE) || self.size == 0 {
            return Err(AddressError::Alignment {
                start: self.base,
                len: self.size,
                align: PAGE_SIZE,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Reservation {
    size: u64,
    /// Page indices, relative to the reservation base, that are not resident.
    released: BTreeSet<u64>,
}

impl Reservation {
    fn resident(&self) -> u64 {
        self.size / PAGE_SIZE - self.released.len() as u64
    }
}

/// Page reservations and residency accounting.
#[derive(Debug, Clone, Default)]
pub struct AddressSpace {
    reservations: BTreeMap<u64, Reservation>,
    resident_pages: u64,
}

impl AddressSpace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn resident_pages(&self) -> u64 {
        self.resident_pages
    }

    pub fn reservation_count(&self) -> usize {
        self.reservations.len()
    }

    pub fn reservations(&self) -> impl Iterator<Item = PageRange> + '_ {
        self.reservations
            .iter()
            .map(|(&base, r)| PageRange::new(base, r.size))
    }

    /// The reservation that contains `addr`, if any.
    pub fn reservation_containing(&self, addr: u64) -> Option<PageRange> {
        let (&base, r) = self.reservations.range(..=addr).next_back()?;
        (addr < base + r.size).then(|| PageRange::new(base, r.size))
    }

    pub fn is_resident(&self, addr: u64) -> bool {
        match self.reservations.range(..=addr).next_back() {
            Some((&base, r)) if addr < base + r.size => {
                !r.released.contains(&((addr - base) / PAGE_SIZE))
            }
            _ => false,
        }
    }

    pub fn reserve(&mut self, base: u64, size: u64) -> Result<PageRange, AddressError> {
        let range = PageRange::new(base, size);
        range.check_aligned()?;
        let end = base.checked_add(size).ok_or(AddressError::Overlap { base, size })?;
        if let Some((&prev, r)) = self.reservations.range(..end).next_back() {
            if prev + r.size > base {
                return Err(AddressError::Overlap { base, size });
            }
        }
        self.reservations.insert(
            base,
            Reservation {
                size,
                released: BTreeSet::new(),
            },
        );
        self.resident_pages += range.pages();
        Ok(range)
    }

    /// Releases a whole reservation, or drops residency for a page-aligned
    /// sub-range of one. Returns the number of pages that stopped being
    /// resident.
    pub fn release(&mut self, range: PageRange) -> Result<u64, AddressError> {
        range.check_aligned()?;
        let unknown = AddressError::UnknownRange {
            base: range.base,
            size: range.size,
        };
        let (&base, r) = self
            .reservations
            .range_mut(..=range.base)
            .next_back()
            .ok_or(unknown.clone())?;
        if range.end() > base + r.size {
            return Err(unknown);
        }
        if base == range.base && r.size == range.size {
            let dropped = r.resident();
            self.reservations.remove(&base);
            self.resident_pages -= dropped;
            return Ok(dropped);
        }
        let first = (range.base - base) / PAGE_SIZE;
        let mut dropped = 0;
        for page in first..first + range.pages() {
            if r.released.insert(page) {
                dropped += 1;
            }
        }
        self.resident_pages -= dropped;
        Ok(dropped)
    }

    /// Marks every page overlapping `[start, start + len)` resident again.
    /// Returns how many pages came back.
    pub fn touch(&mut self, start: u64, len: u64) -> Result<u64, AddressError> {
        if len == 0 {
            return Ok(0);
        }
        let unknown = AddressError::UnknownRange { base: start, size: len };
        let (&base, r) = self
            .reservations
            .range_mut(..=start)
            .next_back()
            .ok_or(unknown.clone())?;
        if start + len > base + r.size {
            return Err(unknown);
        }
        if r.released.is_empty() {
            return Ok(0);
        }
        let first = (start - base) / PAGE_SIZE;
        let last = (start + len - 1 - base) / PAGE_SIZE;
        let mut restored = 0;
        for page in first..=last {
            if r.released.remove(&page) {
                restored += 1;
            }
        }
        self.resident_pages += restored;
        Ok(restored)
    }
}

/// Outcome of a key/lock comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AccessCheck {
    Ok,
    Violation { granule: u64, key: Tag, lock: Tag },
}

impl AccessCheck {
    pub fn is_violation(&self) -> bool {
        matches!(self, AccessCheck::Violation { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Run {
    end: u64,
    tag: Tag,
}

/// Sparse granule → lock tag map, stored as disjoint runs of equal tags.
#[derive(Debug, Clone)]
pub struct ShadowMap {
    granule: u64,
    tag_bits: u32,
    runs: BTreeMap<u64, Run>,
}

impl Default for ShadowMap {
    fn default() -> Self {
        Self::new(GRANULE_SIZE, 8)
    }
}

impl ShadowMap {
    pub fn new(granule: u64, tag_bits: u32) -> Self {
        assert!(granule.is_power_of_two(), "granule must be a power of two");
        assert!((1..=8).contains(&tag_bits), "tag width must be 1..=8 bits");
        ShadowMap {
            granule,
            tag_bits,
            runs: BTreeMap::new(),
        }
    }

    pub fn granule_size(&self) -> u64 {
        self.granule
    }

    pub fn tag_bits(&self) -> u32 {
        self.tag_bits
    }

    /// Number of stored runs; untagged memory is not stored.
    pub fn run_count(&self) -> usize {
        self.runs.len()
    }

    pub fn tag_at(&self, granule: u64) -> Tag {
        match self.runs.range(..=granule).next_back() {
            Some((_, run)) if granule < run.end => run.tag,
            _ => 0,
        }
    }

    pub fn tag_of_byte(&self, location: u64) -> Tag {
        self.tag_at(location / self.granule)
    }

    /// Sets every granule in `[start, start + len)` to `tag`.
    pub fn write(&mut self, start: u64, len: u64, tag: Tag) -> Result<(), AddressError> {
        if !start.is_multiple_of(self.granule) || !len.is_multiple_of(self.granule) {
            return Err(AddressError::Alignment {
                start,
                len,
                align: self.granule,
            });
        }
        debug_assert!(
            self.tag_bits == 8 || tag >> self.tag_bits == 0,
            "tag {tag:#x} wider than {} bits",
            self.tag_bits
        );
        if len == 0 {
            return Ok(());
        }
        let lo = start / self.granule;
        let hi = lo + len / self.granule;

        // Trim a run that starts before `lo` and reaches into the range.
        if let Some((&s, &run)) = self.runs.range(..lo).next_back() {
            if run.end > lo {
                self.runs.insert(s, Run { end: lo, tag: run.tag });
                if run.end > hi {
                    self.runs.insert(hi, Run { end: run.end, tag: run.tag });
                }
            }
        }
        let inside: Vec<u64> = self.runs.range(lo..hi).map(|(&s, _)| s).collect();
        for s in inside {
            let run = self.runs.remove(&s).expect("run listed above");
            if run.end > hi {
                self.runs.insert(hi, run);
            }
        }
        if tag != 0 {
            self.runs.insert(lo, Run { end: hi, tag });
        }
        Ok(())
    }

    /// Compares the key of `addr` with the lock of every granule touched by
    /// `[untag(addr), untag(addr) + len)` and reports the first mismatch.
    pub fn check_access(&self, addr: TaggedAddress, len: u64) -> AccessCheck {
        if len == 0 {
            return AccessCheck::Ok;
        }
        let key = addr.tag();
        let loc = addr.untag();
        let first = loc / self.granule;
        let last = (loc + len - 1) / self.granule;
        let mut g = first;
        while g <= last {
            let (lock, run_end) = match self.runs.range(..=g).next_back() {
                Some((_, run)) if g < run.end => (run.tag, run.end),
                _ => {
                    let next = self.runs.range(g..).next().map(|(&s, _)| s);
                    (0, next.unwrap_or(u64::MAX))
                }
            };
            if lock != key {
                return AccessCheck::Violation {
                    granule: g,
                    key,
                    lock,
                };
            }
            g = run_end;
        }
        AccessCheck::Ok
    }
}
