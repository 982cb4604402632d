//! Collision-distance multisets and the three objectives over them.

use std::collections::{BTreeMap, HashMap};
use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::address::Tag;
use crate::layout::region_of;
use crate::model::LiveChunk;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceUnit {
    Chunk,
    Byte,
    Round,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("objectives need at least one distance")]
    EmptyMultiset,
    #[error("probability {0} outside (0, 1]")]
    DomainError(f64),
}

/// Distance → occurrence count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistanceMultiset {
    unit: DistanceUnit,
    counts: BTreeMap<u64, u64>,
    total: u64,
}

impl DistanceMultiset {
    pub fn new(unit: DistanceUnit) -> Self {
        DistanceMultiset {
            unit,
            counts: BTreeMap::new(),
            total: 0,
        }
    }

    /// From a dense histogram where `hist[d]` counts distance `d`.
    pub fn from_histogram(unit: DistanceUnit, hist: &[u64]) -> Self {
        let mut m = Self::new(unit);
        for (d, &n) in hist.iter().enumerate() {
            m.insert_n(d as u64, n);
        }
        m
    }

    pub fn unit(&self) -> DistanceUnit {
        self.unit
    }

    pub fn insert(&mut self, distance: u64) {
        self.insert_n(distance, 1);
    }

    pub fn insert_n(&mut self, distance: u64, n: u64) {
        if n > 0 {
            *self.counts.entry(distance).or_insert(0) += n;
            self.total += n;
        }
    }

    /// Multiset sum.
    pub fn merge(&mut self, other: &DistanceMultiset) {
        for (&d, &n) in &other.counts {
            self.insert_n(d, n);
        }
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn count(&self, distance: u64) -> u64 {
        self.counts.get(&distance).copied().unwrap_or(0)
    }

    /// `(distance, count)` pairs in ascending distance order.
    pub fn iter(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.counts.iter().map(|(&d, &n)| (d, n))
    }

    pub fn min(&self) -> Option<u64> {
        self.counts.keys().next().copied()
    }

    pub fn max(&self) -> Option<u64> {
        self.counts.keys().next_back().copied()
    }

    pub fn mean(&self) -> Option<f64> {
        if self.total == 0 {
            return None;
        }
        let sum: f64 = self.iter().map(|(d, n)| d as f64 * n as f64).sum();
        Some(sum / self.total as f64)
    }

    /// Nearest-rank percentile: the smallest distance whose cumulative share
    /// reaches `q`.
    pub fn percentile(&self, q: f64) -> Option<u64> {
        if self.total == 0 {
            return None;
        }
        let rank = ((q * self.total as f64).ceil() as u64).clamp(1, self.total);
        let mut seen = 0;
        for (d, n) in self.iter() {
            seen += n;
            if seen >= rank {
                return Some(d);
            }
        }
        self.max()
    }

    /// Shannon entropy, in bits, of `count / total`.
    pub fn entropy_bits(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        let total = self.total as f64;
        self.counts
            .values()
            .map(|&n| {
                let p = n as f64 / total;
                p * (1.0 / p).log2()
            })
            .sum()
    }

    pub fn stats(&self) -> DistanceStats {
        DistanceStats {
            min: self.min(),
            avg: self.mean(),
            p25: self.percentile(0.25),
            entropy_bits: self.entropy_bits(),
            samples: self.total,
        }
    }

    /// `distance,count` rows, ascending.
    pub fn write_csv<W: io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["distance", "count"])?;
        for (d, n) in self.iter() {
            w.write_record([d.to_string(), n.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Summary emitted next to a histogram. Fields are null for an empty set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceStats {
    pub min: Option<u64>,
    pub avg: Option<f64>,
    pub p25: Option<u64>,
    pub entropy_bits: f64,
    pub samples: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveReport {
    /// Smallest collision distance.
    pub f1_min: u64,
    /// Mean collision distance.
    pub f2_avg: f64,
    /// Entropy of the distance distribution, in bits.
    pub f3_entropy: f64,
}

pub fn objectives(dist: &DistanceMultiset) -> Result<ObjectiveReport, MetricsError> {
    match (dist.min(), dist.mean()) {
        (Some(min), Some(avg)) => Ok(ObjectiveReport {
            f1_min: min,
            f2_avg: avg,
            f3_entropy: dist.entropy_bits(),
        }),
        _ => Err(MetricsError::EmptyMultiset),
    }
}

/// Live chunk positions per `(group, tag)` at one instant.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SnapshotView {
    lists: BTreeMap<(u32, Tag), Vec<u64>>,
}

impl SnapshotView {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds per-tag lists, sorting positions.
    pub fn from_positions<I: IntoIterator<Item = (u32, Tag, u64)>>(items: I) -> Self {
        let mut view = Self::new();
        for (group, tag, pos) in items {
            view.lists.entry((group, tag)).or_default().push(pos);
        }
        for list in view.lists.values_mut() {
            list.sort_unstable();
        }
        view
    }

    /// Groups chunks by region and tag; positions are in stride units.
    pub fn from_chunks(chunks: &[LiveChunk]) -> Self {
        Self::from_positions(chunks.iter().map(|c| {
            (
                region_of(c.addr) as u32,
                c.addr.tag(),
                c.addr.untag() / c.stride,
            )
        }))
    }

    /// Appends a position; it must exceed every position already listed
    /// for the same group and tag.
    pub fn push(&mut self, group: u32, tag: Tag, pos: u64) {
        let list = self.lists.entry((group, tag)).or_default();
        assert!(
            list.last().is_none_or(|&last| pos > last),
            "positions must be strictly increasing"
        );
        list.push(pos);
    }

    pub fn lists(&self) -> impl Iterator<Item = ((u32, Tag), &[u64])> {
        self.lists.iter().map(|(&k, v)| (k, v.as_slice()))
    }

    pub fn chunks(&self) -> usize {
        self.lists.values().map(Vec::len).sum()
    }
}

/// Per-position, per-tag assignment rounds.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SlotTagHistory {
    lists: HashMap<(u64, Tag), Vec<u64>>,
    events: u64,
}

impl SlotTagHistory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records that `position` received `tag` at `round`. Rounds for one
    /// (position, tag) must be strictly increasing.
    pub fn record(&mut self, position: u64, tag: Tag, round: u64) {
        let list = self.lists.entry((position, tag)).or_default();
        assert!(
            list.last().is_none_or(|&last| round > last),
            "rounds must be strictly increasing"
        );
        list.push(round);
        self.events += 1;
    }

    pub fn events(&self) -> u64 {
        self.events
    }

    pub fn lists(&self) -> impl Iterator<Item = ((u64, Tag), &[u64])> {
        self.lists.iter().map(|(&k, v)| (k, v.as_slice()))
    }
}

fn adjacent_gaps<'a, I: Iterator<Item = &'a [u64]>>(lists: I, unit: DistanceUnit) -> DistanceMultiset {
    let mut out = DistanceMultiset::new(unit);
    for list in lists {
        for w in list.windows(2) {
            out.insert(w[1] - w[0]);
        }
    }
    out
}

/// Gaps between neighbouring same-tag positions, summed over tags.
pub fn spatial_distances(snapshot: &SnapshotView) -> DistanceMultiset {
    adjacent_gaps(snapshot.lists.values().map(Vec::as_slice), DistanceUnit::Chunk)
}

/// Gaps between successive rounds a position received the same tag.
pub fn temporal_distances(history: &SlotTagHistory) -> DistanceMultiset {
    adjacent_gaps(history.lists.values().map(Vec::as_slice), DistanceUnit::Round)
}
