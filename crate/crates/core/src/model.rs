//! Common surface over ClusterTag and the baseline strategies.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::address::{AccessCheck, AddressError, TaggedAddress};
use crate::alloc::cluster::InvariantViolation;
use crate::alloc::ClusterTagAllocator;
use crate::baseline::{BaselineAllocator, StrategyKind};
use crate::config::{ConfigError, RunConfig};
use crate::layout::LayoutError;
use crate::metrics::SlotTagHistory;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AllocError {
    #[error("double free of {0}")]
    DoubleFree(TaggedAddress),
    #[error("invalid free of {0}")]
    InvalidFree(TaggedAddress),
    #[error("tag mismatch freeing {addr}: key {key:#04x}, lock {lock:#04x}")]
    TagMismatch {
        addr: TaggedAddress,
        key: u8,
        lock: u8,
    },
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Address(#[from] AddressError),
}

/// A live chunk as seen by a snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LiveChunk {
    pub addr: TaggedAddress,
    /// Distance between neighbouring chunks of the same class.
    pub stride: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelStats {
    pub live_chunks: u64,
    pub resident_pages: u64,
    pub clusters_placed: u64,
    pub clusters_released: u64,
    pub pages_released: u64,
    pub allocation_rounds: u64,
}

/// Which allocator a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    #[serde(rename = "clustertag")]
    ClusterTag,
    Random,
    RandomHeader,
    Staggered,
    FixedTemporal,
    Sticky,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::ClusterTag,
        ModelKind::Random,
        ModelKind::RandomHeader,
        ModelKind::Staggered,
        ModelKind::FixedTemporal,
        ModelKind::Sticky,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::ClusterTag => "clustertag",
            ModelKind::Random => "random",
            ModelKind::RandomHeader => "random-header",
            ModelKind::Staggered => "staggered",
            ModelKind::FixedTemporal => "fixed-temporal",
            ModelKind::Sticky => "sticky",
        }
    }

    pub fn parse(name: &str) -> Option<ModelKind> {
        ModelKind::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn strategy(self) -> Option<StrategyKind> {
        match self {
            ModelKind::ClusterTag => None,
            ModelKind::Random => Some(StrategyKind::Random),
            ModelKind::RandomHeader => Some(StrategyKind::RandomWithHeader),
            ModelKind::Staggered => Some(StrategyKind::Staggered),
            ModelKind::FixedTemporal => Some(StrategyKind::FixedTemporal),
            ModelKind::Sticky => Some(StrategyKind::StickySpatial),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub trait AllocatorModel {
    fn kind(&self) -> ModelKind;

    fn allocate(&mut self, size: u64) -> Result<TaggedAddress, AllocError>;

    fn deallocate(&mut self, addr: TaggedAddress) -> Result<(), AllocError>;

    fn check_access(&self, addr: TaggedAddress, len: u64) -> AccessCheck;

    /// Bytes between neighbouring chunks serving `size`-byte requests.
    fn stride(&self, size: u64) -> u64;

    /// Reuse rounds undergone by the memory at `addr` so far: cluster
    /// rotations for ClusterTag, slot reallocations for the baselines.
    /// `None` once the memory is no longer managed.
    fn reuse_rounds(&self, addr: TaggedAddress) -> Option<u64>;

    /// Chunks re-tagged and waiting in a cache for `size`-byte requests.
    fn cached_chunks(&self, _size: u64) -> usize {
        0
    }

    fn live_chunks(&self) -> Vec<LiveChunk>;

    /// Chunks whose memory currently carries a lock tag. Strategies that
    /// keep freed memory tagged report freed slots as well.
    fn tagged_chunks(&self) -> Vec<LiveChunk> {
        self.live_chunks()
    }

    fn history(&self) -> Option<&SlotTagHistory>;

    fn stats(&self) -> ModelStats;

    fn check_invariants(&self) -> Result<(), InvariantViolation> {
        Ok(())
    }
}

/// Builds the model selected by `kind` with parameters from `config`.
pub fn build_model(
    kind: ModelKind,
    config: &RunConfig,
    seed: u64,
) -> Result<Box<dyn AllocatorModel + Send>, ConfigError> {
    Ok(match kind.strategy() {
        None => Box::new(ClusterTagAllocator::new(config.clustertag()?, seed)),
        Some(strategy) => Box::new(BaselineAllocator::new(
            strategy,
            config.baseline()?,
            seed,
        )),
    })
}
