//! Simulation of a cluster-based tagged-memory allocator, reference tag
//! strategies, and the collision metrics used to compare them.
//!
//! Every model runs on an abstract 56-bit address space with a 16-byte
//! granule shadow map; nothing touches real memory.

pub mod address;
pub mod alloc;
pub mod baseline;
pub mod cli;
pub mod config;
pub mod detect;
pub mod layout;
pub mod metrics;
pub mod model;
pub mod tags;
pub mod trace;

/// Generator behind every random decision; runs are reproducible from the
/// seed.
pub type SimRng = rand_chacha::ChaCha8Rng;

pub use address::{AccessCheck, Tag, TaggedAddress};
pub use alloc::{ClusterTagAllocator, ClusterTagConfig};
pub use baseline::{BaselineAllocator, BaselineConfig, StrategyKind};
pub use config::{ConfigError, RunConfig};
pub use model::{build_model, AllocError, AllocatorModel, ModelKind};
