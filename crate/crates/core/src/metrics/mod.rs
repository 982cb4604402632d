//! Collision metrics: distance multisets, objectives, entropy bounds and the
//! temporal Monte Carlo.

mod distances;
mod entropy;
mod montecarlo;

pub use distances::{
    objectives, spatial_distances, temporal_distances, DistanceMultiset, DistanceStats,
    DistanceUnit, MetricsError, ObjectiveReport, SlotTagHistory, SnapshotView,
};
pub use entropy::{cluster_spatial_model, geometric_entropy, triangular_entropy, ModelReport};
pub use montecarlo::{monte_carlo_temporal, MonteCarloConfig, MonteCarloResult, TemporalStrategy};
