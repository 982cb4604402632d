//! Closed-form entropy bounds for cluster layouts.

use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::layout::CHUNKS_PER_CLUSTER;

/// Entropy, in bits, of a geometric distribution with success probability
/// `p` on `{1, 2, ...}`.
pub fn geometric_entropy(p: f64) -> Result<f64, MetricsError> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(MetricsError::DomainError(p));
    }
    if p == 1.0 {
        return Ok(0.0);
    }
    let q = 1.0 - p;
    Ok((-q * q.log2() - p * p.log2()) / p)
}

/// Entropy, in bits, of `Z2 - Z1` for independent uniform `Z1, Z2` on
/// `0..n`.
pub fn triangular_entropy(n: u64) -> f64 {
    assert!(n >= 2, "need at least two slots");
    let nf = n as f64;
    let n2 = nf * nf;
    // k = 0 once, each |k| in 1..n twice.
    let term = |w: f64| {
        let p = w / n2;
        -p * p.log2()
    };
    term(nf) + (1..n).map(|k| 2.0 * term((n - k) as f64)).sum::<f64>()
}

/// Analytic collision-distance profile of a cluster layout, in chunk units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub min_chunks: u64,
    pub avg_chunks: u64,
    pub entropy_bound_bits: f64,
}

/// Nearest same-tag chunk sits one cluster away plus a geometric number of
/// clusters with success `1/d`, offset by the slot difference.
pub fn cluster_spatial_model(density: u32) -> ModelReport {
    assert!(density >= 1, "density must be at least 1");
    let slots = CHUNKS_PER_CLUSTER as u64;
    let geometric = geometric_entropy(1.0 / density as f64).expect("1/d lies in (0, 1]");
    ModelReport {
        min_chunks: slots,
        avg_chunks: slots * density as u64,
        entropy_bound_bits: triangular_entropy(slots) + geometric,
    }
}
