//! Monte Carlo estimate of same-slot tag reuse distances.
//!
//! Each round a uniformly sized random subset of a cluster's slots is
//! freed and re-tagged, either by independent random draws or by one
//! circular shift of the quarantine-plus-freed ring. Every time a slot
//! receives a tag it held before, the gap in rounds is a sample.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DistanceMultiset, DistanceStats, DistanceUnit};
use crate::address::Tag;
use crate::tags::{initial_assignment, rotate_ring};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemporalStrategy {
    CircularShift,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonteCarloConfig {
    /// Slots of the cluster in the random arm, every tag value usable.
    pub random_slots: usize,
    /// Tagged slots in the circular-shift arm.
    pub allocatable: usize,
    pub quarantine: usize,
    /// Upper bound on slots re-tagged per round.
    pub max_selected: usize,
    pub rounds: u64,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        MonteCarloConfig {
            random_slots: 256,
            allocatable: 239,
            quarantine: 16,
            max_selected: 240,
            rounds: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonteCarloResult {
    pub strategy: TemporalStrategy,
    pub samples: DistanceMultiset,
    pub stats: DistanceStats,
}

struct Recorder {
    /// `last[slot * 256 + tag]`: round the slot last received the tag.
    last: Vec<u64>,
    hist: Vec<u64>,
}

impl Recorder {
    fn new(slots: usize) -> Self {
        Recorder {
            last: vec![u64::MAX; slots * 256],
            hist: Vec::new(),
        }
    }

    fn assign(&mut self, slot: usize, tag: Tag, round: u64) {
        let cell = &mut self.last[slot * 256 + tag as usize];
        if *cell != u64::MAX {
            let gap = (round - *cell) as usize;
            if gap >= self.hist.len() {
                self.hist.resize(gap + 1, 0);
            }
            self.hist[gap] += 1;
        }
        *cell = round;
    }
}

pub fn monte_carlo_temporal<R: Rng + ?Sized>(
    strategy: TemporalStrategy,
    config: &MonteCarloConfig,
    rng: &mut R,
) -> MonteCarloResult {
    let hist = match strategy {
        TemporalStrategy::Random => random_arm(config, rng),
        TemporalStrategy::CircularShift => shift_arm(config, rng),
    };
    let samples = DistanceMultiset::from_histogram(DistanceUnit::Round, &hist);
    let stats = samples.stats();
    MonteCarloResult {
        strategy,
        samples,
        stats,
    }
}

fn random_arm<R: Rng + ?Sized>(config: &MonteCarloConfig, rng: &mut R) -> Vec<u64> {
    let n = config.random_slots;
    assert!(n >= 1, "need at least one slot");
    let k_max = config.max_selected.clamp(1, n);
    let mut rec = Recorder::new(n);
    for s in 0..n {
        rec.assign(s, rng.gen(), 0);
    }
    for round in 1..=config.rounds {
        let k = rng.gen_range(1..=k_max);
        for s in sample(rng, n, k) {
            rec.assign(s, rng.gen(), round);
        }
    }
    rec.hist
}

fn shift_arm<R: Rng + ?Sized>(config: &MonteCarloConfig, rng: &mut R) -> Vec<u64> {
    let n = config.allocatable;
    let q = config.quarantine;
    assert!(n >= 1 && q >= 1, "need at least one slot and one quarantine tag");
    let k_max = config.max_selected.clamp(1, n);
    let (mut slot_tags, mut quarantine) = initial_assignment(n, q, rng);
    let mut rec = Recorder::new(n);
    for (s, &t) in slot_tags.iter().enumerate() {
        rec.assign(s, t, 0);
    }
    let mut ring: Vec<Tag> = Vec::with_capacity(n + q);
    for round in 1..=config.rounds {
        let k = rng.gen_range(1..=k_max);
        let mut selected = sample(rng, n, k).into_vec();
        selected.sort_unstable();
        ring.clear();
        ring.extend_from_slice(&quarantine);
        ring.extend(selected.iter().map(|&s| slot_tags[s]));
        rotate_ring(&mut ring);
        quarantine.copy_from_slice(&ring[..q]);
        for (&s, &t) in selected.iter().zip(&ring[q..]) {
            slot_tags[s] = t;
            rec.assign(s, t, round);
        }
    }
    rec.hist
}
