//! JSON Lines allocation traces and their replay.
//!
//! One event per line:
//! `{"op":"malloc","id":1,"size":100}` or `{"op":"free","id":1}`.

use std::collections::HashMap;
use std::io::{self, BufRead};

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::address::TaggedAddress;
use crate::alloc::InvariantViolation;
use crate::layout::{SizeClassTable, SizeLookup};
use crate::metrics::{
    objectives, spatial_distances, temporal_distances, ObjectiveReport, SnapshotView,
};
use crate::model::{AllocError, AllocatorModel, ModelStats};
use crate::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase", deny_unknown_fields)]
pub enum TraceEvent {
    Malloc { id: u64, size: u64 },
    Free { id: u64 },
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {message}")]
    Protocol { line: usize, id: u64, message: String },
    #[error("line {line}: allocator rejected the event: {source}")]
    Alloc { line: usize, source: AllocError },
    #[error("invariant violated: {0}")]
    Invariant(#[from] InvariantViolation),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Where an allocation was served from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Served {
    Class(usize),
    LargeObject,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocRecord {
    pub id: u64,
    pub addr: TaggedAddress,
    pub served: Served,
    /// Allocation sequence number within the replay.
    pub round: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub model: String,
    pub events: u64,
    pub peak_live: u64,
    pub final_live: u64,
    pub stats: ModelStats,
    pub spatial: Option<ObjectiveReport>,
    pub spatial_samples: u64,
    pub temporal: Option<ObjectiveReport>,
    pub temporal_samples: u64,
}

/// Feeds events to a model, tracking caller ids.
pub struct Replayer<'m> {
    model: &'m mut dyn AllocatorModel,
    classes: SizeClassTable,
    live: HashMap<u64, usize>,
    records: Vec<AllocRecord>,
    events: u64,
    peak_live: u64,
}

impl<'m> Replayer<'m> {
    pub fn new(model: &'m mut dyn AllocatorModel) -> Self {
        Replayer {
            model,
            classes: SizeClassTable::default(),
            live: HashMap::new(),
            records: Vec::new(),
            events: 0,
            peak_live: 0,
        }
    }

    /// Append-only log of every allocation made so far.
    pub fn records(&self) -> &[AllocRecord] {
        &self.records
    }

    pub fn model(&self) -> &dyn AllocatorModel {
        self.model
    }

    pub fn live(&self) -> usize {
        self.live.len()
    }

    /// Applies one event; `line` is used for error reporting only.
    pub fn apply(&mut self, event: TraceEvent, line: usize) -> Result<TaggedAddress, TraceError> {
        self.events += 1;
        match event {
            TraceEvent::Malloc { id, size } => {
                if self.live.contains_key(&id) {
                    return Err(TraceError::Protocol {
                        line,
                        id,
                        message: format!("malloc of id {id}, which is still live"),
                    });
                }
                let addr = self
                    .model
                    .allocate(size)
                    .map_err(|source| TraceError::Alloc { line, source })?;
                let served = match self.classes.lookup(size) {
                    SizeLookup::Class(c) => Served::Class(c.index()),
                    SizeLookup::LargeObject(_) => Served::LargeObject,
                };
                self.live.insert(id, self.records.len());
                self.records.push(AllocRecord {
                    id,
                    addr,
                    served,
                    round: self.records.len() as u64 + 1,
                });
                self.peak_live = self.peak_live.max(self.live.len() as u64);
                Ok(addr)
            }
            TraceEvent::Free { id } => {
                let Some(index) = self.live.remove(&id) else {
                    return Err(TraceError::Protocol {
                        line,
                        id,
                        message: format!("free of unknown id {id}"),
                    });
                };
                let addr = self.records[index].addr;
                self.model
                    .deallocate(addr)
                    .map_err(|source| TraceError::Alloc { line, source })?;
                Ok(addr)
            }
        }
    }

    pub fn report(&self) -> ReplayReport {
        let spatial = spatial_distances(&SnapshotView::from_chunks(&self.model.live_chunks()));
        let temporal = self.model.history().map(temporal_distances);
        ReplayReport {
            model: self.model.kind().name().to_string(),
            events: self.events,
            peak_live: self.peak_live,
            final_live: self.live.len() as u64,
            stats: self.model.stats(),
            spatial: objectives(&spatial).ok(),
            spatial_samples: spatial.total(),
            temporal: temporal.as_ref().and_then(|t| objectives(t).ok()),
            temporal_samples: temporal.map_or(0, |t| t.total()),
        }
    }
}

pub fn parse_event(line: &str, number: usize) -> Result<TraceEvent, TraceError> {
    serde_json::from_str(line).map_err(|e| TraceError::Parse {
        line: number,
        message: e.to_string(),
    })
}

/// Replays a whole trace, skipping blank lines, then checks the model's
/// invariants.
pub fn replay<R: BufRead>(
    model: &mut dyn AllocatorModel,
    input: R,
) -> Result<ReplayReport, TraceError> {
    let mut replayer = Replayer::new(model);
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let event = parse_event(&line, i + 1)?;
        replayer.apply(event, i + 1)?;
    }
    replayer.model().check_invariants()?;
    Ok(replayer.report())
}

/// Random well-formed trace: mallocs of log-uniform sizes up to `max_size`
/// interleaved with frees of random live ids.
pub fn synthetic_trace(events: usize, max_size: u64, seed: u64) -> Vec<TraceEvent> {
    let mut rng = SimRng::seed_from_u64(seed);
    let mut live: Vec<u64> = Vec::new();
    let mut next_id = 1;
    let top = (max_size.max(2) as f64).ln();
    (0..events)
        .map(|_| {
            if !live.is_empty() && rng.gen_bool(0.45) {
                let i = rng.gen_range(0..live.len());
                TraceEvent::Free {
                    id: live.swap_remove(i),
                }
            } else {
                let size = rng.gen_range(0.0..=top).exp() as u64;
                live.push(next_id);
                next_id += 1;
                TraceEvent::Malloc {
                    id: next_id - 1,
                    size,
                }
            }
        })
        .collect()
}

pub fn write_trace<W: io::Write>(mut out: W, events: &[TraceEvent]) -> io::Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alloc::{ClusterTagAllocator, ClusterTagConfig};

    fn model() -> ClusterTagAllocator {
        ClusterTagAllocator::new(ClusterTagConfig::default(), 1)
    }

    #[test]
    fn event_format() {
        assert_eq!(
            parse_event(r#"{"op":"malloc","id":1,"size":100}"#, 1).unwrap(),
            TraceEvent::Malloc { id: 1, size: 100 }
        );
        assert_eq!(
            serde_json::to_string(&TraceEvent::Free { id: 3 }).unwrap(),
            r#"{"op":"free","id":3}"#
        );
        assert!(parse_event(r#"{"op":"realloc","id":1}"#, 1).is_err());
    }

    #[test]
    fn malloc_then_free() {
        let mut m = model();
        let text = "{\"op\":\"malloc\",\"id\":1,\"size\":32}\n{\"op\":\"free\",\"id\":1}\n";
        let r = replay(&mut m, text.as_bytes()).unwrap();
        assert_eq!((r.peak_live, r.final_live, r.events), (1, 0, 2));
    }

    #[test]
    fn errors_carry_line_and_id() {
        let mut m = model();
        let text = "{\"op\":\"malloc\",\"id\":1,\"size\":32}\n\n{\"op\":\"free\",\"id\":9}\n";
        match replay(&mut m, text.as_bytes()) {
            Err(TraceError::Protocol { line, id, message }) => {
                assert_eq!((line, id), (3, 9));
                assert!(message.contains('9'));
            }
            other => panic!("{other:?}"),
        }
        let mut m = model();
        match replay(&mut m, "{\"op\":\"malloc\"\n".as_bytes()) {
            Err(TraceError::Parse { line: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn records_are_append_only_and_ordered() {
        let mut m = model();
        let mut r = Replayer::new(&mut m);
        for (i, e) in synthetic_trace(2000, 0x20000, 4).into_iter().enumerate() {
            let before = r.records().to_vec();
            r.apply(e, i + 1).unwrap();
            assert_eq!(&r.records()[..before.len()], &before[..]);
        }
        assert!(r.records().windows(2).all(|w| w[0].round < w[1].round));
    }

    #[test]
    fn synthetic_trace_round_trips() {
        let events = synthetic_trace(100, 0x1000, 2);
        let mut buf = Vec::new();
        write_trace(&mut buf, &events).unwrap();
        let back: Vec<TraceEvent> = String::from_utf8(buf)
            .unwrap()
            .lines()
            .enumerate()
            .map(|(i, l)| parse_event(l, i + 1).unwrap())
            .collect();
        assert_eq!(back, events);
    }
}
