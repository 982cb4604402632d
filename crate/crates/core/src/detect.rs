//! Injected-violation campaigns.
//!
//! A trial builds a fresh model from a trial seed, runs a random warm-up
//! workload, allocates a target chunk and performs one violation against
//! it. A campaign repeats the trial and classifies the outcome: detected
//! every time (TP), never (FN) or sometimes (PN).

use std::fmt;
use std::io;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::address::TaggedAddress;
use crate::config::{ConfigError, RunConfig};
use crate::layout::{SizeClassTable, SizeLookup};
use crate::model::{build_model, AllocError, AllocatorModel, ModelKind};
use crate::SimRng;

/// Offsets of the out-of-bounds accesses swept by the Magma preset.
pub const MAGMA_OFFSETS: (i64, i64) = (-2095, 1791);

/// Allocations a use-after-free trial may spend waiting for reuse rounds.
const CHURN_LIMIT: u64 = 2_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "kebab-case")]
pub enum Violation {
    AdjacentOverflow { offset: i64 },
    NonAdjacentOverflow { offset: i64 },
    UseAfterFree { realloc_rounds: u64 },
    DoubleFree,
}

impl Violation {
    pub fn label(&self) -> &'static str {
        match self {
            Violation::AdjacentOverflow { .. } => "adjacent-overflow",
            Violation::NonAdjacentOverflow { .. } => "non-adjacent-overflow",
            Violation::UseAfterFree { .. } => "use-after-free",
            Violation::DoubleFree => "double-free",
        }
    }

    pub fn parameter(&self) -> String {
        match self {
            Violation::AdjacentOverflow { offset } | Violation::NonAdjacentOverflow { offset } => {
                offset.to_string()
            }
            Violation::UseAfterFree { realloc_rounds } => realloc_rounds.to_string(),
            Violation::DoubleFree => String::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Classification {
    TP,
    FN,
    PN,
}

impl Classification {
    pub fn of(trials: u64, detected: u64) -> Self {
        if detected == trials {
            Classification::TP
        } else if detected == 0 {
            Classification::FN
        } else {
            Classification::PN
        }
    }
}

impl fmt::Display for Classification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Detected,
    Missed,
}

#[derive(Debug, Error)]
pub enum DetectError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("allocator failed during a trial: {0}")]
    Alloc(#[from] AllocError),
    #[error("offset {offset} stays inside the {chunk:#x}-byte chunk")]
    NotAViolation { offset: i64, chunk: u64 },
    #[error("trials must be at least 1")]
    NoTrials,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Random workload applied before the target is allocated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Warmup {
    pub ops: u64,
    pub min_size: u64,
    pub max_size: u64,
    pub free_probability: f64,
}

impl Default for Warmup {
    fn default() -> Self {
        Warmup {
            ops: 5000,
            min_size: 0x10,
            max_size: 0x10000,
            free_probability: 0.5,
        }
    }
}

impl Warmup {
    /// Log-uniform request size.
    pub fn draw_size<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        let (lo, hi) = ((self.min_size as f64).ln(), (self.max_size as f64).ln());
        (rng.gen_range(lo..=hi).exp().round() as u64).clamp(self.min_size, self.max_size)
    }

    pub fn run<R: Rng + ?Sized>(
        &self,
        model: &mut dyn AllocatorModel,
        rng: &mut R,
    ) -> Result<Vec<TaggedAddress>, AllocError> {
        let mut live = Vec::new();
        for _ in 0..self.ops {
            if !live.is_empty() && rng.gen_bool(self.free_probability) {
                let i = rng.gen_range(0..live.len());
                model.deallocate(live.swap_remove(i))?;
            } else {
                live.push(model.allocate(self.draw_size(rng))?);
            }
        }
        Ok(live)
    }
}

/// Shared settings of a campaign.
#[derive(Debug, Clone, PartialEq)]
pub struct Harness {
    pub config: RunConfig,
    pub warmup: Warmup,
}

impl Default for Harness {
    fn default() -> Self {
        Harness {
            config: RunConfig {
                record_history: false,
                ..RunConfig::default()
            },
            warmup: Warmup::default(),
        }
    }
}

/// Bytes of a `size`-byte request that are in bounds.
pub fn usable_size(size: u64) -> u64 {
    match SizeClassTable::default().lookup(size) {
        SizeLookup::Class(c) => c.chunk_size(),
        SizeLookup::LargeObject(len) => len,
    }
}

fn check_offset(offset: i64, size: u64) -> Result<(), DetectError> {
    let chunk = usable_size(size);
    if offset >= 0 && (offset as u64) < chunk {
        return Err(DetectError::NotAViolation { offset, chunk });
    }
    Ok(())
}

impl Harness {
    /// Fresh model plus warm-up, then the target allocation.
    fn prepare(
        &self,
        kind: ModelKind,
        size: u64,
        seed: u64,
    ) -> Result<(Box<dyn AllocatorModel + Send>, SimRng, TaggedAddress), DetectError> {
        let mut model = build_model(kind, &self.config, seed)?;
        let mut rng = SimRng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
        self.warmup.run(model.as_mut(), &mut rng)?;
        let target = model.allocate(size)?;
        Ok((model, rng, target))
    }

    pub fn run_trial(
        &self,
        kind: ModelKind,
        violation: Violation,
        size: u64,
        seed: u64,
    ) -> Result<Outcome, DetectError> {
        if let Violation::AdjacentOverflow { offset } | Violation::NonAdjacentOverflow { offset } =
            violation
        {
            check_offset(offset, size)?;
        }
        let (mut model, _, target) = self.prepare(kind, size, seed)?;
        let detected = match violation {
            Violation::AdjacentOverflow { offset } | Violation::NonAdjacentOverflow { offset } => {
                model.check_access(target.offset(offset), 1).is_violation()
            }
            Violation::DoubleFree => {
                model.deallocate(target)?;
                model.deallocate(target).is_err()
            }
            Violation::UseAfterFree { realloc_rounds } => {
                model.deallocate(target)?;
                churn(model.as_mut(), target, size, realloc_rounds)?;
                model.check_access(target, 1).is_violation()
            }
        };
        Ok(if detected {
            Outcome::Detected
        } else {
            Outcome::Missed
        })
    }

    pub fn run_campaign(
        &self,
        kind: ModelKind,
        violation: Violation,
        size: u64,
        trials: u64,
        seed: u64,
    ) -> Result<CampaignResult, DetectError> {
        if trials == 0 {
            return Err(DetectError::NoTrials);
        }
        let mut seeds = SimRng::seed_from_u64(seed);
        let mut detected = 0;
        for _ in 0..trials {
            if self.run_trial(kind, violation, size, seeds.gen())? == Outcome::Detected {
                detected += 1;
            }
        }
        Ok(CampaignResult::new(
            kind,
            violation.label(),
            violation.parameter(),
            trials,
            detected,
        ))
    }

    /// Sweeps every out-of-bounds offset in `offsets` around a target of
    /// `size` bytes; each (trial, offset) pair is one case.
    pub fn magma_scenario(
        &self,
        kind: ModelKind,
        size: u64,
        offsets: (i64, i64),
        trials: u64,
        seed: u64,
    ) -> Result<CampaignResult, DetectError> {
        if trials == 0 {
            return Err(DetectError::NoTrials);
        }
        let chunk = usable_size(size) as i64;
        let mut seeds = SimRng::seed_from_u64(seed);
        let (mut cases, mut detected) = (0, 0);
        for _ in 0..trials {
            let (model, _, target) = self.prepare(kind, size, seeds.gen())?;
            for off in (offsets.0..=offsets.1).filter(|o| !(0..chunk).contains(o)) {
                cases += 1;
                if model.check_access(target.offset(off), 1).is_violation() {
                    detected += 1;
                }
            }
        }
        Ok(CampaignResult::new(
            kind,
            "magma",
            format!("{}..{}", offsets.0, offsets.1),
            cases,
            detected,
        ))
    }

    pub fn run_scenario(
        &self,
        kind: ModelKind,
        scenario: &Scenario,
        seed: u64,
    ) -> Result<CampaignResult, DetectError> {
        match scenario.kind {
            ScenarioKind::Magma => {
                self.magma_scenario(kind, scenario.size, MAGMA_OFFSETS, scenario.trials, seed)
            }
            ScenarioKind::Single(v) => {
                self.run_campaign(kind, v, scenario.size, scenario.trials, seed)
            }
        }
    }
}

/// Frees and reallocates same-size chunks until the target's memory has
/// gone through `rounds` reuse rounds and the reissued batch is handed out.
/// The target chunk is kept live if it comes back in that last batch.
fn churn(
    model: &mut dyn AllocatorModel,
    target: TaggedAddress,
    size: u64,
    rounds: u64,
) -> Result<(), AllocError> {
    let Some(r0) = model.reuse_rounds(target) else {
        return Ok(());
    };
    let done = |m: &dyn AllocatorModel| match m.reuse_rounds(target) {
        None => true,
        Some(r) => r - r0 >= rounds && (rounds == 0 || m.cached_chunks(size) == 0),
    };
    let mut spins = 0;
    while !done(model) && spins < CHURN_LIMIT {
        spins += 1;
        let p = model.allocate(size)?;
        let same_memory = p.untag() == target.untag();
        let reached = model.reuse_rounds(target).is_some_and(|r| r - r0 >= rounds);
        if !(same_memory && reached) {
            model.deallocate(p)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignResult {
    pub model: String,
    pub violation: String,
    pub offset_or_rounds: String,
    pub trials: u64,
    pub detected: u64,
    pub classification: Classification,
    pub miss_rate: f64,
}

impl CampaignResult {
    pub fn new(
        kind: ModelKind,
        violation: &str,
        parameter: String,
        trials: u64,
        detected: u64,
    ) -> Self {
        CampaignResult {
            model: kind.name().to_string(),
            violation: violation.to_string(),
            offset_or_rounds: parameter,
            trials,
            detected,
            classification: Classification::of(trials, detected),
            miss_rate: (trials - detected) as f64 / trials as f64,
        }
    }
}

pub const CAMPAIGN_HEADER: [&str; 7] = [
    "model",
    "violation",
    "offset_or_rounds",
    "trials",
    "detected",
    "classification",
    "miss_rate",
];

pub fn write_campaign_csv<W: io::Write>(out: W, results: &[CampaignResult]) -> csv::Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CAMPAIGN_HEADER)?;
    for r in results {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioKind {
    Single(Violation),
    Magma,
}

/// One line of a scenario file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scenario {
    pub name: Option<String>,
    pub kind: ScenarioKind,
    pub size: u64,
    pub trials: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioLine {
    #[serde(default)]
    name: Option<String>,
    violation: String,
    #[serde(default)]
    offset: Option<i64>,
    #[serde(default)]
    realloc_rounds: Option<u64>,
    #[serde(default = "default_size")]
    size: u64,
    #[serde(default = "default_trials")]
    trials: u64,
}

fn default_size() -> u64 {
    0x20
}

fn default_trials() -> u64 {
    500
}

impl ScenarioLine {
    fn into_scenario(self) -> Result<Scenario, String> {
        let need_offset = || self.offset.ok_or("missing \"offset\"");
        let kind = match self.violation.as_str() {
            "adjacent-overflow" => ScenarioKind::Single(Violation::AdjacentOverflow {
                offset: need_offset()?,
            }),
            "non-adjacent-overflow" => ScenarioKind::Single(Violation::NonAdjacentOverflow {
                offset: need_offset()?,
            }),
            "use-after-free" => ScenarioKind::Single(Violation::UseAfterFree {
                realloc_rounds: self.realloc_rounds.ok_or("missing \"realloc_rounds\"")?,
            }),
            "double-free" => ScenarioKind::Single(Violation::DoubleFree),
            "magma" => ScenarioKind::Magma,
            other => return Err(format!("unknown violation {other:?}")),
        };
        if self.trials == 0 {
            return Err("trials must be at least 1".into());
        }
        if let ScenarioKind::Single(
            Violation::AdjacentOverflow { offset } | Violation::NonAdjacentOverflow { offset },
        ) = kind
        {
            let chunk = usable_size(self.size);
            if offset >= 0 && (offset as u64) < chunk {
                return Err(format!("offset {offset} stays inside the {chunk:#x}-byte chunk"));
            }
        }
        Ok(Scenario {
            name: self.name,
            kind,
            size: self.size,
            trials: self.trials,
        })
    }
}

/// Parses JSON Lines scenarios; blank lines and `#` comments are skipped.
pub fn parse_scenarios(text: &str) -> Result<Vec<Scenario>, DetectError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse = |message: String| DetectError::Parse { line: i + 1, message };
        let raw: ScenarioLine = serde_json::from_str(line).map_err(|e| parse(e.to_string()))?;
        out.push(raw.into_scenario().map_err(parse)?);
    }
    Ok(out)
}

/// Bundled scenarios: heap overflow, underwrite, over-read, under-read,
/// double free and use after free, plus the Magma sweep.
pub const DEFAULT_SCENARIOS: &str = include_str!("../scenarios/default.jsonl");

pub fn default_scenarios() -> Vec<Scenario> {
    parse_scenarios(DEFAULT_SCENARIOS).expect("bundled scenarios parse")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> Harness {
        Harness {
            warmup: Warmup {
                ops: 500,
                ..Warmup::default()
            },
            ..Harness::default()
        }
    }

    #[test]
    fn classification_rule() {
        assert_eq!(Classification::of(5, 5), Classification::TP);
        assert_eq!(Classification::of(5, 0), Classification::FN);
        assert_eq!(Classification::of(5, 3), Classification::PN);
    }

    #[test]
    fn in_bounds_offsets_are_rejected() {
        let h = quick();
        let v = Violation::AdjacentOverflow { offset: 0 };
        assert!(matches!(
            h.run_trial(ModelKind::Random, v, 0x20, 1),
            Err(DetectError::NotAViolation { .. })
        ));
        let v = Violation::NonAdjacentOverflow { offset: 0x1f };
        assert!(h.run_trial(ModelKind::Random, v, 0x18, 1).is_err());
        let v = Violation::NonAdjacentOverflow { offset: -1 };
        assert!(h.run_trial(ModelKind::Random, v, 0x18, 1).is_ok());
    }

    #[test]
    fn trials_are_deterministic() {
        let h = quick();
        let v = Violation::UseAfterFree { realloc_rounds: 3 };
        for kind in ModelKind::ALL {
            let a = h.run_campaign(kind, v, 0x40, 5, 77).unwrap();
            let b = h.run_campaign(kind, v, 0x40, 5, 77).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn clustertag_catches_double_free_and_short_reuse() {
        let h = quick();
        let r = h
            .run_campaign(ModelKind::ClusterTag, Violation::DoubleFree, 0x80, 20, 1)
            .unwrap();
        assert_eq!(r.classification, Classification::TP);
        let r = h
            .run_campaign(ModelKind::ClusterTag, Violation::UseAfterFree { realloc_rounds: 15 }, 0x20, 20, 2)
            .unwrap();
        assert_eq!(r.classification, Classification::TP);
    }

    #[test]
    fn sticky_misses_use_after_free() {
        let r = quick()
            .run_campaign(ModelKind::Sticky, Violation::UseAfterFree { realloc_rounds: 4 }, 0x20, 20, 3)
            .unwrap();
        assert_eq!(r.classification, Classification::FN);
        assert_eq!(r.miss_rate, 1.0);
    }

    #[test]
    fn scenario_parsing() {
        let text = "# comment\n\n{\"violation\":\"double-free\",\"size\":64}\n{\"violation\":\"magma\",\"trials\":3}\n";
        let s = parse_scenarios(text).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].kind, ScenarioKind::Single(Violation::DoubleFree));
        assert_eq!((s[0].size, s[0].trials), (64, 500));
        assert_eq!(s[1].kind, ScenarioKind::Magma);

        let err = parse_scenarios("{\"violation\":\"double-free\"}\n{\"violation\":\"adjacent-overflow\"}")
            .unwrap_err();
        assert!(matches!(err, DetectError::Parse { line: 2, .. }));
        assert!(parse_scenarios("{\"violation\":\"adjacent-overflow\",\"offset\":0}").is_err());
        assert!(parse_scenarios("").unwrap().is_empty());
    }

    #[test]
    fn bundled_scenarios_cover_every_family() {
        let s = default_scenarios();
        let labels: std::collections::BTreeSet<_> = s
            .iter()
            .map(|s| match s.kind {
                ScenarioKind::Single(v) => v.label(),
                ScenarioKind::Magma => "magma",
            })
            .collect();
        for want in ["adjacent-overflow", "non-adjacent-overflow", "use-after-free", "double-free", "magma"] {
            assert!(labels.contains(want), "{want}");
        }
        let names: Vec<_> = s.iter().filter_map(|s| s.name.clone()).collect();
        for cwe in ["CWE-122", "CWE-124", "CWE-126", "CWE-127", "CWE-415", "CWE-416"] {
            assert!(names.iter().any(|n| n.starts_with(cwe)), "{cwe}");
        }
    }

    #[test]
    fn csv_has_a_stable_header() {
        let mut buf = Vec::new();
        write_campaign_csv(&mut buf, &[]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "model,violation,offset_or_rounds,trials,detected,classification,miss_rate\n"
        );
        let r = CampaignResult::new(ModelKind::Random, "double-free", String::new(), 4, 3);
        let mut buf = Vec::new();
        write_campaign_csv(&mut buf, &[r]).unwrap();
        assert!(String::from_utf8(buf).unwrap().ends_with("random,double-free,,4,3,PN,0.25\n"));
    }
}
