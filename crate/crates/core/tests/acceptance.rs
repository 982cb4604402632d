//! End-to-end acceptance suite. Runs every criterion, prints one PASS/FAIL
//! line each and exits non-zero if any failed.

use std::collections::{BTreeMap, HashMap};
use std::panic::{self, AssertUnwindSafe};
use std::time::{Duration, Instant};

use clustertag::alloc::cluster::{ClusterId, ClusterState, SlotStatus};
use clustertag::detect::{usable_size, Classification, Harness, Violation, MAGMA_OFFSETS};
use clustertag::layout::{region_of, Placement, SizeClassTable, SizeLookup, CHUNKS_PER_CLUSTER};
use clustertag::metrics::{
    cluster_spatial_model, geometric_entropy, monte_carlo_temporal, spatial_distances,
    temporal_distances, triangular_entropy, MonteCarloConfig, SlotTagHistory, SnapshotView,
    TemporalStrategy,
};
use clustertag::tags::{init_cluster_tags, rotate_tags};
use clustertag::trace::{synthetic_trace, TraceEvent};
use clustertag::{ClusterTagAllocator, ClusterTagConfig, ModelKind, SimRng, TaggedAddress};
use rand::{Rng, SeedableRng};

fn within(value: f64, target: f64, tol: f64) -> bool {
    (value - target).abs() <= tol
}

fn within_rel(value: f64, target: f64, rel: f64) -> bool {
    within(value, target, target * rel)
}

fn analytic_entropy() -> String {
    let start = Instant::now();
    let g = geometric_entropy(1.0 / 256.0).unwrap();
    let t = triangular_entropy(256);
    assert!(within(g, 9.44, 0.01), "geometric(1/256) = {g}");
    assert!(within(t, 8.72, 0.01), "triangular(256) = {t}");
    let mut bounds = Vec::new();
    for (d, want) in [(5, 12.33), (10, 13.41), (20, 14.45)] {
        let h = cluster_spatial_model(d).entropy_bound_bits;
        assert!(within(h, want, 0.05), "bound at d={d} is {h}");
        bounds.push(format!("{h:.2}"));
    }
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    format!("H(G)={g:.3} H(tri)={t:.3} bounds={}", bounds.join("/"))
}

fn monte_carlo() -> String {
    let config = MonteCarloConfig::default();
    let mut rng = SimRng::seed_from_u64(0xC0FFEE);
    let shift = monte_carlo_temporal(TemporalStrategy::CircularShift, &config, &mut rng).stats;
    let random = monte_carlo_temporal(TemporalStrategy::Random, &config, &mut rng).stats;
    for s in [&shift, &random] {
        assert!(s.samples >= 2_000_000, "only {} samples", s.samples);
    }

    let min = shift.min.unwrap();
    assert!((16..=25).contains(&min), "shift min {min}");
    let avg = shift.avg.unwrap();
    assert!(within_rel(avg, 510.21, 0.05), "shift avg {avg}");
    let p25 = shift.p25.unwrap() as f64;
    assert!(within_rel(p25, 265.0, 0.10), "shift p25 {p25}");
    assert!(within(shift.entropy_bits, 9.53, 0.3), "shift H {}", shift.entropy_bits);

    assert_eq!(random.min, Some(1), "random min");
    let avg_r = random.avg.unwrap();
    assert!(within_rel(avg_r, 543.76, 0.05), "random avg {avg_r}");
    let p25_r = random.p25.unwrap() as f64;
    assert!(within_rel(p25_r, 157.0, 0.10), "random p25 {p25_r}");
    assert!(within(random.entropy_bits, 10.53, 0.3), "random H {}", random.entropy_bits);

    format!(
        "shift min={min} avg={avg:.1} p25={p25} H={:.2} | random min=1 avg={avg_r:.1} p25={p25_r} H={:.2} | {}+{} samples",
        shift.entropy_bits, random.entropy_bits, shift.samples, random.samples
    )
}

fn check_snapshot(a: &ClusterTagAllocator, density: u32) {
    a.check_invariants().unwrap();
    let table = &a.config().size_classes;
    for class in table.classes() {
        for pool in a.region(class.index()).pools() {
            assert!(pool.used_bytes() <= (1u64 << 30) / density as u64);
        }
    }
    // (class, tag) -> (location, cluster)
    let mut by_tag: BTreeMap<(usize, u8), Vec<(u64, u64)>> = BTreeMap::new();
    for c in a.clusters() {
        for (slot, status) in c.slots().iter().enumerate() {
            if let Some(tag) = status.tag() {
                by_tag
                    .entry((c.size_class().index(), tag))
                    .or_default()
                    .push((c.chunk_addr(slot), c.base()));
            }
        }
    }
    for ((class, tag), mut locs) in by_tag {
        let chunk = table.get(class).unwrap().chunk_size();
        locs.sort_unstable();
        for w in locs.windows(2) {
            if w[0].1 != w[1].1 {
                let gap = w[1].0 - w[0].0;
                assert!(
                    gap >= CHUNKS_PER_CLUSTER as u64 * chunk,
                    "tag {tag:#04x} repeats {gap:#x} bytes apart in class {class}"
                );
            }
        }
    }
}

fn structural_invariants() -> String {
    const SEEDS: u64 = 100;
    const EVENTS: usize = 10_000;
    let table = SizeClassTable::default();
    let mut total_ops = 0u64;
    for seed in 0..SEEDS {
        let density = [1, 2, 5, 10, 20][seed as usize % 5];
        let config = ClusterTagConfig {
            density,
            scan_period: 64,
            ..ClusterTagConfig::default()
        };
        let mut a = ClusterTagAllocator::new(config, seed);
        let mut ids: HashMap<u64, TaggedAddress> = HashMap::new();
        // start -> end of every live chunk
        let mut live: BTreeMap<u64, u64> = BTreeMap::new();
        for (i, event) in synthetic_trace(EVENTS, 0x20000, seed).into_iter().enumerate() {
            let touched = match event {
                TraceEvent::Malloc { id, size } => {
                    let p = a.allocate(size).unwrap();
                    let expected = match table.lookup(size) {
                        SizeLookup::Class(c) => c.region_id(),
                        SizeLookup::LargeObject(_) => table.large_region_id(),
                    };
                    assert_eq!(region_of(p), expected, "region of {p}");
                    let (start, end) = (p.untag(), p.untag() + usable_size(size));
                    if let Some((&s, &e)) = live.range(..end).next_back() {
                        assert!(e <= start, "{start:#x} overlaps live [{s:#x}, {e:#x})");
                    }
                    live.insert(start, end);
                    ids.insert(id, p);
                    p
                }
                TraceEvent::Free { id } => {
                    let p = ids.remove(&id).unwrap();
                    a.deallocate(p).unwrap();
                    live.remove(&p.untag());
                    p
                }
            };
            if let Some(c) = a.cluster_of(touched) {
                c.check_unique().unwrap();
                let class = c.size_class().index();
                for pool in a.region(class).pools() {
                    assert!(pool.used_bytes() <= pool.cap());
                }
            }
            if i % 1000 == 999 {
                check_snapshot(&a, density);
            }
            total_ops += 1;
        }
        check_snapshot(&a, density);
    }
    format!("{SEEDS} seeds x {EVENTS} events ({total_ops} ops)")
}

fn quarantine_window() -> String {
    const ROUNDS: u64 = 1_000_000;
    const Q: usize = 16;
    let table = SizeClassTable::default();
    let class = table.get(0).unwrap();
    let placement = Placement {
        base: 0,
        reserved: class.cluster_size() * 2,
        pool: 0,
    };
    let mut c = ClusterState::new(ClusterId::new(0), class, placement, 239);
    let mut rng = SimRng::seed_from_u64(16);
    init_cluster_tags(&mut c, Q, &mut rng);
    // last[slot * 256 + tag]: last rotation the slot carried the tag.
    let mut last = vec![u64::MAX; CHUNKS_PER_CLUSTER * 256];
    let first = c.info_slots();
    let mut observe = |c: &ClusterState, round: u64, min_gap: &mut u64| {
        for slot in first..CHUNKS_PER_CLUSTER {
            let tag = c.slot(slot).tag().unwrap();
            let cell = &mut last[slot * 256 + tag as usize];
            if *cell != u64::MAX && *cell + 1 != round {
                *min_gap = (*min_gap).min(round - *cell);
            }
            *cell = round;
        }
    };
    let mut min_gap = u64::MAX;
    observe(&c, 0, &mut min_gap);
    for round in 1..=ROUNDS {
        // Between reuses some chunks get handed out and some come back.
        let p_busy = rng.gen_range(0.0..1.0);
        for slot in first..CHUNKS_PER_CLUSTER {
            let tag = c.slot(slot).tag().unwrap();
            let status = if rng.gen_bool(p_busy) {
                SlotStatus::InUse(tag)
            } else {
                SlotStatus::Freed(tag)
            };
            c.set_slot(slot, status);
        }
        rotate_tags(&mut c);
        c.check_unique().unwrap();
        observe(&c, round, &mut min_gap);
    }
    assert!(min_gap >= Q as u64, "a slot got a tag back after {min_gap} rotations");
    format!("{ROUNDS} rotations, smallest return gap {min_gap}")
}

/// Exact two-sided 99% acceptance interval of Binomial(n, p) counts.
fn binomial_interval(n: u64, p: f64) -> (u64, u64) {
    let ln_pmf = |k: u64| -> f64 {
        let lg = |x: u64| (1..=x).map(|i| (i as f64).ln()).sum::<f64>();
        lg(n) - lg(k) - lg(n - k) + k as f64 * p.ln() + (n - k) as f64 * (1.0 - p).ln()
    };
    // Terms beyond 3000 are negligible for n*p around 400.
    let top = n.min(3000);
    let pmf: Vec<f64> = (0..=top).map(|k| ln_pmf(k).exp()).collect();
    let mut cdf = 0.0;
    let mut lo = None;
    for (k, &m) in pmf.iter().enumerate() {
        cdf += m;
        if lo.is_none() && cdf >= 0.005 {
            lo = Some(k as u64);
        }
        if cdf >= 0.995 {
            return (lo.unwrap(), k as u64);
        }
    }
    unreachable!("mass concentrates below {top}")
}

fn detection_campaigns() -> String {
    let h = Harness::default();
    let mut seeds = SimRng::seed_from_u64(2024);
    let mut run = |kind: ModelKind, v: Violation, size: u64, trials: u64| {
        h.run_campaign(kind, v, size, trials, seeds.gen()).unwrap()
    };
    let ct = ModelKind::ClusterTag;
    let chunk = usable_size(0x20) as i64;
    let mut cases = vec![
        (Violation::AdjacentOverflow { offset: chunk }, 0x20),
        (Violation::AdjacentOverflow { offset: -1 }, 0x20),
        (Violation::AdjacentOverflow { offset: 128 }, 128),
        (Violation::DoubleFree, 0x20),
        (Violation::DoubleFree, 0x100),
    ];
    for offset in [-8192, -4096, -1024, 1024, 4096, 8192] {
        cases.push((Violation::NonAdjacentOverflow { offset }, 0x20));
    }
    for rounds in [0, 1, 7, 15] {
        cases.push((Violation::UseAfterFree { realloc_rounds: rounds }, 0x20));
    }
    for (v, size) in cases {
        let r = run(ct, v, size, 500);
        assert_eq!(
            r.classification,
            Classification::TP,
            "clustertag {} {} missed {} of 500",
            r.violation,
            r.offset_or_rounds,
            r.trials - r.detected
        );
    }

    let n = 100_000;
    let r = run(ModelKind::Random, Violation::AdjacentOverflow { offset: chunk }, 0x20, n);
    let misses = r.trials - r.detected;
    let (lo, hi) = binomial_interval(n, 1.0 / 256.0);
    assert_eq!(r.classification, Classification::PN);
    assert!((lo..=hi).contains(&misses), "random misses {misses} outside [{lo}, {hi}]");

    let sticky = run(
        ModelKind::Sticky,
        Violation::UseAfterFree { realloc_rounds: 1 },
        0x20,
        500,
    );
    assert_eq!(sticky.classification, Classification::FN, "sticky UAF");

    for offset in [chunk, -1] {
        let s = run(ModelKind::Staggered, Violation::AdjacentOverflow { offset }, 0x20, 500);
        assert_eq!(s.classification, Classification::TP, "staggered offset {offset}");
    }

    let wrap = 1u64 << h.config.tag_bits;
    let fixed = run(
        ModelKind::FixedTemporal,
        Violation::UseAfterFree { realloc_rounds: wrap },
        0x20,
        500,
    );
    assert_eq!(fixed.detected, 0, "fixed-temporal caught the wraparound");
    assert_eq!(fixed.classification, Classification::FN);

    format!(
        "clustertag all TP; random misses {misses}/{n} in [{lo}, {hi}]; sticky UAF FN; staggered TP; fixed-temporal UAF@{wrap} missed"
    )
}

fn magma_preset() -> String {
    let h = Harness::default();
    let r = h
        .magma_scenario(ModelKind::ClusterTag, 0x20, MAGMA_OFFSETS, 200, 77)
        .unwrap();
    assert_eq!(r.detected, r.trials, "{} offsets missed", r.trials - r.detected);
    format!("{} of {} out-of-bounds cases detected", r.detected, r.trials)
}

fn reference_spatial(items: &[(u32, u8, u64)]) -> Vec<u64> {
    let mut out = Vec::new();
    for a in items {
        for b in items {
            let same = a.0 == b.0 && a.1 == b.1;
            if !same || b.2 <= a.2 {
                continue;
            }
            let between = items
                .iter()
                .any(|c| c.0 == a.0 && c.1 == a.1 && c.2 > a.2 && c.2 < b.2);
            if !between {
                out.push(b.2 - a.2);
            }
        }
    }
    out.sort_unstable();
    out
}

fn reference_temporal(events: &[(u64, u8, u64)]) -> Vec<u64> {
    let mut out = Vec::new();
    for a in events {
        for b in events {
            if a.0 != b.0 || a.1 != b.1 || b.2 <= a.2 {
                continue;
            }
            let between = events
                .iter()
                .any(|c| c.0 == a.0 && c.1 == a.1 && c.2 > a.2 && c.2 < b.2);
            if !between {
                out.push(b.2 - a.2);
            }
        }
    }
    out.sort_unstable();
    out
}

fn expand(d: &clustertag::metrics::DistanceMultiset) -> Vec<u64> {
    d.iter()
        .flat_map(|(v, n)| std::iter::repeat_n(v, n as usize))
        .collect()
}

fn brute_force_equivalence() -> String {
    let mut rng = SimRng::seed_from_u64(7);
    for _ in 0..1000 {
        let n = rng.gen_range(0..120);
        let mut used = std::collections::HashSet::new();
        let items: Vec<(u32, u8, u64)> = (0..n)
            .map(|_| (rng.gen_range(0..3u32), rng.gen_range(0..6u8), rng.gen_range(0..400u64)))
            .filter(|&(g, _, p)| used.insert((g, p)))
            .collect();
        let fast = expand(&spatial_distances(&SnapshotView::from_positions(items.clone())));
        assert_eq!(fast, reference_spatial(&items), "spatial on {items:?}");
    }
    for _ in 0..1000 {
        let n = rng.gen_range(0..150);
        let mut round = 0;
        let events: Vec<(u64, u8, u64)> = (0..n)
            .map(|_| {
                round += rng.gen_range(1..4);
                (rng.gen_range(0..5u64) * 0x10, rng.gen_range(0..6u8), round)
            })
            .collect();
        let mut h = SlotTagHistory::new();
        for &(pos, tag, r) in &events {
            h.record(pos, tag, r);
        }
        let fast = expand(&temporal_distances(&h));
        assert_eq!(fast, reference_temporal(&events), "temporal on {events:?}");
    }
    "1000 spatial + 1000 temporal instances".to_string()
}

fn main() {
    type Criterion = (&'static str, fn() -> String);
    let criteria: [Criterion; 7] = [
        ("analytic entropy", analytic_entropy),
        ("monte carlo temporal", monte_carlo),
        ("structural invariants", structural_invariants),
        ("quarantine window", quarantine_window),
        ("detection campaigns", detection_campaigns),
        ("overflow offset sweep", magma_preset),
        ("brute-force equivalence", brute_force_equivalence),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {} {name} ({secs:.1}s): {detail}", i + 1),
            Err(e) => {
                failed += 1;
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                println!("FAIL criterion {} {name} ({secs:.1}s): {msg}", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
