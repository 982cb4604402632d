//! Intra-cluster tag assignment.
//!
//! A fresh cluster gets a random permutation of the non-zero tags: one per
//! allocatable slot, the leftovers become its quarantine. When the cluster
//! is reused, the quarantine tags followed by the tags of its Freed slots
//! (ascending slot index) form a ring that is shifted right by one position.
//! A tag leaving a slot has to cross every quarantine position before it can
//! reach a slot again, so a slot cannot get its old tag back in fewer than
//! `Q` rotations.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::address::Tag;
use crate::alloc::cluster::{ClusterState, SlotStatus};

/// One-position circular right shift: position `i` takes the tag that was at
/// `i - 1`, position 0 takes the last one.
pub fn rotate_ring(ring: &mut [Tag]) {
    if ring.len() > 1 {
        ring.rotate_right(1);
    }
}

/// Random permutation of `1..=255`, split into `allocatable` slot tags and
/// `quarantine` reserved tags. Unused tags are dropped.
pub fn initial_assignment<R: Rng + ?Sized>(
    allocatable: usize,
    quarantine: usize,
    rng: &mut R,
) -> (Vec<Tag>, Vec<Tag>) {
    assert!(
        allocatable + quarantine <= 255,
        "{allocatable} slots + {quarantine} quarantine tags exceed 255 usable tags"
    );
    let mut tags: Vec<Tag> = (1..=255).collect();
    tags.shuffle(rng);
    let slots = tags[..allocatable].to_vec();
    let reserved = tags[allocatable..allocatable + quarantine].to_vec();
    (slots, reserved)
}

/// Gives every allocatable slot of a freshly placed cluster a distinct tag
/// and fills the quarantine list.
pub fn init_cluster_tags<R: Rng + ?Sized>(cluster: &mut ClusterState, quarantine: usize, rng: &mut R) {
    let first = cluster.info_slots();
    let (slot_tags, reserved) = initial_assignment(cluster.allocatable(), quarantine, rng);
    for (i, tag) in slot_tags.into_iter().enumerate() {
        cluster.set_slot(first + i, SlotStatus::Freed(tag));
    }
    cluster.quarantine = reserved;
}

/// Current ring: quarantine tags, then Freed slot tags by slot index.
pub fn tag_ring(cluster: &ClusterState) -> Vec<Tag> {
    let mut ring = cluster.quarantine.clone();
    ring.extend(cluster.slots().iter().filter_map(|s| match s {
        SlotStatus::Freed(t) => Some(*t),
        _ => None,
    }));
    ring
}

/// Shifts the ring by one and writes the tags back. In-use and cached slots
/// keep their tags.
pub fn rotate_tags(cluster: &mut ClusterState) {
    let mut ring = tag_ring(cluster);
    rotate_ring(&mut ring);
    let q = cluster.quarantine.len();
    cluster.quarantine.copy_from_slice(&ring[..q]);
    let freed: Vec<usize> = cluster.freed_slots().collect();
    for (slot, &tag) in freed.into_iter().zip(&ring[q..]) {
        cluster.slots[slot] = SlotStatus::Freed(tag);
    }
    cluster.reuse_rounds += 1;
}

/// Guaranteed lower bound, in reuse rounds, before a slot can see the same
/// tag again.
pub fn min_temporal_gap(quarantine: usize) -> u64 {
    assert!(quarantine >= 1, "quarantine must hold at least one tag");
    quarantine as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alloc::cluster::ClusterId;
    use crate::layout::{Placement, SizeClassTable};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fresh(seed: u64) -> ClusterState {
        let class = SizeClassTable::default().get(0).unwrap();
        let placement = Placement {
            base: 0x100_0000_0000,
            reserved: 2 * class.cluster_size(),
            pool: 0,
        };
        let mut c = ClusterState::new(ClusterId(0), class, placement, 239);
        init_cluster_tags(&mut c, 16, &mut ChaCha8Rng::seed_from_u64(seed));
        c
    }

    #[test]
    fn ring_shift_matches_worked_example() {
        let mut ring = [0x93, 0xD6, 0x8D, 0x27, 0x7E];
        rotate_ring(&mut ring);
        assert_eq!(ring, [0x7E, 0x93, 0xD6, 0x8D, 0x27]);
    }

    #[test]
    fn init_uses_every_nonzero_tag_once() {
        let c = fresh(5);
        let mut all: Vec<Tag> = c
            .slots()
            .iter()
            .filter_map(SlotStatus::tag)
            .chain(c.quarantine().iter().copied())
            .collect();
        assert_eq!(all.len(), 255);
        all.sort_unstable();
        assert_eq!(all, (1..=255).collect::<Vec<Tag>>());
        assert!(c.slots()[..17].iter().all(|s| *s == SlotStatus::Info));
        c.check_unique().unwrap();
    }

    #[test]
    fn different_seeds_permute_differently() {
        assert_ne!(fresh(1).slots(), fresh(2).slots());
    }

    #[test]
    fn rotation_without_freed_slots_only_moves_quarantine() {
        let mut c = fresh(3);
        for i in c.info_slots()..256 {
            let t = c.slot(i).tag().unwrap();
            c.set_slot(i, SlotStatus::InUse(t));
        }
        let slots = c.slots().to_vec();
        let mut q = c.quarantine().to_vec();
        rotate_tags(&mut c);
        assert_eq!(c.slots(), &slots[..]);
        q.rotate_right(1);
        assert_eq!(c.quarantine(), &q[..]);
        assert_eq!(c.reuse_rounds(), 1);
    }

    #[test]
    fn rotation_changes_every_freed_tag() {
        let mut c = fresh(8);
        for i in (c.info_slots()..256).step_by(3) {
            let t = c.slot(i).tag().unwrap();
            c.set_slot(i, SlotStatus::InUse(t));
        }
        let before = c.slots().to_vec();
        rotate_tags(&mut c);
        for (i, (old, new)) in before.iter().zip(c.slots()).enumerate() {
            match (old, new) {
                (SlotStatus::Freed(a), SlotStatus::Freed(b)) => assert_ne!(a, b, "slot {i}"),
                _ => assert_eq!(old, new),
            }
        }
        c.check_unique().unwrap();
    }

    #[test]
    fn min_gap_is_quarantine_size() {
        assert_eq!(min_temporal_gap(16), 16);
        assert_eq!(min_temporal_gap(1), 1);
    }

    /// Brute force: for every ring size from Q to Q + 239, keep all slots
    /// freed and rotate a full period; a slot must not see its tag again in
    /// fewer than Q rotations.
    #[test]
    fn quarantine_window_over_all_ring_sizes() {
        let q = 16;
        for freed in 0..=239usize {
            let len = q + freed;
            let mut ring: Vec<Tag> = (1..=len as u8).collect();
            let start = ring.clone();
            for r in 1..=len {
                rotate_ring(&mut ring);
                for pos in q..len {
                    if ring[pos] == start[pos] {
                        assert!(r >= q, "ring {len}: slot {pos} repeats after {r}");
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn rotation_conserves_tags(seed in any::<u64>(), mask in prop::collection::vec(any::<u8>(), 239)) {
            let mut c = fresh(seed);
            for (k, m) in mask.iter().enumerate() {
                let i = c.info_slots() + k;
                let t = c.slot(i).tag().unwrap();
                match m % 3 {
                    0 => c.set_slot(i, SlotStatus::InUse(t)),
                    1 => c.set_slot(i, SlotStatus::Cached(t)),
                    _ => {}
                }
            }
            let mut before: Vec<Tag> = c.slots().iter().filter_map(SlotStatus::tag)
                .chain(c.quarantine().iter().copied()).collect();
            rotate_tags(&mut c);
            let mut after: Vec<Tag> = c.slots().iter().filter_map(SlotStatus::tag)
                .chain(c.quarantine().iter().copied()).collect();
            before.sort_unstable();
            after.sort_unstable();
            prop_assert_eq!(before, after);
            prop_assert!(c.check_unique().is_ok());
        }
    }
}
