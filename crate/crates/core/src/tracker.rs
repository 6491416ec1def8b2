//! Cluster tracking between adjacent, overlapping windows by Jaccard
//! similarity of member keys.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::WindowClustering;
use crate::window::SequenceKey;

pub const DEFAULT_JACCARD_THRESHOLD: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrackError {
    #[error("windows {prev} and {curr} are not adjacent")]
    NotAdjacent { prev: u64, curr: u64 },
    #[error("threshold {0} outside (0, 1)")]
    BadThreshold(f64),
}

/// `|A ∩ B| / |A ∪ B|` over sorted, duplicate-free slices; 0 when both are empty.
pub fn jaccard(a: &[SequenceKey], b: &[SequenceKey]) -> f64 {
    let inter = intersection_len(a, b);
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn intersection_len(a: &[SequenceKey], b: &[SequenceKey]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMapping {
    pub window_index: u64,
    /// current cluster id → (previous cluster id, Jaccard score)
    pub entries: BTreeMap<u32, (u32, f64)>,
    pub unmapped: Vec<u32>,
}

impl ClusterMapping {
    pub fn previous_of(&self, current: u32) -> Option<u32> {
        self.entries.get(&current).map(|(p, _)| *p)
    }
}

/// Map clusters of `curr` onto clusters of `prev`.
///
/// Every pair scoring strictly above `threshold` is a candidate; candidates
/// are accepted greedily by descending score (ties: lower previous id, then
/// lower current id), each cluster on either side used at most once.
pub fn map_clusters(prev: &WindowClustering, curr: &WindowClustering, threshold: f64) -> Result<ClusterMapping, TrackError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(TrackError::BadThreshold(threshold));
    }
    if prev.window_index + 1 != curr.window_index {
        return Err(TrackError::NotAdjacent {
            prev: prev.window_index,
            curr: curr.window_index,
        });
    }
    let mut candidates: Vec<(f64, u32, u32)> = prev
        .clusters
        .par_iter()
        .flat_map_iter(|p| {
            curr.clusters.iter().filter_map(move |k| {
                let s = jaccard(&p.members, &k.members);
                (s > threshold).then_some((s, p.id, k.id))
            })
        })
        .collect();
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut entries = BTreeMap::new();
    let mut used_prev = std::collections::HashSet::new();
    for (score, p, k) in candidates {
        if entries.contains_key(&k) || used_prev.contains(&p) {
            continue;
        }
        used_prev.insert(p);
        entries.insert(k, (p, score));
    }
    let unmapped = curr
        .clusters
        .iter()
        .map(|c| c.id)
        .filter(|id| !entries.contains_key(id))
        .collect();
    Ok(ClusterMapping {
        window_index: curr.window_index,
        entries,
        unmapped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{Cluster, ClusterSummary};
    use proptest::prelude::*;
    use std::net::Ipv4Addr;

    fn keys(ids: &[u32]) -> Vec<SequenceKey> {
        let mut k: Vec<_> = ids.iter().map(|i| SequenceKey::src(Ipv4Addr::from(*i))).collect();
        k.sort_unstable();
        k.dedup();
        k
    }

    fn clustering(window: u64, sets: &[&[u32]]) -> WindowClustering {
        let mut wc = WindowClustering::empty(window);
        for (i, s) in sets.iter().enumerate() {
            wc.clusters.push(Cluster {
                id: i as u32,
                members: keys(s),
                summary: ClusterSummary::from_sequences(std::iter::empty(), 0.05),
            });
        }
        wc
    }

    #[test]
    fn jaccard_values() {
        assert_eq!(jaccard(&keys(&[1, 2]), &keys(&[1, 2])), 1.0);
        assert_eq!(jaccard(&keys(&[1, 2]), &keys(&[3, 4])), 0.0);
        assert_eq!(jaccard(&keys(&[1, 2, 3]), &keys(&[2, 3, 4])), 0.5);
        assert_eq!(jaccard(&[], &[]), 0.0);
    }

    #[test]
    fn overlapping_cluster_maps() {
        let prev = clustering(0, &[&[1, 2, 3, 4]]);
        let curr = clustering(1, &[&[2, 3, 4, 5]]);
        let m = map_clusters(&prev, &curr, 0.5).unwrap();
        assert_eq!(m.entries[&0], (0, 0.6));
        assert!(m.unmapped.is_empty());
    }

    #[test]
    fn weak_overlap_is_new() {
        let prev = clustering(0, &[&[1, 2, 3, 4]]);
        let curr = clustering(1, &[&[4, 5, 6, 7]]);
        let m = map_clusters(&prev, &curr, 0.5).unwrap();
        assert!(m.entries.is_empty());
        assert_eq!(m.unmapped, vec![0]);
    }

    #[test]
    fn empty_previous_window() {
        let prev = clustering(4, &[]);
        let curr = clustering(5, &[&[1, 2], &[3, 4]]);
        let m = map_clusters(&prev, &curr, 0.3).unwrap();
        assert_eq!(m.unmapped, vec![0, 1]);
    }

    #[test]
    fn non_adjacent_rejected() {
        let prev = clustering(0, &[]);
        let curr = clustering(2, &[]);
        assert!(matches!(map_clusters(&prev, &curr, 0.3), Err(TrackError::NotAdjacent { .. })));
        assert!(matches!(map_clusters(&prev, &clustering(1, &[]), 1.0), Err(TrackError::BadThreshold(_))));
    }

    #[test]
    fn previous_cluster_consumed_once() {
        // one previous cluster split in two; the closer half keeps the identity
        let prev = clustering(0, &[&[1, 2, 3, 4, 5, 6, 7, 8, 9, 10]]);
        let curr = clustering(1, &[&[1, 2, 3, 4], &[5, 6, 7, 8, 9, 10]]);
        let m = map_clusters(&prev, &curr, 0.3).unwrap();
        assert_eq!(m.previous_of(1), Some(0));
        assert_eq!(m.unmapped, vec![0]);
    }

    #[test]
    fn highest_previous_wins() {
        let prev = clustering(0, &[&[1, 2, 3, 20], &[1, 2, 3, 4]]);
        let curr = clustering(1, &[&[1, 2, 3, 4, 5]]);
        let m = map_clusters(&prev, &curr, 0.3).unwrap();
        assert_eq!(m.previous_of(0), Some(1));
    }

    fn arb_sets() -> impl Strategy<Value = Vec<Vec<u32>>> {
        proptest::collection::vec(proptest::collection::vec(0u32..40, 1..15), 0..6)
    }

    proptest! {
        #[test]
        fn jaccard_symmetric_bounded(a in proptest::collection::vec(0u32..30, 0..20), b in proptest::collection::vec(0u32..30, 0..20)) {
            let (a, b) = (keys(&a), keys(&b));
            let s = jaccard(&a, &b);
            prop_assert_eq!(s, jaccard(&b, &a));
            prop_assert!((0.0..=1.0).contains(&s));
            if !a.is_empty() {
                prop_assert_eq!(jaccard(&a, &a), 1.0);
            }
        }

        #[test]
        fn mapping_is_partial_injection(p in arb_sets(), c in arb_sets(), t in 0.05f64..0.9) {
            let pr: Vec<&[u32]> = p.iter().map(|v| v.as_slice()).collect();
            let cr: Vec<&[u32]> = c.iter().map(|v| v.as_slice()).collect();
            let prev = clustering(0, &pr);
            let curr = clustering(1, &cr);
            let m = map_clusters(&prev, &curr, t).unwrap();
            let targets: Vec<u32> = m.entries.values().map(|(p, _)| *p).collect();
            let mut dedup = targets.clone();
            dedup.sort_unstable();
            dedup.dedup();
            prop_assert_eq!(dedup.len(), targets.len());
            prop_assert_eq!(m.entries.len() + m.unmapped.len(), curr.clusters.len());
            for (_, (_, s)) in m.entries.iter() {
                prop_assert!(*s > t);
            }
            prop_assert_eq!(map_clusters(&prev, &curr, t).unwrap(), m);
        }
    }
}
