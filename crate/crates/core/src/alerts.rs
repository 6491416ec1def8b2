//! Alert rules evaluated over one fully processed window, and the window
//! report that records every per-cluster decision.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::io::BufRead;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{ClusterCategory, WindowClustering};
use crate::concepts::{ConceptId, ConceptRegistry, Severity};
use crate::ingest::TimestampMs;
use crate::window::SequenceKey;

/// Exemplar sequences carried by each alert.
pub const ALERT_EXEMPLARS: usize = 3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AlertError {
    #[error("min_cluster_size must be at least 1")]
    MinClusterSize,
    #[error("spike_factor must exceed 1, got {0}")]
    SpikeFactor(f64),
    #[error("trailing_windows must be at least 1")]
    TrailingWindows,
    #[error("country table line {line}: {msg}")]
    CountryTable { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AlertKind {
    NovelCluster,
    MaliciousRecurrence,
    SizeSpike,
}

impl fmt::Display for AlertKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlertKind::NovelCluster => "NovelCluster",
            AlertKind::MaliciousRecurrence => "MaliciousRecurrence",
            AlertKind::SizeSpike => "SizeSpike",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlertRules {
    pub min_cluster_size: usize,
    pub spike_factor: f64,
    pub trailing_windows: usize,
}

impl Default for AlertRules {
    fn default() -> Self {
        AlertRules {
            min_cluster_size: 100,
            spike_factor: 3.0,
            trailing_windows: 24,
        }
    }
}

impl AlertRules {
    pub fn validate(&self) -> Result<(), AlertError> {
        if self.min_cluster_size < 1 {
            return Err(AlertError::MinClusterSize);
        }
        if !(self.spike_factor > 1.0 && self.spike_factor.is_finite()) {
            return Err(AlertError::SpikeFactor(self.spike_factor));
        }
        if self.trailing_windows < 1 {
            return Err(AlertError::TrailingWindows);
        }
        Ok(())
    }
}

/// How a cluster got its concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Resolution {
    Mapped { previous: u32, jaccard: f64 },
    Recovered { score: f64 },
    Novel { best_score: Option<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub cluster: u32,
    pub size: usize,
    pub category: ClusterCategory,
    pub ports: Vec<u16>,
    pub median_distinct_ports: usize,
    pub concept: ConceptId,
    pub severity: Severity,
    pub resolution: Resolution,
    pub exemplars: Vec<Vec<u16>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    pub v: u32,
    pub window: u64,
    pub start: String,
    pub end: String,
    pub records: usize,
    pub filtered_records: usize,
    pub sequences: usize,
    pub noise: usize,
    pub clusters: Vec<ClusterReport>,
    pub alerts: usize,
}

impl WindowReport {
    /// Total cluster size per concept in this window.
    pub fn concept_sizes(&self) -> BTreeMap<ConceptId, usize> {
        let mut out = BTreeMap::new();
        for c in &self.clusters {
            *out.entry(c.concept.clone()).or_default() += c.size;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    pub window: u64,
    pub kind: AlertKind,
    pub concept: ConceptId,
    pub size: usize,
    pub category: ClusterCategory,
    pub exemplars: Vec<Vec<u16>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub countries: Option<BTreeMap<String, usize>>,
    pub ts: String,
}

impl Alert {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("alerts always serialize")
    }
}

pub fn format_ts(ms: TimestampMs) -> String {
    chrono::DateTime::from_timestamp_millis(ms)
        .map(|t| t.to_rfc3339_opts(chrono::SecondsFormat::Millis, true))
        .unwrap_or_else(|| ms.to_string())
}

/// Per-concept sizes of the windows in which the concept was present,
/// oldest first.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SizeHistory {
    series: BTreeMap<ConceptId, VecDeque<(u64, usize)>>,
}

impl SizeHistory {
    /// Mean size over the concept's appearances within the `w` windows
    /// before `window`; `None` when it has no such appearance.
    pub fn trailing_mean(&self, concept: &ConceptId, window: u64, w: usize) -> Option<f64> {
        let lo = window.saturating_sub(w as u64);
        let pts: Vec<usize> = self
            .series
            .get(concept)?
            .iter()
            .filter(|(i, _)| *i >= lo && *i < window)
            .map(|(_, s)| *s)
            .collect();
        if pts.is_empty() {
            None
        } else {
            Some(pts.iter().sum::<usize>() as f64 / pts.len() as f64)
        }
    }

    pub fn record(&mut self, concept: &ConceptId, window: u64, size: usize, w: usize) {
        let q = self.series.entry(concept.clone()).or_default();
        q.retain(|(i, _)| *i != window);
        q.push_back((window, size));
        let lo = window.saturating_sub(w as u64);
        while q.front().is_some_and(|(i, _)| *i < lo) {
            q.pop_front();
        }
    }

    pub fn forget(&mut self, concept: &ConceptId) {
        self.series.remove(concept);
    }
}

/// Longest-prefix IPv4 → country lookup. One `a.b.c.d/len CC` entry per
/// line; `#` starts a comment.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CountryTable {
    // (prefix length, network) → country, searched longest prefix first
    by_len: BTreeMap<std::cmp::Reverse<u8>, BTreeMap<u32, String>>,
}

impl CountryTable {
    pub fn parse<R: BufRead>(input: R) -> Result<Self, AlertError> {
        let mut table = CountryTable::default();
        for (i, line) in input.lines().enumerate() {
            let bad = |msg: String| AlertError::CountryTable { line: i + 1, msg };
            let line = line.map_err(|e| bad(e.to_string()))?;
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (cidr, cc) = match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) => (a, b),
                _ => return Err(bad("expected `<prefix>/<len> <country>`".into())),
            };
            let (addr, len) = cidr.split_once('/').ok_or_else(|| bad(format!("`{cidr}` has no prefix length")))?;
            let addr: Ipv4Addr = addr.parse().map_err(|_| bad(format!("bad address `{addr}`")))?;
            let len: u8 = len.parse().ok().filter(|l| *l <= 32).ok_or_else(|| bad(format!("bad prefix length `{len}`")))?;
            table
                .by_len
                .entry(std::cmp::Reverse(len))
                .or_default()
                .insert(mask(u32::from(addr), len), cc.to_string());
        }
        Ok(table)
    }

    pub fn lookup(&self, ip: Ipv4Addr) -> Option<&str> {
        let ip = u32::from(ip);
        self.by_len
            .iter()
            .find_map(|(len, nets)| nets.get(&mask(ip, len.0)).map(String::as_str))
    }

    pub fn histogram(&self, keys: &[SequenceKey]) -> BTreeMap<String, usize> {
        let mut h = BTreeMap::new();
        for k in keys {
            let cc = self.lookup(k.src).unwrap_or("??");
            *h.entry(cc.to_string()).or_default() += 1;
        }
        h
    }
}

fn mask(ip: u32, len: u8) -> u32 {
    if len == 0 {
        0
    } else {
        ip & (u32::MAX << (32 - len))
    }
}

/// Evaluate every rule over one window. `reports` and `clustering.clusters`
/// are parallel. The history is updated with this window's sizes.
pub fn evaluate_rules(
    window: u64,
    emitted_at: TimestampMs,
    reports: &[ClusterReport],
    clustering: &WindowClustering,
    registry: &ConceptRegistry,
    rules: &AlertRules,
    history: &mut SizeHistory,
    countries: Option<&CountryTable>,
) -> Vec<Alert> {
    let ts = format_ts(emitted_at);
    let mut fired: BTreeSet<(AlertKind, ConceptId)> = BTreeSet::new();
    let mut alerts = Vec::new();

    let mut sizes: BTreeMap<&ConceptId, usize> = BTreeMap::new();
    for r in reports {
        *sizes.entry(&r.concept).or_default() += r.size;
    }

    for (i, r) in reports.iter().enumerate() {
        let Some(model) = registry.get(&r.concept) else {
            continue;
        };
        let tracked = !matches!(r.resolution, Resolution::Novel { .. });
        let total = sizes[&r.concept];
        let mut candidates = Vec::new();
        if !tracked && r.size >= rules.min_cluster_size {
            candidates.push((AlertKind::NovelCluster, r.size));
        }
        if tracked && model.severity() == Severity::Malicious {
            candidates.push((AlertKind::MaliciousRecurrence, total));
        }
        if tracked {
            if let Some(mean) = history.trailing_mean(&r.concept, window, rules.trailing_windows) {
                if total as f64 > rules.spike_factor * mean {
                    candidates.push((AlertKind::SizeSpike, total));
                }
            }
        }
        for (kind, size) in candidates {
            if !fired.insert((kind, r.concept.clone())) {
                continue;
            }
            let members = clustering.clusters.get(i).map(|c| c.members.as_slice()).unwrap_or(&[]);
            alerts.push(Alert {
                window,
                kind,
                concept: r.concept.clone(),
                size,
                category: r.category,
                exemplars: r.exemplars.iter().take(ALERT_EXEMPLARS).cloned().collect(),
                countries: countries.map(|t| t.histogram(members)),
                ts: ts.clone(),
            });
        }
    }
    for (concept, size) in sizes {
        history.record(concept, window, size, rules.trailing_windows);
    }
    alerts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{Cluster, ClusterSummary};
    use crate::concepts::{AnnotationEvent, ClusterObservation, RegistryConfig};

    fn registry_with(n: usize) -> ConceptRegistry {
        let mut reg = ConceptRegistry::new(RegistryConfig::default()).unwrap();
        let pos: Vec<&[f64]> = vec![&[1.0, 0.0][..]; 10];
        let neg: Vec<&[f64]> = vec![&[-1.0, 0.0][..]; 10];
        for _ in 0..n {
            let obs = ClusterObservation {
                members: pos.clone(),
                negatives: neg.clone(),
                category: ClusterCategory::BasicAttack,
                exemplars: vec![vec![11390; 4]],
            };
            reg.recover_or_discover(&obs, 0).unwrap();
        }
        reg
    }

    fn report(concept: &ConceptId, size: usize, resolution: Resolution) -> ClusterReport {
        ClusterReport {
            cluster: 0,
            size,
            category: ClusterCategory::BasicAttack,
            ports: vec![11390],
            median_distinct_ports: 1,
            concept: concept.clone(),
            severity: Severity::Unlabeled,
            resolution,
            exemplars: vec![vec![11390; 4]],
        }
    }

    fn clustering_of(sizes: &[usize]) -> WindowClustering {
        let mut wc = WindowClustering::empty(0);
        let mut next = 0u32;
        for (i, s) in sizes.iter().enumerate() {
            let members = (0..*s)
                .map(|_| {
                    next += 1;
                    SequenceKey::src(Ipv4Addr::from(0xc612_0000 + next))
                })
                .collect();
            wc.clusters.push(Cluster {
                id: i as u32,
                members,
                summary: ClusterSummary::from_sequences(std::iter::empty(), 0.05),
            });
        }
        wc
    }

    fn novel() -> Resolution {
        Resolution::Novel { best_score: None }
    }

    fn mapped() -> Resolution {
        Resolution::Mapped { previous: 0, jaccard: 0.9 }
    }

    #[test]
    fn novel_cluster_threshold() {
        let reg = registry_with(1);
        let id = reg.models()[0].id.clone();
        let rules = AlertRules::default();
        let mut h = SizeHistory::default();
        let a = evaluate_rules(3, 0, &[report(&id, 895, novel())], &clustering_of(&[895]), &reg, &rules, &mut h, None);
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].kind, AlertKind::NovelCluster);
        assert_eq!(a[0].size, 895);
        let mut h = SizeHistory::default();
        let a = evaluate_rules(3, 0, &[report(&id, 10, novel())], &clustering_of(&[10]), &reg, &rules, &mut h, None);
        assert!(a.is_empty());
    }

    #[test]
    fn size_spike_against_trailing_mean() {
        let reg = registry_with(1);
        let id = reg.models()[0].id.clone();
        let rules = AlertRules::default();
        let mut h = SizeHistory::default();
        for w in 0..3 {
            let a = evaluate_rules(w, 0, &[report(&id, 100, mapped())], &clustering_of(&[100]), &reg, &rules, &mut h, None);
            assert!(a.is_empty());
        }
        let a = evaluate_rules(3, 0, &[report(&id, 450, mapped())], &clustering_of(&[450]), &reg, &rules, &mut h, None);
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].kind, AlertKind::SizeSpike);
        // 300 is not strictly above 3 × 100
        let mut h = SizeHistory::default();
        h.record(&id, 0, 100, 24);
        let a = evaluate_rules(1, 0, &[report(&id, 300, mapped())], &clustering_of(&[300]), &reg, &rules, &mut h, None);
        assert!(a.is_empty());
    }

    #[test]
    fn trailing_window_limits_history() {
        let id = ConceptId::from_seq(1);
        let mut h = SizeHistory::default();
        h.record(&id, 0, 1000, 2);
        h.record(&id, 5, 10, 2);
        assert_eq!(h.trailing_mean(&id, 6, 2), Some(10.0));
        assert_eq!(h.trailing_mean(&id, 9, 2), None);
    }

    #[test]
    fn malicious_recurrence_once_per_window() {
        let mut reg = registry_with(1);
        let id = reg.models()[0].id.clone();
        reg.annotate(
            &id,
            AnnotationEvent {
                severity: Severity::Malicious,
                note: String::new(),
                author: "a".into(),
                at_ms: 0,
                idempotency_key: None,
            },
        )
        .unwrap();
        let rules = AlertRules::default();
        let mut h = SizeHistory::default();
        // the concept shows up twice in the same window
        let reports = [report(&id, 40, Resolution::Recovered { score: 0.9 }), report(&id, 50, mapped())];
        let a = evaluate_rules(7, 0, &reports, &clustering_of(&[40, 50]), &reg, &rules, &mut h, None);
        let mal: Vec<_> = a.iter().filter(|x| x.kind == AlertKind::MaliciousRecurrence).collect();
        assert_eq!(mal.len(), 1);
        assert_eq!(mal[0].size, 90);
        // re-evaluating the same window with a fresh history gives the same set
        let mut h2 = SizeHistory::default();
        assert_eq!(evaluate_rules(7, 0, &reports, &clustering_of(&[40, 50]), &reg, &rules, &mut h2, None), a);
        // a novel malicious-free concept raises nothing
        let a = evaluate_rules(8, 0, &[report(&id, 40, novel())], &clustering_of(&[40]), &reg, &rules, &mut h, None);
        assert!(a.is_empty());
    }

    #[test]
    fn unknown_concepts_never_alert() {
        let reg = registry_with(0);
        let ghost = ConceptId::from_seq(42);
        let mut h = SizeHistory::default();
        let a = evaluate_rules(0, 0, &[report(&ghost, 5000, novel())], &clustering_of(&[5000]), &reg, &AlertRules::default(), &mut h, None);
        assert!(a.is_empty());
    }

    #[test]
    fn alert_json_shape() {
        let a = Alert {
            window: 4,
            kind: AlertKind::NovelCluster,
            concept: ConceptId::from_seq(3),
            size: 895,
            category: ClusterCategory::BasicAttack,
            exemplars: vec![vec![11390, 11390]],
            countries: None,
            ts: format_ts(1_540_512_000_000),
        };
        assert_eq!(
            a.to_json_line(),
            r#"{"window":4,"kind":"NovelCluster","concept":"c000003","size":895,"category":"BasicAttack","exemplars":[[11390,11390]],"ts":"2018-10-26T00:00:00.000Z"}"#
        );
        let back: Alert = serde_json::from_str(&a.to_json_line()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn country_table_longest_prefix() {
        let t = CountryTable::parse(&b"# test\n198.18.0.0/15 CN\n198.18.5.0/24 BR\n"[..]).unwrap();
        assert_eq!(t.lookup(Ipv4Addr::new(198, 18, 5, 9)), Some("BR"));
        assert_eq!(t.lookup(Ipv4Addr::new(198, 19, 0, 1)), Some("CN"));
        assert_eq!(t.lookup(Ipv4Addr::new(10, 0, 0, 1)), None);
        let keys = [
            SequenceKey::src(Ipv4Addr::new(198, 18, 5, 9)),
            SequenceKey::src(Ipv4Addr::new(198, 18, 0, 9)),
            SequenceKey::src(Ipv4Addr::new(198, 18, 0, 10)),
        ];
        let h = t.histogram(&keys);
        assert_eq!(h["CN"], 2);
        assert_eq!(h["BR"], 1);
        assert!(CountryTable::parse(&b"198.18.0.0 CN\n"[..]).is_err());
    }

    #[test]
    fn rule_validation() {
        assert!(AlertRules::default().validate().is_ok());
        assert!(AlertRules { spike_factor: 1.0, ..Default::default() }.validate().is_err());
        assert!(AlertRules { min_cluster_size: 0, ..Default::default() }.validate().is_err());
        assert!(AlertRules { trailing_windows: 0, ..Default::default() }.validate().is_err());
    }
}
