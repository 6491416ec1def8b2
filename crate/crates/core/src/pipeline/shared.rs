//! Read-only snapshots for API readers and the label queue feeding the
//! pipeline writer.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::alerts::{Alert, WindowReport};
use crate::cluster::ClusterCategory;
use crate::concepts::{Annotation, AnnotationEvent, ConceptId, ConceptModel, ConceptRegistry, Severity};
use crate::ingest::TimestampMs;

/// A concept without its classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptView {
    pub id: ConceptId,
    pub annotation: Annotation,
    pub history: Vec<AnnotationEvent>,
    pub first_seen: u64,
    pub last_seen: u64,
    pub occurrence_count: u64,
    pub category: ClusterCategory,
    pub first_size: usize,
    pub exemplars: Vec<Vec<u16>>,
}

impl From<&ConceptModel> for ConceptView {
    fn from(m: &ConceptModel) -> Self {
        ConceptView {
            id: m.id.clone(),
            annotation: m.annotation.clone(),
            history: m.history.clone(),
            first_seen: m.first_seen,
            last_seen: m.last_seen,
            occurrence_count: m.occurrence_count,
            category: m.category,
            first_size: m.first_size,
            exemplars: m.exemplars.clone(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub reports: BTreeMap<u64, WindowReport>,
    pub concepts: Vec<ConceptView>,
    pub alerts: Vec<Alert>,
    pub running: bool,
}

/// Per-window, per-concept cluster sizes. `None` marks a window in which the
/// concept (or noise) was absent or the window is unknown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub windows: Vec<u64>,
    pub series: BTreeMap<ConceptId, Vec<Option<usize>>>,
    pub noise: Vec<Option<usize>>,
}

impl Snapshot {
    pub fn latest(&self) -> Option<&WindowReport> {
        self.reports.values().next_back()
    }

    pub fn concept(&self, id: &ConceptId) -> Option<&ConceptView> {
        self.concepts.iter().find(|c| &c.id == id)
    }

    pub fn novel_since(&self, window: u64) -> Vec<&ConceptView> {
        self.concepts.iter().filter(|c| c.first_seen > window).collect()
    }

    pub fn alerts_since(&self, window: u64) -> Vec<&Alert> {
        self.alerts.iter().filter(|a| a.window >= window).collect()
    }

    pub fn timeline(&self, from: u64, to: u64) -> Timeline {
        let windows: Vec<u64> = if to >= from { (from..=to).collect() } else { Vec::new() };
        let mut series: BTreeMap<ConceptId, Vec<Option<usize>>> = BTreeMap::new();
        let mut noise = vec![None; windows.len()];
        for (i, w) in windows.iter().enumerate() {
            let Some(r) = self.reports.get(w) else { continue };
            noise[i] = Some(r.noise);
            for (concept, size) in r.concept_sizes() {
                series.entry(concept).or_insert_with(|| vec![None; windows.len()])[i] = Some(size);
            }
        }
        Timeline { windows, series, noise }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRequest {
    pub concept: ConceptId,
    pub severity: Severity,
    pub note: String,
    pub author: String,
    pub at_ms: TimestampMs,
    pub idempotency_key: Option<String>,
}

impl LabelRequest {
    pub fn into_event(self) -> (ConceptId, AnnotationEvent) {
        (
            self.concept,
            AnnotationEvent {
                severity: self.severity,
                note: self.note,
                author: self.author,
                at_ms: self.at_ms,
                idempotency_key: self.idempotency_key,
            },
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Submit {
    Queued,
    /// Same idempotency key already pending or applied.
    Duplicate,
    UnknownConcept,
}

/// Shared between one pipeline writer and any number of readers. Readers
/// clone an `Arc` of the latest snapshot and never wait on window work.
#[derive(Debug, Default)]
pub struct Shared {
    snapshot: RwLock<Arc<Snapshot>>,
    labels: Mutex<Vec<LabelRequest>>,
}

impl Shared {
    pub fn new(snapshot: Snapshot) -> Arc<Self> {
        Arc::new(Shared {
            snapshot: RwLock::new(Arc::new(snapshot)),
            labels: Mutex::new(Vec::new()),
        })
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    pub fn publish(&self, snapshot: Snapshot) {
        *self.snapshot.write().expect("snapshot lock") = Arc::new(snapshot);
    }

    pub fn update(&self, f: impl FnOnce(&mut Snapshot)) {
        let mut guard = self.snapshot.write().expect("snapshot lock");
        let mut next = (**guard).clone();
        f(&mut next);
        *guard = Arc::new(next);
    }

    pub fn submit(&self, req: LabelRequest) -> Submit {
        let snap = self.snapshot();
        let Some(concept) = snap.concept(&req.concept) else {
            return Submit::UnknownConcept;
        };
        let mut q = self.labels.lock().expect("label queue");
        if let Some(key) = &req.idempotency_key {
            let seen = concept.history.iter().any(|h| h.idempotency_key.as_ref() == Some(key))
                || q.iter().any(|p| p.concept == req.concept && p.idempotency_key.as_ref() == Some(key));
            if seen {
                return Submit::Duplicate;
            }
        }
        q.push(req);
        Submit::Queued
    }

    pub fn pending_labels(&self) -> usize {
        self.labels.lock().expect("label queue").len()
    }

    pub fn take_labels(&self) -> Vec<LabelRequest> {
        std::mem::take(&mut *self.labels.lock().expect("label queue"))
    }
}

pub fn concept_views(registry: &ConceptRegistry) -> Vec<ConceptView> {
    registry.models().iter().map(ConceptView::from).collect()
}
