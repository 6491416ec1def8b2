//! End-to-end window processing: ingest → window → embed → cluster →
//! track → recover/discover → alerts, checkpointed after every window.

mod config;
mod shared;
mod state;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader};
use std::path::PathBuf;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::alerts::{evaluate_rules, format_ts, Alert, ClusterReport, CountryTable, Resolution, WindowReport};
use crate::cluster::{normalize, partition, BatchClusterer, ClusterError, Metric, WindowClustering};
use crate::concepts::{ClusterObservation, ConceptError, ConceptId, Decision};
use crate::ingest::{filter_low_volume_sources, FlowRecord};
use crate::port2vec::{EmbeddingError, EmbeddingTable};
use crate::tracker::{map_clusters, TrackError};
use crate::window::{assign_windows, extract_sequences, PortSequence, Window, Windower};

pub use config::{PipelineConfig, TrackerConfig};
pub use shared::{concept_views, ConceptView, LabelRequest, Shared, Snapshot, Submit, Timeline};
pub use state::{Checkpoint, PipelineState, StateStore};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("embedding table {0} not found; create one with `dante train-embeddings --corpus <log> --out <path>`")]
    MissingEmbeddings(PathBuf),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error(transparent)]
    Track(#[from] TrackError),
    #[error(transparent)]
    Concept(#[from] ConceptError),
    #[error("state: {0}")]
    State(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub windows_processed: u64,
    pub windows_skipped: u64,
    pub last_window: Option<u64>,
    pub records: u64,
    pub late_dropped: u64,
    pub concepts: usize,
    pub alerts: u64,
    /// True when the run ended at `stop_after` rather than end of input.
    pub stopped_early: bool,
}

pub struct Pipeline {
    config: PipelineConfig,
    table: Arc<EmbeddingTable>,
    clusterer: Box<dyn BatchClusterer>,
    countries: Option<CountryTable>,
    store: StateStore,
    state: PipelineState,
    shared: Arc<Shared>,
    vocabulary_negatives: Option<Arc<Vec<(Option<u16>, Vec<f64>)>>>,
}

impl Pipeline {
    /// Validate the configuration, load the embedding table and resume from
    /// any state found in the state directory.
    pub fn open(config: PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let table = EmbeddingTable::import(BufReader::new(File::open(&config.embeddings)?))?;
        Self::with_table(config, Arc::new(table))
    }

    /// Like [`Pipeline::open`] with an already loaded table; the table path
    /// in `config` is not consulted.
    pub fn with_table(config: PipelineConfig, table: Arc<EmbeddingTable>) -> Result<Self, PipelineError> {
        let countries = match &config.countries {
            Some(p) => Some(CountryTable::parse(BufReader::new(File::open(p)?)).map_err(|e| PipelineError::Config(e.to_string()))?),
            None => None,
        };
        config.clusterer.validate()?;
        let store = StateStore::open(&config.state_dir)?;
        let state = match store.load_state()? {
            Some(s) => s,
            None => PipelineState::fresh(config.concepts)?,
        };
        store.rewind(&state.checkpoint)?;
        let snapshot = Snapshot {
            reports: store.read_reports(state.checkpoint.last_window)?,
            concepts: concept_views(&state.registry),
            alerts: store.read_alerts()?,
            running: false,
        };
        Ok(Pipeline {
            clusterer: config.clusterer.clusterer(),
            config,
            table,
            countries,
            store,
            state,
            shared: Shared::new(snapshot),
            vocabulary_negatives: None,
        })
    }

    pub fn shared(&self) -> Arc<Shared> {
        self.shared.clone()
    }

    pub fn state(&self) -> &PipelineState {
        &self.state
    }

    pub fn table(&self) -> Arc<EmbeddingTable> {
        self.table.clone()
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn store(&self) -> &StateStore {
        &self.store
    }

    /// Run over `records` until the input ends or window `stop_after` has
    /// been committed. Windows already covered by the checkpoint are
    /// replayed through the windower but not reprocessed.
    pub fn run<I>(&mut self, records: I, stop_after: Option<u64>) -> Result<RunSummary, PipelineError>
    where
        I: IntoIterator<Item = io::Result<FlowRecord>>,
    {
        self.run_with(records, stop_after, |_, _| {})
    }

    /// [`Pipeline::run`] with a callback after every committed window.
    pub fn run_with<I, F>(&mut self, records: I, stop_after: Option<u64>, mut on_window: F) -> Result<RunSummary, PipelineError>
    where
        I: IntoIterator<Item = io::Result<FlowRecord>>,
        F: FnMut(&WindowReport, &Arc<Shared>),
    {
        self.shared.update(|s| s.running = true);
        let result: Result<RunSummary, PipelineError> = (|| {
            let lateness = self.config.lateness_ms();
            let mut windower = match self.state.checkpoint.origin {
                Some(o) => Windower::with_origin(self.config.window, lateness, o),
                None => Windower::new(self.config.window, lateness),
            };
            let mut summary = RunSummary::default();
            for rec in records {
                let rec = rec?;
                summary.records += 1;
                for (w, recs) in windower.push(rec) {
                    if self.step(w, recs, &mut summary, &mut on_window)? && stop_after.is_some_and(|s| w.index >= s) {
                        summary.stopped_early = true;
                        summary.late_dropped = windower.late_dropped();
                        return Ok(summary);
                    }
                }
            }
            summary.late_dropped = windower.late_dropped();
            for (w, recs) in windower.finish() {
                if self.step(w, recs, &mut summary, &mut on_window)? && stop_after.is_some_and(|s| w.index >= s) {
                    summary.stopped_early = true;
                    break;
                }
            }
            Ok(summary)
        })();
        self.shared.update(|s| s.running = false);
        let mut summary = result?;
        summary.last_window = self.state.checkpoint.last_window;
        summary.concepts = self.state.registry.len();
        summary.alerts = self.state.checkpoint.alerts_emitted;
        Ok(summary)
    }

    fn step<F>(&mut self, w: Window, recs: Vec<FlowRecord>, summary: &mut RunSummary, on_window: &mut F) -> Result<bool, PipelineError>
    where
        F: FnMut(&WindowReport, &Arc<Shared>),
    {
        if self.state.checkpoint.origin.is_none() {
            self.state.checkpoint.origin = Some(w.start - w.index as i64 * self.config.window.step_ms());
        }
        if self.state.checkpoint.last_window.is_some_and(|l| w.index <= l) {
            summary.windows_skipped += 1;
            return Ok(false);
        }
        let report = self.process_window(w, recs)?;
        summary.windows_processed += 1;
        on_window(&report, &self.shared);
        Ok(true)
    }

    /// Apply queued analyst labels, persist, and publish. Returns how many
    /// were applied.
    pub fn apply_pending_labels(&mut self) -> Result<usize, PipelineError> {
        let n = self.drain_labels();
        if n > 0 {
            self.store.save_state(&self.state)?;
            let views = concept_views(&self.state.registry);
            self.shared.update(|s| s.concepts = views);
        }
        Ok(n)
    }

    fn drain_labels(&mut self) -> usize {
        let mut n = 0;
        for req in self.shared.take_labels() {
            let (id, event) = req.into_event();
            match self.state.registry.annotate(&id, event) {
                Ok(_) => n += 1,
                Err(e) => log::warn!("dropping label: {e}"),
            }
        }
        n
    }

    /// Single-port vectors of the whole table plus the rare-port vector
    /// (`None`). Every new concept is contrasted with these as well as with
    /// the rest of its window, so that regions of the embedding space absent
    /// from the window still count against it.
    fn vocabulary_negatives(&mut self) -> Result<Arc<Vec<(Option<u16>, Vec<f64>)>>, PipelineError> {
        if self.vocabulary_negatives.is_none() {
            let normalized = self.config.clusterer.metric == Metric::EuclideanOnNormalized;
            let prep = |v: Vec<f64>| if normalized { normalize(&v) } else { v };
            let mut rows = Vec::new();
            for p in self.table.ports() {
                rows.push((Some(p), prep(self.table.embed_ports(&[p])?)));
            }
            if let Some(r) = self.table.rare_vector() {
                rows.push((None, prep(r.iter().map(|x| *x as f64).collect())));
            }
            self.vocabulary_negatives = Some(Arc::new(rows));
        }
        Ok(self.vocabulary_negatives.clone().unwrap_or_default())
    }

    /// Process and commit one window.
    pub fn process_window(&mut self, window: Window, records: Vec<FlowRecord>) -> Result<WindowReport, PipelineError> {
        self.drain_labels();
        let idx = window.index;
        let filtered = filter_low_volume_sources(&records, self.config.min_packets);
        let seqs = extract_sequences(idx, &filtered, self.config.sequence_options());

        let table = &self.table;
        let normalized = self.config.clusterer.metric == Metric::EuclideanOnNormalized;
        let points: Vec<Vec<f64>> = seqs
            .par_iter()
            .map(|s| {
                let v = table.embed_ports(&s.ports)?;
                Ok(if normalized { normalize(&v) } else { v })
            })
            .collect::<Result<_, EmbeddingError>>()?;
        let labels = self.clusterer.fit(&points);
        let clustering = partition(idx, &seqs, &labels, self.config.clusterer.port_support);

        let mut members: Vec<Vec<usize>> = vec![Vec::new(); clustering.clusters.len()];
        for (i, a) in clustering.assignment.iter().enumerate() {
            if let Some(c) = a {
                members[*c].push(i);
            }
        }

        let prev = match &self.state.checkpoint.previous {
            Some(p) if idx > 0 && p.window_index + 1 == idx => Some(p),
            _ => None,
        };
        let mapping = match prev {
            Some(p) => Some(map_clusters(p, &clustering, self.config.tracker.jaccard_threshold)?),
            None => None,
        };

        let mut concept_of = BTreeMap::new();
        let mut reports = Vec::with_capacity(clustering.clusters.len());
        for (pos, cluster) in clustering.clusters.iter().enumerate() {
            let tracked = mapping.as_ref().and_then(|m| m.entries.get(&cluster.id)).and_then(|(p, j)| {
                let concept = self.state.checkpoint.concept_of.get(p)?;
                self.state.registry.get(concept).map(|_| (concept.clone(), *p, *j))
            });
            let (concept, resolution) = match tracked {
                Some((concept, previous, jaccard)) => {
                    self.state.registry.observe_tracked(&concept, idx)?;
                    (concept, Resolution::Mapped { previous, jaccard })
                }
                None => {
                    let (concept, resolution) = self.resolve_unmapped(idx, pos, &members, &points, &clustering)?;
                    (concept, resolution)
                }
            };
            let model = self.state.registry.get(&concept).expect("concept just resolved");
            reports.push(ClusterReport {
                cluster: cluster.id,
                size: cluster.members.len(),
                category: cluster.category(),
                ports: cluster.summary.supported_ports.clone(),
                median_distinct_ports: cluster.summary.median_distinct_ports,
                concept: concept.clone(),
                severity: model.severity(),
                resolution,
                exemplars: cluster.summary.exemplars.clone(),
            });
            concept_of.insert(cluster.id, concept);
        }

        let alerts = evaluate_rules(
            idx,
            window.end,
            &reports,
            &clustering,
            &self.state.registry,
            &self.config.alerts,
            &mut self.state.checkpoint.history,
            self.countries.as_ref(),
        );
        let report = WindowReport {
            v: 1,
            window: idx,
            start: format_ts(window.start),
            end: format_ts(window.end),
            records: records.len(),
            filtered_records: filtered.len(),
            sequences: seqs.len(),
            noise: clustering.noise.len(),
            clusters: reports,
            alerts: alerts.len(),
        };
        self.commit(clustering, concept_of, report, alerts)
    }

    fn resolve_unmapped(
        &mut self,
        idx: u64,
        pos: usize,
        members: &[Vec<usize>],
        points: &[Vec<f64>],
        clustering: &WindowClustering,
    ) -> Result<(ConceptId, Resolution), PipelineError> {
        let cluster = &clustering.clusters[pos];
        let positives: Vec<&[f64]> = members[pos].iter().map(|&i| points[i].as_slice()).collect();
        let mut negatives: Vec<&[f64]> = clustering
            .assignment
            .iter()
            .enumerate()
            .filter(|(_, a)| **a != Some(pos))
            .map(|(i, _)| points[i].as_slice())
            .collect();
        let own = &cluster.summary.supported_ports;
        let vocabulary = self.vocabulary_negatives()?;
        negatives.extend(
            vocabulary
                .iter()
                .filter(|(p, _)| p.is_none_or(|p| own.binary_search(&p).is_err()))
                .map(|(_, v)| v.as_slice()),
        );
        let mirrored: Vec<Vec<f64>>;
        if negatives.is_empty() {
            mirrored = positives.iter().map(|v| v.iter().map(|x| -x).collect()).collect();
            negatives = mirrored.iter().map(Vec::as_slice).collect();
        }
        let obs = ClusterObservation {
            members: positives,
            negatives,
            category: cluster.category(),
            exemplars: cluster.summary.exemplars.clone(),
        };
        let decision = self.state.registry.recover_or_discover(&obs, idx)?;
        Ok(match decision {
            Decision::Recovered { concept, score } => (concept, Resolution::Recovered { score }),
            Decision::Novel { concept, best_score } => (concept, Resolution::Novel { best_score }),
        })
    }

    fn commit(
        &mut self,
        clustering: WindowClustering,
        concept_of: BTreeMap<u32, ConceptId>,
        report: WindowReport,
        alerts: Vec<Alert>,
    ) -> Result<WindowReport, PipelineError> {
        self.store.write_report(&report)?;
        let log_len = if alerts.is_empty() {
            self.state.checkpoint.alert_log_len
        } else {
            self.store.append_alerts(&alerts)?
        };
        let cp = &mut self.state.checkpoint;
        cp.last_window = Some(report.window);
        cp.previous = Some(clustering);
        cp.concept_of = concept_of;
        cp.alert_log_len = log_len;
        cp.alerts_emitted += alerts.len() as u64;
        self.store.save_state(&self.state)?;

        let views = concept_views(&self.state.registry);
        let published = report.clone();
        self.shared.update(move |s| {
            s.reports.insert(published.window, published);
            s.concepts = views;
            s.alerts.extend(alerts);
        });
        Ok(report)
    }
}

/// Windowed, volume-filtered sequences exactly as the pipeline would see
/// them; the input for embedding training.
pub fn training_corpus(records: Vec<FlowRecord>, config: &PipelineConfig) -> Vec<PortSequence> {
    assign_windows(records, config.window, config.lateness_ms())
        .into_iter()
        .flat_map(|(w, recs)| extract_sequences(w.index, &filter_low_volume_sources(&recs, config.min_packets), config.sequence_options()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Protocol;
    use crate::port2vec::{train, TrainConfig};
    use crate::simgen::{catalog, generate};
    use crate::window::{extract_sequences, SequenceOptions};
    use std::net::Ipv4Addr;

    fn table_for(records: &[FlowRecord]) -> Arc<EmbeddingTable> {
        let seqs = extract_sequences(0, records, SequenceOptions::default());
        Arc::new(train(&seqs, &TrainConfig::default()).unwrap())
    }

    fn config(dir: &std::path::Path) -> PipelineConfig {
        PipelineConfig {
            state_dir: dir.to_path_buf(),
            ..Default::default()
        }
    }

    fn ok(records: &[FlowRecord]) -> impl Iterator<Item = io::Result<FlowRecord>> + '_ {
        records.iter().copied().map(Ok)
    }

    #[test]
    fn empty_input_is_a_clean_no_op() {
        let dir = tempfile::tempdir().unwrap();
        let rec = FlowRecord {
            timestamp: 0,
            src_ip: Ipv4Addr::new(100, 64, 0, 1),
            dst_ip: Ipv4Addr::new(203, 0, 113, 1),
            dst_port: 23,
            protocol: Protocol::Tcp,
            packet_size: None,
        };
        let seqs = vec![crate::window::PortSequence {
            key: crate::window::SequenceKey::src(rec.src_ip),
            window_index: 0,
            ports: [23, 2323].repeat(20),
            truncated: false,
        }];
        let cfg = TrainConfig { min_count: 1, ..Default::default() };
        let table = Arc::new(train(&seqs, &cfg).unwrap());
        let mut p = Pipeline::with_table(config(dir.path()), table).unwrap();
        let s = p.run(std::iter::empty(), None).unwrap();
        assert_eq!(s.windows_processed, 0);
        assert_eq!(s.concepts, 0);
        assert!(p.shared().snapshot().latest().is_none());
    }

    #[test]
    fn telnet_scenario_end_to_end() {
        let (records, _) = generate(&catalog::scenario("telnet").unwrap()).unwrap();
        let table = table_for(&records);
        let dir = tempfile::tempdir().unwrap();
        let mut p = Pipeline::with_table(config(dir.path()), table).unwrap();
        let s = p.run(ok(&records), None).unwrap();
        assert!(s.windows_processed > 0);
        assert_eq!(p.state().registry.len(), 1);
        assert_eq!(
            p.state().registry.models()[0].category,
            crate::cluster::ClusterCategory::ComplexAttack
        );
        let snap = p.shared().snapshot();
        assert_eq!(snap.reports.len() as u64, s.windows_processed);
        assert_eq!(snap.concepts.len(), 1);
    }

    #[test]
    fn labels_apply_at_window_boundaries() {
        let (records, _) = generate(&catalog::scenario("telnet").unwrap()).unwrap();
        let table = table_for(&records);
        let dir = tempfile::tempdir().unwrap();
        let mut p = Pipeline::with_table(config(dir.path()), table).unwrap();
        let mut labelled = None;
        p.run_with(ok(&records), None, |report, shared| {
            if labelled.is_none() {
                if let Some(c) = report.clusters.first() {
                    labelled = Some(report.window);
                    let req = LabelRequest {
                        concept: c.concept.clone(),
                        severity: crate::concepts::Severity::Malicious,
                        note: "worm".into(),
                        author: "analyst".into(),
                        at_ms: 0,
                        idempotency_key: None,
                    };
                    assert_eq!(shared.submit(req), Submit::Queued);
                }
            }
        })
        .unwrap();
        let first = labelled.unwrap();
        let alerts = p.store().read_alerts().unwrap();
        let mal: Vec<u64> = alerts
            .iter()
            .filter(|a| a.kind == crate::alerts::AlertKind::MaliciousRecurrence)
            .map(|a| a.window)
            .collect();
        assert!(!mal.is_empty());
        assert!(mal.iter().all(|w| *w > first));
        let m = &p.state().registry.models()[0];
        assert_eq!(m.history.len(), 1);
    }
}
