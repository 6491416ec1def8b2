//! Recurring-concept recovery and novel-concept discovery.
//!
//! Every concept owns a one-vs-all random forest trained on the window in
//! which it was first seen. A cluster the tracker could not map is scored
//! against every forest (mean positive probability over its members); the
//! best model wins if its score is strictly above `beta`, otherwise the
//! cluster becomes a new concept.

mod forest;

use std::collections::HashMap;
use std::fmt;
use std::io::{self, BufRead, Write};
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{ClusterCategory, MAX_EXEMPLARS};

pub use forest::{forest_train, Forest, ForestError, ForestParams, Tree};

pub const DEFAULT_BETA: f64 = 0.7;
const REGISTRY_HEADER: &str = "dante-registry v1";

#[derive(Debug, Error)]
pub enum ConceptError {
    #[error("unknown concept {0}")]
    UnknownConcept(ConceptId),
    #[error("cannot score an empty cluster")]
    EmptyCluster,
    #[error("beta {0} outside (0, 1)")]
    BadBeta(f64),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error("registry line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConceptId(String);

impl ConceptId {
    pub fn from_seq(n: u64) -> Self {
        ConceptId(format!("c{n:06}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    fn ordinal(&self) -> u64 {
        self.0.trim_start_matches('c').parse().unwrap_or(0)
    }
}

impl fmt::Display for ConceptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ConceptId {
    fn from(s: &str) -> Self {
        ConceptId(s.to_string())
    }
}

impl FromStr for ConceptId {
    type Err = std::convert::Infallible;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(ConceptId(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    #[default]
    Unlabeled,
    Benign,
    Suspicious,
    Malicious,
}

impl FromStr for Severity {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "unlabeled" => Ok(Severity::Unlabeled),
            "benign" => Ok(Severity::Benign),
            "suspicious" => Ok(Severity::Suspicious),
            "malicious" => Ok(Severity::Malicious),
            other => Err(format!("unknown severity `{other}`")),
        }
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Severity::Unlabeled => "unlabeled",
            Severity::Benign => "benign",
            Severity::Suspicious => "suspicious",
            Severity::Malicious => "malicious",
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub severity: Severity,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationEvent {
    pub severity: Severity,
    pub note: String,
    pub author: String,
    pub at_ms: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idempotency_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptModel {
    pub id: ConceptId,
    pub annotation: Annotation,
    pub history: Vec<AnnotationEvent>,
    pub first_seen: u64,
    pub last_seen: u64,
    pub occurrence_count: u64,
    pub category: ClusterCategory,
    pub first_size: usize,
    pub exemplars: Vec<Vec<u16>>,
    pub forest: Forest,
}

impl ConceptModel {
    pub fn severity(&self) -> Severity {
        self.annotation.severity
    }

    fn merge_exemplars(&mut self, fresh: &[Vec<u16>]) {
        for e in fresh {
            if self.exemplars.len() >= MAX_EXEMPLARS {
                break;
            }
            if !self.exemplars.contains(e) {
                self.exemplars.push(e.clone());
            }
        }
    }
}

/// Everything the registry needs about one unmapped cluster.
#[derive(Debug, Clone)]
pub struct ClusterObservation<'a> {
    pub members: Vec<&'a [f64]>,
    /// Non-member sequences of the same window (other clusters and noise).
    pub negatives: Vec<&'a [f64]>,
    pub category: ClusterCategory,
    pub exemplars: Vec<Vec<u16>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Decision {
    Recovered { concept: ConceptId, score: f64 },
    Novel { concept: ConceptId, best_score: Option<f64> },
}

impl Decision {
    pub fn concept(&self) -> &ConceptId {
        match self {
            Decision::Recovered { concept, .. } | Decision::Novel { concept, .. } => concept,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistryConfig {
    pub beta: f64,
    pub forest: ForestParams,
    /// Negatives are downsampled to at most this multiple of the positives.
    pub max_negative_ratio: usize,
    /// Positives are downsampled to at most this many examples.
    pub max_positives: usize,
    pub max_concepts: usize,
}

impl Default for RegistryConfig {
    fn default() -> Self {
        RegistryConfig {
            beta: DEFAULT_BETA,
            forest: ForestParams::default(),
            max_negative_ratio: 10,
            max_positives: 1000,
            max_concepts: 10_000,
        }
    }
}

/// Mean forest prediction over the cluster members.
pub fn score_cluster(members: &[&[f64]], model: &ConceptModel) -> Result<f64, ConceptError> {
    score_forest(members, &model.forest)
}

fn score_forest(members: &[&[f64]], forest: &Forest) -> Result<f64, ConceptError> {
    if members.is_empty() {
        return Err(ConceptError::EmptyCluster);
    }
    // identical members get identical predictions; score each once
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut unique: Vec<(&[f64], usize)> = Vec::new();
    for m in members {
        let key: Vec<u64> = m.iter().map(|x| x.to_bits()).collect();
        match seen.get(&key) {
            Some(&i) => unique[i].1 += 1,
            None => {
                seen.insert(key, unique.len());
                unique.push((m, 1));
            }
        }
    }
    let mut sum = 0.0;
    for (x, w) in unique {
        sum += forest.predict(x)? * w as f64;
    }
    Ok(sum / members.len() as f64)
}

fn downsample<'a>(rows: &[&'a [f64]], limit: usize, rng: &mut ChaCha8Rng) -> Vec<&'a [f64]> {
    if rows.len() <= limit {
        return rows.to_vec();
    }
    let mut idx = sample(rng, rows.len(), limit).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| rows[i]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptRegistry {
    config: RegistryConfig,
    next_id: u64,
    models: Vec<ConceptModel>,
}

#[derive(Serialize, Deserialize)]
struct RegistryMeta {
    config: RegistryConfig,
    next_id: u64,
    concepts: usize,
}

impl ConceptRegistry {
    pub fn new(config: RegistryConfig) -> Result<Self, ConceptError> {
        if !(config.beta > 0.0 && config.beta < 1.0) {
            return Err(ConceptError::BadBeta(config.beta));
        }
        Ok(ConceptRegistry {
            config,
            next_id: 1,
            models: Vec::new(),
        })
    }

    pub fn config(&self) -> &RegistryConfig {
        &self.config
    }

    pub fn beta(&self) -> f64 {
        self.config.beta
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn models(&self) -> &[ConceptModel] {
        &self.models
    }

    pub fn get(&self, id: &ConceptId) -> Option<&ConceptModel> {
        self.models.iter().find(|m| &m.id == id)
    }

    fn get_mut(&mut self, id: &ConceptId) -> Result<&mut ConceptModel, ConceptError> {
        self.models
            .iter_mut()
            .find(|m| &m.id == id)
            .ok_or_else(|| ConceptError::UnknownConcept(id.clone()))
    }

    fn seed_for(&self, concept: &ConceptId, window_index: u64) -> u64 {
        self.config
            .forest
            .seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(concept.ordinal() << 32)
            .wrapping_add(window_index)
    }

    fn train_for(&self, concept: &ConceptId, window_index: u64, obs: &ClusterObservation<'_>) -> Result<Forest, ConceptError> {
        let seed = self.seed_for(concept, window_index);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let positives = downsample(&obs.members, self.config.max_positives.max(1), &mut rng);
        let limit = positives.len() * self.config.max_negative_ratio.max(1);
        let negatives = downsample(&obs.negatives, limit, &mut rng);
        let params = ForestParams {
            seed,
            ..self.config.forest
        };
        Ok(forest_train(&positives, &negatives, &params)?)
    }

    /// Score `members` against every model, in registry order.
    pub fn scores(&self, members: &[&[f64]]) -> Result<Vec<f64>, ConceptError> {
        self.models
            .par_iter()
            .map(|m| score_cluster(members, m))
            .collect()
    }

    /// Best model by score; ties go to the earlier `first_seen`, then the
    /// lower id.
    pub fn best_match(&self, members: &[&[f64]]) -> Result<Option<(usize, f64)>, ConceptError> {
        let scores = self.scores(members)?;
        Ok(scores
            .into_iter()
            .enumerate()
            .max_by(|(i, a), (j, b)| {
                a.total_cmp(b)
                    .then(self.models[*j].first_seen.cmp(&self.models[*i].first_seen))
                    .then(self.models[*j].id.cmp(&self.models[*i].id))
            }))
    }

    /// Recover the cluster as a known concept, or register it as a new one.
    pub fn recover_or_discover(&mut self, obs: &ClusterObservation<'_>, window_index: u64) -> Result<Decision, ConceptError> {
        if obs.members.is_empty() {
            return Err(ConceptError::EmptyCluster);
        }
        let best = self.best_match(&obs.members)?;
        if let Some((i, score)) = best {
            if score > self.config.beta {
                let id = self.models[i].id.clone();
                let forest = self.train_for(&id, window_index, obs)?;
                let m = &mut self.models[i];
                m.forest = forest;
                m.last_seen = m.last_seen.max(window_index);
                m.occurrence_count += 1;
                m.merge_exemplars(&obs.exemplars);
                return Ok(Decision::Recovered { concept: id, score });
            }
        }
        let id = ConceptId::from_seq(self.next_id);
        let forest = self.train_for(&id, window_index, obs)?;
        self.next_id += 1;
        self.evict_if_full();
        self.models.push(ConceptModel {
            id: id.clone(),
            annotation: Annotation::default(),
            history: Vec::new(),
            first_seen: window_index,
            last_seen: window_index,
            occurrence_count: 1,
            category: obs.category,
            first_size: obs.members.len(),
            exemplars: obs.exemplars.iter().take(MAX_EXEMPLARS).cloned().collect(),
            forest,
        });
        Ok(Decision::Novel {
            concept: id,
            best_score: best.map(|(_, s)| s),
        })
    }

    fn evict_if_full(&mut self) {
        if self.models.len() < self.config.max_concepts {
            return;
        }
        let victim = self
            .models
            .iter()
            .enumerate()
            .filter(|(_, m)| m.severity() == Severity::Unlabeled)
            .min_by_key(|(_, m)| (m.occurrence_count, m.last_seen, m.id.clone()))
            .map(|(i, _)| i);
        match victim {
            Some(i) => {
                let gone = self.models.remove(i);
                log::info!("registry full, evicted {}", gone.id);
            }
            None => log::warn!("registry full of labelled concepts; growing past {}", self.config.max_concepts),
        }
    }

    /// Record that a tracked (mapped) cluster carried this concept forward.
    pub fn observe_tracked(&mut self, id: &ConceptId, window_index: u64) -> Result<(), ConceptError> {
        let m = self.get_mut(id)?;
        if window_index > m.last_seen {
            m.last_seen = window_index;
            m.occurrence_count += 1;
        }
        Ok(())
    }

    /// Replace the current annotation and append to the history. A repeated
    /// idempotency key is a no-op.
    pub fn annotate(&mut self, id: &ConceptId, event: AnnotationEvent) -> Result<&ConceptModel, ConceptError> {
        let m = self.get_mut(id)?;
        let duplicate = event
            .idempotency_key
            .as_ref()
            .is_some_and(|k| m.history.iter().any(|h| h.idempotency_key.as_ref() == Some(k)));
        if !duplicate {
            m.annotation = Annotation {
                severity: event.severity,
                note: event.note.clone(),
            };
            m.history.push(event);
        }
        Ok(m)
    }

    pub fn save<W: Write>(&self, mut out: W) -> Result<(), ConceptError> {
        writeln!(out, "{REGISTRY_HEADER}")?;
        let meta = RegistryMeta {
            config: self.config,
            next_id: self.next_id,
            concepts: self.models.len(),
        };
        serde_json::to_writer(&mut out, &meta).map_err(io::Error::from)?;
        writeln!(out)?;
        for m in &self.models {
            serde_json::to_writer(&mut out, m).map_err(io::Error::from)?;
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load<R: BufRead>(input: R) -> Result<Self, ConceptError> {
        let fmt_err = |line: usize, msg: String| ConceptError::Format { line, msg };
        let mut lines = input.lines();
        let header = lines.next().transpose()?.unwrap_or_default();
        if header.trim() != REGISTRY_HEADER {
            return Err(fmt_err(1, format!("expected `{REGISTRY_HEADER}` header")));
        }
        let meta_line = lines.next().ok_or_else(|| fmt_err(2, "missing metadata".into()))??;
        let meta: RegistryMeta = serde_json::from_str(&meta_line).map_err(|e| fmt_err(2, e.to_string()))?;
        let mut models = Vec::with_capacity(meta.concepts);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let m: ConceptModel = serde_json::from_str(&line).map_err(|e| fmt_err(i + 3, e.to_string()))?;
            models.push(m);
        }
        if models.len() != meta.concepts {
            return Err(fmt_err(
                2,
                format!("header announces {} concepts, found {}", meta.concepts, models.len()),
            ));
        }
        Ok(ConceptRegistry {
            config: meta.config,
            next_id: meta.next_id,
            models,
        })
    }
}
