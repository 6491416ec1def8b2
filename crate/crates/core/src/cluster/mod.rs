//! Per-window batch clustering of sequence vectors and the cluster
//! category taxonomy.

mod dbscan;
mod kmeans;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::port2vec::SequenceVector;
use crate::window::{PortSequence, SequenceKey};

pub use dbscan::Dbscan;
pub use kmeans::KMeans;

pub const MAX_EXEMPLARS: usize = 10;
/// Longest port list kept per exemplar.
pub const MAX_EXEMPLAR_LEN: usize = 256;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClusterError {
    #[error("vector {index} has dimension {found}, expected {expected}")]
    DimMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("{0} sequences but {1} vectors")]
    LengthMismatch(usize, usize),
    #[error("invalid clusterer configuration: {0}")]
    BadConfig(&'static str),
}

/// Any batch algorithm mapping points to optional cluster labels.
/// `None` is noise; labels are dense from 0.
pub trait BatchClusterer: Send + Sync {
    fn name(&self) -> &'static str;
    fn fit(&self, points: &[Vec<f64>]) -> Vec<Option<u32>>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    #[default]
    EuclideanOnNormalized,
    EuclideanRaw,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    #[default]
    Dbscan,
    Kmeans,
}

impl FromStr for Algorithm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dbscan" => Ok(Algorithm::Dbscan),
            "kmeans" => Ok(Algorithm::Kmeans),
            other => Err(format!("unknown clusterer `{other}` (expected dbscan or kmeans)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClustererConfig {
    pub eps: f64,
    pub min_pts: usize,
    pub metric: Metric,
    pub algorithm: Algorithm,
    pub kmeans_k: usize,
    pub seed: u64,
    /// A port counts towards a cluster's unique-port statistic when at
    /// least this fraction of member sequences contain it.
    pub port_support: f64,
}

impl Default for ClustererConfig {
    fn default() -> Self {
        ClustererConfig {
            eps: 0.3,
            min_pts: 30,
            metric: Metric::EuclideanOnNormalized,
            algorithm: Algorithm::Dbscan,
            kmeans_k: 8,
            seed: 1,
            port_support: 0.05,
        }
    }
}

impl ClustererConfig {
    pub fn validate(&self) -> Result<(), ClusterError> {
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(ClusterError::BadConfig("eps must be positive"));
        }
        if self.min_pts < 2 {
            return Err(ClusterError::BadConfig("min_pts must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.port_support) {
            return Err(ClusterError::BadConfig("port_support must lie in [0, 1]"));
        }
        if self.algorithm == Algorithm::Kmeans && self.kmeans_k == 0 {
            return Err(ClusterError::BadConfig("kmeans_k must be positive"));
        }
        Ok(())
    }

    pub fn clusterer(&self) -> Box<dyn BatchClusterer> {
        match self.algorithm {
            Algorithm::Dbscan => Box::new(Dbscan::new(self.eps, self.min_pts)),
            Algorithm::Kmeans => Box::new(KMeans::new(self.kmeans_k, self.min_pts, self.seed)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClusterCategory {
    ServiceRecon,
    BasicAttack,
    ComplexAttack,
    NoiseOutliers,
}

impl ClusterCategory {
    pub fn as_str(&self) -> &'static str {
        match self {
            ClusterCategory::ServiceRecon => "ServiceRecon",
            ClusterCategory::BasicAttack => "BasicAttack",
            ClusterCategory::ComplexAttack => "ComplexAttack",
            ClusterCategory::NoiseOutliers => "NoiseOutliers",
        }
    }
}

impl fmt::Display for ClusterCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Six or more unique ports: service recon. One: basic attack. Two to five:
/// complex attack.
pub fn categorize(unique_ports: usize) -> ClusterCategory {
    match unique_ports {
        0 | 1 => ClusterCategory::BasicAttack,
        2..=5 => ClusterCategory::ComplexAttack,
        _ => ClusterCategory::ServiceRecon,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub size: usize,
    /// Ports present in at least `port_support` of member sequences.
    pub supported_ports: Vec<u16>,
    pub median_distinct_ports: usize,
    pub exemplars: Vec<Vec<u16>>,
}

impl ClusterSummary {
    pub fn from_sequences<'a, I>(members: I, port_support: f64) -> Self
    where
        I: IntoIterator<Item = &'a [u16]>,
    {
        let mut size = 0usize;
        let mut distinct_counts = Vec::new();
        let mut support: HashMap<u16, usize> = HashMap::new();
        let mut variants: HashMap<&'a [u16], usize> = HashMap::new();
        let mut scratch = Vec::new();
        for ports in members {
            size += 1;
            scratch.clear();
            scratch.extend_from_slice(ports);
            scratch.sort_unstable();
            scratch.dedup();
            distinct_counts.push(scratch.len());
            for p in &scratch {
                *support.entry(*p).or_default() += 1;
            }
            *variants.entry(ports).or_default() += 1;
        }
        distinct_counts.sort_unstable();
        let median_distinct_ports = if size == 0 {
            0
        } else {
            distinct_counts[(size - 1) / 2]
        };
        let mut supported_ports: Vec<u16> = support
            .into_iter()
            .filter(|(_, n)| *n as f64 >= port_support * size as f64)
            .map(|(p, _)| p)
            .collect();
        supported_ports.sort_unstable();
        let mut ranked: Vec<(&[u16], usize)> = variants.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let exemplars = ranked
            .into_iter()
            .take(MAX_EXEMPLARS)
            .map(|(p, _)| p[..p.len().min(MAX_EXEMPLAR_LEN)].to_vec())
            .collect();
        ClusterSummary {
            size,
            supported_ports,
            median_distinct_ports,
            exemplars,
        }
    }

    pub fn unique_ports(&self) -> usize {
        self.supported_ports.len()
    }

    pub fn category(&self) -> ClusterCategory {
        categorize(self.unique_ports())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub id: u32,
    /// Sorted member keys.
    pub members: Vec<SequenceKey>,
    pub summary: ClusterSummary,
}

impl Cluster {
    pub fn category(&self) -> ClusterCategory {
        self.summary.category()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowClustering {
    pub window_index: u64,
    pub clusters: Vec<Cluster>,
    /// Sorted noise keys.
    pub noise: Vec<SequenceKey>,
    /// For each input sequence, its cluster position in `clusters` (None = noise).
    #[serde(skip)]
    pub assignment: Vec<Option<usize>>,
}

impl WindowClustering {
    pub fn empty(window_index: u64) -> Self {
        WindowClustering {
            window_index,
            clusters: Vec::new(),
            noise: Vec::new(),
            assignment: Vec::new(),
        }
    }

    pub fn input_len(&self) -> usize {
        self.noise.len() + self.clusters.iter().map(|c| c.members.len()).sum::<usize>()
    }
}

pub fn normalize(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / norm).collect()
    }
}

/// Cluster one window. `sequences[i]` and `vectors[i]` describe the same
/// source.
pub fn cluster_window(
    window_index: u64,
    sequences: &[PortSequence],
    vectors: &[SequenceVector],
    config: &ClustererConfig,
) -> Result<WindowClustering, ClusterError> {
    config.validate()?;
    cluster_window_with(window_index, sequences, vectors, config, config.clusterer().as_ref())
}

pub fn cluster_window_with(
    window_index: u64,
    sequences: &[PortSequence],
    vectors: &[SequenceVector],
    config: &ClustererConfig,
    clusterer: &dyn BatchClusterer,
) -> Result<WindowClustering, ClusterError> {
    if sequences.len() != vectors.len() {
        return Err(ClusterError::LengthMismatch(sequences.len(), vectors.len()));
    }
    if let Some(first) = vectors.first() {
        let expected = first.vector.len();
        if let Some((index, v)) = vectors.iter().enumerate().find(|(_, v)| v.vector.len() != expected) {
            return Err(ClusterError::DimMismatch {
                index,
                expected,
                found: v.vector.len(),
            });
        }
    }
    let points: Vec<Vec<f64>> = match config.metric {
        Metric::EuclideanOnNormalized => vectors.iter().map(|v| normalize(&v.vector)).collect(),
        Metric::EuclideanRaw => vectors.iter().map(|v| v.vector.clone()).collect(),
    };
    let labels = clusterer.fit(&points);
    Ok(partition(window_index, sequences, &labels, config.port_support))
}

/// Assemble a [`WindowClustering`] from raw labels.
pub fn partition(window_index: u64, sequences: &[PortSequence], labels: &[Option<u32>], port_support: f64) -> WindowClustering {
    let n_clusters = labels.iter().flatten().map(|l| *l as usize + 1).max().unwrap_or(0);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_clusters];
    let mut noise = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        match l {
            Some(c) => members[*c as usize].push(i),
            None => noise.push(sequences[i].key),
        }
    }
    noise.sort_unstable();
    let mut assignment = vec![None; sequences.len()];
    let mut clusters = Vec::new();
    for idx in members.into_iter().filter(|m| !m.is_empty()) {
        let pos = clusters.len();
        idx.iter().for_each(|&i| assignment[i] = Some(pos));
        let mut keys: Vec<SequenceKey> = idx.iter().map(|&i| sequences[i].key).collect();
        keys.sort_unstable();
        let summary = ClusterSummary::from_sequences(idx.iter().map(|&i| sequences[i].ports.as_slice()), port_support);
        clusters.push(Cluster {
            id: pos as u32,
            members: keys,
            summary,
        });
    }
    WindowClustering {
        window_index,
        clusters,
        noise,
        assignment,
    }
}
