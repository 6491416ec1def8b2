use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::alerts::AlertRules;
use crate::cluster::ClustererConfig;
use crate::concepts::RegistryConfig;
use crate::ingest::LogFormat;
use crate::tracker::DEFAULT_JACCARD_THRESHOLD;
use crate::window::{KeyMode, SequenceOptions, WindowConfig, DEFAULT_MAX_SEQUENCE_LEN};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    pub jaccard_threshold: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            jaccard_threshold: DEFAULT_JACCARD_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub embeddings: PathBuf,
    pub state_dir: PathBuf,
    pub format: LogFormat,
    pub min_packets: u64,
    pub lateness_min: u32,
    pub key_mode: KeyMode,
    pub max_sequence_len: usize,
    /// Optional `prefix/len country` table for alert enrichment.
    pub countries: Option<PathBuf>,
    pub window: WindowConfig,
    pub clusterer: ClustererConfig,
    pub tracker: TrackerConfig,
    pub concepts: RegistryConfig,
    pub alerts: AlertRules,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            embeddings: PathBuf::from("embeddings.txt"),
            state_dir: PathBuf::from("state"),
            format: LogFormat::Csv,
            min_packets: 3,
            lateness_min: 5,
            key_mode: KeyMode::Src,
            max_sequence_len: DEFAULT_MAX_SEQUENCE_LEN,
            countries: None,
            window: WindowConfig::default(),
            clusterer: ClustererConfig::default(),
            tracker: TrackerConfig::default(),
            concepts: RegistryConfig::default(),
            alerts: AlertRules::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Load a TOML file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.embeddings);
        resolve(&mut cfg.state_dir);
        if let Some(c) = cfg.countries.as_mut() {
            resolve(c);
        }
        Ok(cfg)
    }

    pub fn sequence_options(&self) -> SequenceOptions {
        SequenceOptions {
            key_mode: self.key_mode,
            max_len: self.max_sequence_len,
        }
    }

    pub fn lateness_ms(&self) -> i64 {
        self.lateness_min as i64 * crate::window::MINUTE_MS
    }

    /// Check every parameter and that referenced files exist.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.min_packets < 1 {
            return bad("min_packets must be at least 1".into());
        }
        if self.max_sequence_len < 1 {
            return bad("max_sequence_len must be at least 1".into());
        }
        let t = self.tracker.jaccard_threshold;
        if !(t > 0.0 && t < 1.0) {
            return bad(format!("tracker.jaccard_threshold {t} outside (0, 1)"));
        }
        let b = self.concepts.beta;
        if !(b > 0.0 && b < 1.0) {
            return bad(format!("concepts.beta {b} outside (0, 1)"));
        }
        self.clusterer.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.alerts.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if !self.embeddings.is_file() {
            return Err(PipelineError::MissingEmbeddings(self.embeddings.clone()));
        }
        if let Some(c) = &self.countries {
            if !c.is_file() {
                return bad(format!("country table {} not found", c.display()));
            }
        }
        Ok(())
    }
}
