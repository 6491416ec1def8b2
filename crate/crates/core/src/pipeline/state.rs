//! On-disk pipeline state.
//!
//! ```text
//! <state_dir>/state.dante        checkpoint line + concept registry
//! <state_dir>/alerts.jsonl       alert log
//! <state_dir>/windows/NNNNNN.json  one report per window
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::alerts::{Alert, SizeHistory, WindowReport};
use crate::cluster::WindowClustering;
use crate::concepts::{ConceptId, ConceptRegistry, RegistryConfig};
use crate::ingest::TimestampMs;

const STATE_HEADER: &str = "dante-state v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub origin: Option<TimestampMs>,
    pub last_window: Option<u64>,
    /// Clustering of `last_window`, the tracker's left-hand side.
    pub previous: Option<WindowClustering>,
    /// Cluster id in `previous` → its concept.
    pub concept_of: BTreeMap<u32, ConceptId>,
    pub history: SizeHistory,
    pub alert_log_len: u64,
    pub alerts_emitted: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineState {
    pub checkpoint: Checkpoint,
    pub registry: ConceptRegistry,
}

impl PipelineState {
    pub fn fresh(config: RegistryConfig) -> Result<Self, PipelineError> {
        Ok(PipelineState {
            checkpoint: Checkpoint {
                origin: None,
                last_window: None,
                previous: None,
                concept_of: BTreeMap::new(),
                history: SizeHistory::default(),
                alert_log_len: 0,
                alerts_emitted: 0,
            },
            registry: ConceptRegistry::new(config)?,
        })
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<(), PipelineError> {
        writeln!(out, "{STATE_HEADER}")?;
        serde_json::to_writer(&mut out, &self.checkpoint).map_err(io::Error::from)?;
        writeln!(out)?;
        self.registry.save(out)?;
        Ok(())
    }

    pub fn read<R: BufRead>(mut input: R) -> Result<Self, PipelineError> {
        let mut line = String::new();
        input.read_line(&mut line)?;
        if line.trim_end() != STATE_HEADER {
            return Err(PipelineError::State(format!("expected `{STATE_HEADER}` header")));
        }
        line.clear();
        input.read_line(&mut line)?;
        let checkpoint: Checkpoint = serde_json::from_str(&line).map_err(|e| PipelineError::State(format!("checkpoint: {e}")))?;
        let registry = ConceptRegistry::load(input)?;
        Ok(PipelineState { checkpoint, registry })
    }
}

#[derive(Debug, Clone)]
pub struct StateStore {
    dir: PathBuf,
}

impl StateStore {
    pub fn open(dir: &Path) -> Result<Self, PipelineError> {
        fs::create_dir_all(dir.join("windows"))?;
        Ok(StateStore { dir: dir.to_path_buf() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn state_path(&self) -> PathBuf {
        self.dir.join("state.dante")
    }

    pub fn alert_log_path(&self) -> PathBuf {
        self.dir.join("alerts.jsonl")
    }

    pub fn report_path(&self, window: u64) -> PathBuf {
        self.dir.join("windows").join(format!("{window:06}.json"))
    }

    pub fn load_state(&self) -> Result<Option<PipelineState>, PipelineError> {
        match File::open(self.state_path()) {
            Ok(f) => PipelineState::read(BufReader::new(f)).map(Some),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Replace the state file atomically.
    pub fn save_state(&self, state: &PipelineState) -> Result<(), PipelineError> {
        let tmp = self.dir.join("state.dante.tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            state.write(&mut w)?;
            w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        }
        fs::rename(&tmp, self.state_path())?;
        Ok(())
    }

    pub fn write_report(&self, report: &WindowReport) -> Result<(), PipelineError> {
        let mut bytes = serde_json::to_vec(report).map_err(io::Error::from)?;
        bytes.push(b'\n');
        let path = self.report_path(report.window);
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn read_report(&self, window: u64) -> Result<Option<WindowReport>, PipelineError> {
        match fs::read(self.report_path(window)) {
            Ok(b) => Ok(Some(
                serde_json::from_slice(&b).map_err(|e| PipelineError::State(format!("report {window}: {e}")))?,
            )),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Every report on disk with index ≤ `last`, in window order.
    pub fn read_reports(&self, last: Option<u64>) -> Result<BTreeMap<u64, WindowReport>, PipelineError> {
        let mut out = BTreeMap::new();
        let Some(last) = last else { return Ok(out) };
        for entry in fs::read_dir(self.dir.join("windows"))? {
            let name = entry?.file_name();
            let Some(idx) = name.to_str().and_then(|n| n.strip_suffix(".json")).and_then(|n| n.parse::<u64>().ok()) else {
                continue;
            };
            if idx <= last {
                if let Some(r) = self.read_report(idx)? {
                    out.insert(idx, r);
                }
            }
        }
        Ok(out)
    }

    /// Drop reports past the checkpoint and cut the alert log back to the
    /// checkpointed length, undoing work from an interrupted window.
    pub fn rewind(&self, checkpoint: &Checkpoint) -> Result<(), PipelineError> {
        for entry in fs::read_dir(self.dir.join("windows"))? {
            let entry = entry?;
            let name = entry.file_name();
            let name = name.to_str().unwrap_or("");
            let stale = match name.strip_suffix(".json").and_then(|n| n.parse::<u64>().ok()) {
                Some(idx) => checkpoint.last_window.is_none_or(|l| idx > l),
                None => name.ends_with(".tmp"),
            };
            if stale {
                fs::remove_file(entry.path())?;
            }
        }
        let log = self.alert_log_path();
        match OpenOptions::new().write(true).open(&log) {
            Ok(f) => f.set_len(checkpoint.alert_log_len)?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
        Ok(())
    }

    /// Append alerts; returns the new log length.
    pub fn append_alerts(&self, alerts: &[Alert]) -> Result<u64, PipelineError> {
        let mut f = OpenOptions::new().create(true).append(true).open(self.alert_log_path())?;
        let mut buf = String::new();
        for a in alerts {
            buf.push_str(&a.to_json_line());
            buf.push('\n');
        }
        f.write_all(buf.as_bytes())?;
        f.sync_data()?;
        Ok(f.metadata()?.len())
    }

    pub fn read_alerts(&self) -> Result<Vec<Alert>, PipelineError> {
        let f = match File::open(self.alert_log_path()) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        let mut out = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line).map_err(|e| PipelineError::State(format!("alert log line {}: {e}", i + 1)))?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alerts::AlertKind;
    use crate::cluster::ClusterCategory;

    fn alert(window: u64) -> Alert {
        Alert {
            window,
            kind: AlertKind::NovelCluster,
            concept: ConceptId::from_seq(1),
            size: 120,
            category: ClusterCategory::BasicAttack,
            exemplars: vec![vec![445, 445, 445]],
            countries: None,
            ts: "2018-10-26T04:00:00.000Z".into(),
        }
    }

    #[test]
    fn state_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = StateStore::open(dir.path()).unwrap();
        assert!(store.load_state().unwrap().is_none());
        let mut st = PipelineState::fresh(RegistryConfig::default()).unwrap();
        st.checkpoint.origin = Some(1_540_512_000_000);
        st.checkpoint.last_window = Some(3);
        st.checkpoint.previous = Some(WindowClustering::empty(3));
        st.checkpoint.concept_of.insert(0, ConceptId::from_seq(1));
        st.checkpoint.history.record(&ConceptId::from_seq(1), 3, 40, 24);
        store.save_state(&st).unwrap();
        assert_eq!(store.load_state().unwrap().unwrap(), st);
    }

    #[test]
    fn rewind_truncates_log_and_reports() {
        let dir = tempfile::tempdir().unwrap();
        let store = StateStore::open(dir.path()).unwrap();
        let len = store.append_alerts(&[alert(0)]).unwrap();
        store.append_alerts(&[alert(1), alert(1)]).unwrap();
        for w in 0..3 {
            let report = WindowReport {
                v: 1,
                window: w,
                start: String::new(),
                end: String::new(),
                records: 0,
                filtered_records: 0,
                sequences: 0,
                noise: 0,
                clusters: Vec::new(),
                alerts: 0,
            };
            store.write_report(&report).unwrap();
        }
        let mut st = PipelineState::fresh(RegistryConfig::default()).unwrap();
        st.checkpoint.last_window = Some(0);
        st.checkpoint.alert_log_len = len;
        store.rewind(&st.checkpoint).unwrap();
        assert_eq!(store.read_alerts().unwrap(), vec![alert(0)]);
        assert_eq!(store.read_reports(Some(10)).unwrap().keys().copied().collect::<Vec<_>>(), vec![0]);
    }
}
