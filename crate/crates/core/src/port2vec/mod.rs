//! Port embeddings.
//!
//! Ports are treated as words and per-source port sequences as sentences.
//! [`train`] learns one vector per port with skip-gram and negative
//! sampling; [`EmbeddingTable::embed`] turns a whole sequence into the
//! arithmetic mean of its port vectors.
//!
//! Only the port → vector table is kept after training. It is exported as
//! plain text:
//!
//! ```text
//! dante-embeddings v1 dim=3
//! # trained_on corpus=0123abcd... config=4567ef01...
//! 23 0.11 -0.5 0.25
//! 2323 0.1 -0.49 0.3
//! __RARE__ 0.001 0.002 -0.003
//! ```

mod train;

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::window::{PortSequence, SequenceKey};

pub use train::{train, TrainConfig};

pub const RARE_TOKEN: &str = "__RARE__";
const HEADER_PREFIX: &str = "dante-embeddings v1 dim=";

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("training corpus has fewer than two distinct tokens; no context pairs")]
    NoContext,
    #[error("invalid training configuration: {0}")]
    BadConfig(&'static str),
    #[error("cannot embed an empty sequence")]
    EmptySequence,
    #[error("port {0} is not in the embedding table")]
    UnknownPort(u16),
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Provenance of a trained table: corpus fingerprint and config digest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainedOn {
    pub corpus: String,
    pub config: String,
}

/// Port → vector map produced by training. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    entries: BTreeMap<u16, Vec<f32>>,
    rare: Option<Vec<f32>>,
    trained_on: Option<TrainedOn>,
}

/// Mean port vector of one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceVector {
    pub key: SequenceKey,
    pub window_index: u64,
    pub vector: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(
        dim: usize,
        entries: BTreeMap<u16, Vec<f32>>,
        rare: Option<Vec<f32>>,
    ) -> Result<Self, EmbeddingError> {
        let table = EmbeddingTable {
            dim,
            entries,
            rare,
            trained_on: None,
        };
        table.validate()?;
        Ok(table)
    }

    fn validate(&self) -> Result<(), EmbeddingError> {
        let bad = |msg: String| EmbeddingError::Format { line: 0, msg };
        for (port, v) in self.entries.iter().map(|(p, v)| (Some(*p), v)).chain(self.rare.iter().map(|v| (None, v))) {
            if v.len() != self.dim {
                return Err(bad(format!("vector for {port:?} has {} components, expected {}", v.len(), self.dim)));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(bad(format!("vector for {port:?} has non-finite components")));
            }
        }
        Ok(())
    }

    pub(crate) fn with_provenance(mut self, trained_on: TrainedOn) -> Self {
        self.trained_on = Some(trained_on);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of entries including the rare-port vector.
    pub fn len(&self) -> usize {
        self.entries.len() + usize::from(self.rare.is_some())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ports(&self) -> impl Iterator<Item = u16> + '_ {
        self.entries.keys().copied()
    }

    pub fn trained_on(&self) -> Option<&TrainedOn> {
        self.trained_on.as_ref()
    }

    pub fn contains(&self, port: u16) -> bool {
        self.entries.contains_key(&port)
    }

    pub fn rare_vector(&self) -> Option<&[f32]> {
        self.rare.as_deref()
    }

    /// Vector for `port`, falling back to the rare-port vector.
    pub fn lookup(&self, port: u16) -> Result<&[f32], EmbeddingError> {
        self.entries
            .get(&port)
            .or(self.rare.as_ref())
            .map(Vec::as_slice)
            .ok_or(EmbeddingError::UnknownPort(port))
    }

    /// Mean of the port vectors of `ports`, accumulated in f64.
    pub fn embed_ports(&self, ports: &[u16]) -> Result<Vec<f64>, EmbeddingError> {
        if ports.is_empty() {
            return Err(EmbeddingError::EmptySequence);
        }
        let mut acc = vec![0.0f64; self.dim];
        for &p in ports {
            for (a, x) in acc.iter_mut().zip(self.lookup(p)?) {
                *a += *x as f64;
            }
        }
        let k = ports.len() as f64;
        acc.iter_mut().for_each(|a| *a /= k);
        Ok(acc)
    }

    pub fn embed(&self, seq: &PortSequence) -> Result<SequenceVector, EmbeddingError> {
        Ok(SequenceVector {
            key: seq.key,
            window_index: seq.window_index,
            vector: self.embed_ports(&seq.ports)?,
        })
    }

    /// Top-`k` ports by cosine similarity to `port`, excluding `port` itself.
    /// Ties go to the lower port number.
    pub fn nearest_ports(&self, port: u16, k: usize) -> Result<Vec<(u16, f64)>, EmbeddingError> {
        let query = self.entries.get(&port).ok_or(EmbeddingError::UnknownPort(port))?;
        let mut scored: Vec<(u16, f64)> = self
            .entries
            .iter()
            .filter(|(p, _)| **p != port)
            .map(|(p, v)| (*p, cosine(query, v)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(scored)
    }

    pub fn cosine(&self, a: u16, b: u16) -> Result<f64, EmbeddingError> {
        Ok(cosine(self.lookup(a)?, self.lookup(b)?))
    }

    pub fn export<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "{HEADER_PREFIX}{}", self.dim)?;
        if let Some(t) = &self.trained_on {
            writeln!(out, "# trained_on corpus={} config={}", t.corpus, t.config)?;
        }
        let mut line = String::new();
        let rows = self
            .entries
            .iter()
            .map(|(p, v)| (p.to_string(), v))
            .chain(self.rare.iter().map(|v| (RARE_TOKEN.to_string(), v)));
        for (token, v) in rows {
            line.clear();
            line.push_str(&token);
            for x in v {
                line.push(' ');
                line.push_str(&x.to_string());
            }
            writeln!(out, "{line}")?;
        }
        out.flush()
    }

    pub fn import<R: BufRead>(input: R) -> Result<Self, EmbeddingError> {
        let mut lines = input.lines().enumerate();
        let fmt_err = |line: usize, msg: String| EmbeddingError::Format { line, msg };
        let header = match lines.next() {
            Some((_, l)) => l?,
            None => return Err(fmt_err(1, "missing header".into())),
        };
        let dim: usize = header
            .trim()
            .strip_prefix(HEADER_PREFIX)
            .and_then(|d| d.parse().ok())
            .filter(|d| *d > 0)
            .ok_or_else(|| fmt_err(1, format!("bad header `{header}`")))?;

        let mut entries = BTreeMap::new();
        let mut rare = None;
        let mut trained_on = None;
        for (i, line) in lines {
            let line_no = i + 1;
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix("# trained_on ") {
                let mut corpus = None;
                let mut config = None;
                for kv in meta.split_whitespace() {
                    match kv.split_once('=') {
                        Some(("corpus", v)) => corpus = Some(v.to_string()),
                        Some(("config", v)) => config = Some(v.to_string()),
                        _ => {}
                    }
                }
                if let (Some(corpus), Some(config)) = (corpus, config) {
                    trained_on = Some(TrainedOn { corpus, config });
                }
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            let mut fields = line.split_ascii_whitespace();
            let token = fields.next().unwrap_or_default();
            let vector: Vec<f32> = fields
                .map(|f| f.parse::<f32>())
                .collect::<Result<_, _>>()
                .map_err(|e| fmt_err(line_no, format!("bad component: {e}")))?;
            if vector.len() != dim {
                return Err(fmt_err(
                    line_no,
                    format!("expected {dim} components, found {}", vector.len()),
                ));
            }
            if vector.iter().any(|x| !x.is_finite()) {
                return Err(fmt_err(line_no, "non-finite component".into()));
            }
            if token == RARE_TOKEN {
                if rare.replace(vector).is_some() {
                    return Err(fmt_err(line_no, "duplicate rare-port entry".into()));
                }
            } else {
                let port: u16 = token
                    .parse()
                    .map_err(|_| fmt_err(line_no, format!("bad port `{token}`")))?;
                if entries.insert(port, vector).is_some() {
                    return Err(fmt_err(line_no, format!("duplicate port {port}")));
                }
            }
        }
        Ok(EmbeddingTable {
            dim,
            entries,
            rare,
            trained_on,
        })
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}
