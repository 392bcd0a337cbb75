use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, BackendRequest};
use crate::seeding::record_rng;

/// One row of a recorded-responses file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub request_hash: String,
    pub logits: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
enum Fallback {
    None,
    Seeded(u64),
    Constant(HashMap<char, f64>),
}

/// Table-driven backend. Requests are looked up by [`BackendRequest::hash`];
/// misses fall through to a seeded generator or a constant row when one is
/// configured, and are an error otherwise. Identical requests always get
/// identical logits.
#[derive(Debug, Clone)]
pub struct MockBackend {
    table: HashMap<String, HashMap<char, f64>>,
    fallback: Fallback,
}

fn parse_row(logits: &BTreeMap<String, f64>) -> Result<HashMap<char, f64>, BackendError> {
    logits
        .iter()
        .map(|(label, &v)| {
            let mut chars = label.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) => Ok((c, v)),
                _ => Err(BackendError::UnresolvableLabel(label.clone())),
            }
        })
        .collect()
}

impl MockBackend {
    pub fn from_entries(entries: impl IntoIterator<Item = TableEntry>) -> Result<Self, BackendError> {
        let table = entries
            .into_iter()
            .map(|e| Ok((e.request_hash, parse_row(&e.logits)?)))
            .collect::<Result<_, BackendError>>()?;
        Ok(Self {
            table,
            fallback: Fallback::None,
        })
    }

    /// Reads a line-delimited recorded-responses file.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref();
        let file = File::open(path)
            .map_err(|e| BackendError::Io(format!("cannot read {}: {e}", path.display())))?;
        let mut entries = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| BackendError::Io(format!("{}: {e}", path.display())))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: TableEntry = serde_json::from_str(&line).map_err(|e| {
                BackendError::Malformed(format!("{} line {}: {e}", path.display(), idx + 1))
            })?;
            entries.push(entry);
        }
        Self::from_entries(entries)
    }

    /// Every request gets the same logits.
    pub fn constant(row: impl IntoIterator<Item = (char, f64)>) -> Self {
        Self {
            table: HashMap::new(),
            fallback: Fallback::Constant(row.into_iter().collect()),
        }
    }

    /// Unrecorded requests get pseudo-random logits derived from `seed` and
    /// the request hash.
    pub fn seeded(seed: u64) -> Self {
        Self {
            table: HashMap::new(),
            fallback: Fallback::Seeded(seed),
        }
    }

    pub fn with_seeded_fallback(mut self, seed: u64) -> Self {
        self.fallback = Fallback::Seeded(seed);
        self
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }
}

/// Logits the seeded fallback produces for a request.
pub(crate) fn seeded_row(seed: u64, request: &BackendRequest) -> HashMap<char, f64> {
    let mut rng = record_rng(seed, &["mock", &request.hash()]);
    request
        .labels()
        .iter()
        .map(|&l| (l, rng.random_range(-4.0..4.0)))
        .collect()
}

impl Backend for MockBackend {
    fn label_scores(&self, request: &BackendRequest) -> Result<HashMap<char, f64>, BackendError> {
        let hash = request.hash();
        if let Some(row) = self.table.get(&hash) {
            return Ok(row.clone());
        }
        match &self.fallback {
            Fallback::None => Err(BackendError::NotRecorded(hash)),
            Fallback::Seeded(seed) => Ok(seeded_row(*seed, request)),
            Fallback::Constant(row) => Ok(row.clone()),
        }
    }
}

/// Writes entries as a recorded-responses file.
pub fn write_table(entries: &[TableEntry], path: impl AsRef<Path>) -> std::io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for entry in entries {
        serde_json::to_writer(&mut out, entry)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

impl TableEntry {
    pub fn new(request: &BackendRequest, logits: &[f64]) -> Self {
        Self {
            request_hash: request.hash(),
            logits: request
                .labels()
                .iter()
                .zip(logits)
                .map(|(l, &v)| (l.to_string(), v))
                .collect(),
        }
    }
}
