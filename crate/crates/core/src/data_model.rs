//! Instruction records, deterministic sampling, and JSONL persistence.
//!
//! Every sampling decision in the crate goes through [`ChaCha8Rng`] seeded
//! with [`ChaCha8Rng::seed_from_u64`]. Mini-batches use the run seed with the
//! step number as the ChaCha stream id, so a batch depends only on
//! `(seed, step)` and the pool contents.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Version tag written into every dataset line.
pub const RECORD_SCHEMA: &str = "instruction-record/1";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate id {id:?} on lines {first_line} and {second_line}")]
    DuplicateId {
        id: String,
        first_line: usize,
        second_line: usize,
    },
    #[error("invalid record {id:?}: {reason}")]
    InvalidRecord { id: String, reason: String },
    #[error("requested {requested} records but only {available} are available")]
    Size { requested: usize, available: usize },
    #[error("optimization pool is empty")]
    EmptyPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

impl Turn {
    pub fn user(text: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            text: text.into(),
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            text: text.into(),
        }
    }
}

/// One instruction (optionally with responses), possibly multi-turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub id: String,
    pub turns: Vec<Turn>,
    #[serde(default)]
    pub source: String,
    /// 0 for seed data, k for data evolved k times.
    #[serde(default)]
    pub round: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
}

impl InstructionRecord {
    /// A round-0, single-turn seed record.
    pub fn seed(id: impl Into<String>, instruction: impl Into<String>, source: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            turns: vec![Turn::user(instruction)],
            source: source.into(),
            round: 0,
            parent_id: None,
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let invalid = |reason: &str| DatasetError::InvalidRecord {
            id: self.id.clone(),
            reason: reason.to_string(),
        };
        if self.id.is_empty() {
            return Err(invalid("id is empty"));
        }
        match self.turns.first() {
            None => return Err(invalid("turns is empty")),
            Some(t) if t.role != Role::User => return Err(invalid("first turn must have role user")),
            _ => {}
        }
        match (self.round, &self.parent_id) {
            (0, Some(_)) => Err(invalid("round 0 record must not have a parent_id")),
            (r, None) if r > 0 => Err(invalid("evolved record must have a parent_id")),
            _ => Ok(()),
        }
    }

    /// Text of the last user turn; this is what gets evolved for single-turn data.
    pub fn final_instruction(&self) -> &str {
        self.turns
            .iter()
            .rev()
            .find(|t| t.role == Role::User)
            .map(|t| t.text.as_str())
            .unwrap_or("")
    }

    pub fn user_turns(&self) -> impl Iterator<Item = &str> {
        self.turns
            .iter()
            .filter(|t| t.role == Role::User)
            .map(|t| t.text.as_str())
    }
}

#[derive(Serialize)]
struct RecordLineOut<'a> {
    schema: &'static str,
    #[serde(flatten)]
    record: &'a InstructionRecord,
}

#[derive(Deserialize)]
struct RecordLineIn {
    #[serde(default)]
    schema: Option<String>,
    #[serde(flatten)]
    record: InstructionRecord,
}

/// Parses one dataset line. Lines without a `schema` field are accepted as
/// the current version.
pub fn parse_record_line(line: &str, line_no: usize) -> Result<InstructionRecord, DatasetError> {
    let parsed: RecordLineIn = serde_json::from_str(line).map_err(|e| DatasetError::Parse {
        line: line_no,
        message: e.to_string(),
    })?;
    if let Some(schema) = parsed.schema.as_deref() {
        if schema != RECORD_SCHEMA {
            return Err(DatasetError::Parse {
                line: line_no,
                message: format!("unsupported schema {schema:?}, expected {RECORD_SCHEMA:?}"),
            });
        }
    }
    parsed.record.validate()?;
    Ok(parsed.record)
}

pub fn record_to_line(record: &InstructionRecord) -> String {
    serde_json::to_string(&RecordLineOut {
        schema: RECORD_SCHEMA,
        record,
    })
    .expect("record serialization cannot fail")
}

/// Reads a JSONL dataset. Blank lines are skipped; line numbers are 1-based.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<InstructionRecord>, DatasetError> {
    let path = path.as_ref();
    let io_err = |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut records = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_record_line(&line, line_no)?;
        if let Some(&first_line) = seen.get(&record.id) {
            return Err(DatasetError::DuplicateId {
                id: record.id,
                first_line,
                second_line: line_no,
            });
        }
        seen.insert(record.id.clone(), line_no);
        records.push(record);
    }
    Ok(records)
}

pub fn save_dataset(path: impl AsRef<Path>, records: &[InstructionRecord]) -> Result<(), DatasetError> {
    let path = path.as_ref();
    let io_err = |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for record in records {
        writeln!(out, "{}", record_to_line(record)).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Optimization pool, development set and the full dataset they came from.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub optimization_pool: Vec<InstructionRecord>,
    pub dev_set: Vec<InstructionRecord>,
    pub full_set: Vec<InstructionRecord>,
    pub rng_seed: u64,
}

/// Draws disjoint uniform samples for the pool and the dev set.
pub fn make_split(
    records: &[InstructionRecord],
    pool_size: usize,
    dev_size: usize,
    seed: u64,
) -> Result<DatasetSplit, DatasetError> {
    let requested = pool_size + dev_size;
    if requested > records.len() {
        return Err(DatasetError::Size {
            requested,
            available: records.len(),
        });
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let pick = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect::<Vec<_>>();
    Ok(DatasetSplit {
        optimization_pool: pick(&order[..pool_size]),
        dev_set: pick(&order[pool_size..requested]),
        full_set: records.to_vec(),
        rng_seed: seed,
    })
}

/// Uses a caller-provided dev set and samples the pool from the remaining
/// records (ids in `dev` are excluded from the pool).
pub fn make_split_with_dev(
    records: &[InstructionRecord],
    dev: Vec<InstructionRecord>,
    pool_size: usize,
    seed: u64,
) -> Result<DatasetSplit, DatasetError> {
    let dev_ids: HashSet<&str> = dev.iter().map(|r| r.id.as_str()).collect();
    let candidates: Vec<&InstructionRecord> = records
        .iter()
        .filter(|r| !dev_ids.contains(r.id.as_str()))
        .collect();
    if pool_size > candidates.len() {
        return Err(DatasetError::Size {
            requested: pool_size,
            available: candidates.len(),
        });
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    Ok(DatasetSplit {
        optimization_pool: order[..pool_size].iter().map(|&i| candidates[i].clone()).collect(),
        dev_set: dev,
        full_set: records.to_vec(),
        rng_seed: seed,
    })
}

/// The mini-batch for optimization step `step`.
pub fn next_minibatch(
    split: &DatasetSplit,
    step: u64,
    batch_size: usize,
) -> Result<Vec<InstructionRecord>, DatasetError> {
    let pool = &split.optimization_pool;
    if pool.is_empty() {
        return Err(DatasetError::EmptyPool);
    }
    if batch_size > pool.len() {
        return Err(DatasetError::Size {
            requested: batch_size,
            available: pool.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(split.rng_seed);
    rng.set_stream(step);
    Ok(rand::seq::index::sample(&mut rng, pool.len(), batch_size)
        .into_iter()
        .map(|i| pool[i].clone())
        .collect())
}
