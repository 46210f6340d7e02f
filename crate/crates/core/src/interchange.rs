//! Line-delimited JSON interchange between CLI stages: one record per line,
//! tagged by `type`, fields in declaration order.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::probing::RawRunRecord;
use crate::types::{RevelioState, Verdict};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Record {
    RawRun(RawRunRecord),
    State(RevelioState),
    Verdict { device_id: String, verdict: Verdict },
}

#[derive(Debug, Error)]
pub enum InterchangeError {
    #[error("line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn to_line(record: &Record) -> String {
    serde_json::to_string(record).expect("records always serialize")
}

pub fn write_records<'a, W: Write>(mut out: W, records: impl IntoIterator<Item = &'a Record>) -> std::io::Result<()> {
    for r in records {
        writeln!(out, "{}", to_line(r))?;
    }
    out.flush()
}

/// Reads every record; blank lines are skipped.
pub fn read_records<R: BufRead>(input: R) -> Result<Vec<Record>, InterchangeError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|source| InterchangeError::Parse { line: i + 1, source })?;
        out.push(record);
    }
    Ok(out)
}

/// Splits a record stream by kind.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct Partitioned {
    pub raw_runs: Vec<RawRunRecord>,
    pub states: Vec<RevelioState>,
    pub verdicts: Vec<(String, Verdict)>,
}

pub fn partition(records: Vec<Record>) -> Partitioned {
    let mut p = Partitioned::default();
    for r in records {
        match r {
            Record::RawRun(run) => p.raw_runs.push(run),
            Record::State(s) => p.states.push(s),
            Record::Verdict { device_id, verdict } => p.verdicts.push((device_id, verdict)),
        }
    }
    p
}
