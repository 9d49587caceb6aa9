use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One decoding round as written to the trace file.
///
/// `draft_forwards` is the number of drafter forward passes the round used;
/// `proposed` is the number of candidate nodes in the tree (or chain).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    pub draft_ns: u64,
    pub verify_ns: u64,
    pub draft_forwards: u64,
    pub proposed: u64,
    pub accepted: u64,
    pub committed_tokens: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DecodeTrace {
    pub rounds: Vec<RoundRecord>,
}

impl DecodeTrace {
    pub fn push(&mut self, record: RoundRecord) {
        self.rounds.push(record);
    }

    pub fn len(&self) -> usize {
        self.rounds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }

    pub fn committed_tokens(&self) -> u64 {
        self.rounds.iter().map(|r| r.committed_tokens).sum()
    }

    pub fn accepted_tokens(&self) -> u64 {
        self.rounds.iter().map(|r| r.accepted).sum()
    }

    pub fn draft_forwards(&self) -> u64 {
        self.rounds.iter().map(|r| r.draft_forwards).sum()
    }

    pub fn draft_ns(&self) -> u64 {
        self.rounds.iter().map(|r| r.draft_ns).sum()
    }

    pub fn verify_ns(&self) -> u64 {
        self.rounds.iter().map(|r| r.verify_ns).sum()
    }

    /// Average tokens committed per round; `None` for an empty trace.
    pub fn tau(&self) -> Option<f64> {
        if self.rounds.is_empty() {
            return None;
        }
        Some(self.committed_tokens() as f64 / self.rounds.len() as f64)
    }

    pub fn extend(&mut self, other: &DecodeTrace) {
        self.rounds.extend_from_slice(&other.rounds);
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for r in &self.rounds {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Reads records written by [`write_jsonl`](Self::write_jsonl). Unknown
    /// fields are ignored, so annotated traces read back too.
    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut trace = Self::default();
        for (i, line) in input.lines().enumerate() {
            let line = line.map_err(|e| Error::Parse(format!("trace line {}: {e}", i + 1)))?;
            if line.trim().is_empty() {
                continue;
            }
            let record = serde_json::from_str(&line)
                .map_err(|e| Error::Parse(format!("trace line {}: {e}", i + 1)))?;
            trace.rounds.push(record);
        }
        Ok(trace)
    }
}
