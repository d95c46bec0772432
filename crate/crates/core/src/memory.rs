//! The joint memory: an append-only log of prompt-score tuples shared by every
//! agent in a fleet, possibly across processes and machines.
//!
//! Writers serialize through an advisory lock on `<log>.lock`; the sequence
//! number is assigned under that lock, so seq `n` is always the `n`-th line.
//! Readers never lock. They read forward from the last offset they accepted
//! and stop at the first incomplete or corrupt line, which makes every read a
//! prefix of the log.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{rfc3339, EvalStatus, ScoreDraft, ScoreRecord};
use crate::linelog::{self, LineLog};

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("memory store unavailable: {0}")]
    StorageUnavailable(#[from] io::Error),
    #[error("corrupt tail: {tail_bytes} bytes after the last valid record (seq {last_valid_seq:?})")]
    CorruptTail {
        last_valid_seq: Option<u64>,
        valid_bytes: u64,
        tail_bytes: u64,
    },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
}

/// Wire shape of one log line, in the exact member order of the format.
#[derive(Serialize)]
struct RecordLine<'a> {
    seq: u64,
    prompt_id: &'a str,
    prompt_text: &'a str,
    agent_id: &'a str,
    baseline_rig: f64,
    extended_rig: f64,
    relative_score: f64,
    eval_size: u64,
    repeats: u32,
    status: EvalStatus,
    created_at: String,
}

#[derive(Deserialize)]
struct StoredLine {
    seq: u64,
    prompt_id: String,
    prompt_text: String,
    agent_id: String,
    baseline_rig: f64,
    extended_rig: f64,
    relative_score: f64,
    eval_size: u64,
    repeats: u32,
    status: EvalStatus,
    created_at: String,
}

/// Renders one record as a sealed log line, newline included.
pub fn encode_record(record: &ScoreRecord) -> String {
    let line = RecordLine {
        seq: record.seq,
        prompt_id: &record.prompt_id,
        prompt_text: &record.prompt_text,
        agent_id: &record.agent_id,
        baseline_rig: record.baseline_rig,
        extended_rig: record.extended_rig,
        relative_score: record.relative_score,
        eval_size: record.eval_size,
        repeats: record.repeats,
        status: record.status,
        created_at: rfc3339(&record.created_at),
    };
    linelog::seal(&serde_json::to_string(&line).expect("record serializes"))
}

/// Parses a checksum-verified line.
pub fn decode_record(line: &str) -> Result<ScoreRecord, MemoryError> {
    let stored: StoredLine =
        serde_json::from_str(line).map_err(|e| MemoryError::InvalidRecord(e.to_string()))?;
    let created_at = DateTime::parse_from_rfc3339(&stored.created_at)
        .map_err(|e| MemoryError::InvalidRecord(e.to_string()))?
        .with_timezone(&Utc);
    Ok(ScoreRecord {
        seq: stored.seq,
        prompt_id: stored.prompt_id,
        prompt_text: stored.prompt_text,
        agent_id: stored.agent_id,
        baseline_rig: stored.baseline_rig,
        extended_rig: stored.extended_rig,
        relative_score: stored.relative_score,
        eval_size: stored.eval_size,
        repeats: stored.repeats,
        status: stored.status,
        created_at,
    })
}

fn seq_matches(index: u64, line: &str) -> bool {
    matches!(decode_record(line), Ok(r) if r.seq == index)
}

/// What `recover` found and did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Recovery {
    pub valid_records: u64,
    pub truncated_bytes: u64,
}

#[derive(Debug, Default)]
struct ReadCache {
    offset: u64,
    records: Vec<ScoreRecord>,
}

#[derive(Debug)]
pub struct MemoryStore {
    log: LineLog,
    cache: Mutex<ReadCache>,
}

impl MemoryStore {
    /// Opens the store at `path`, creating an empty log if absent.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, MemoryError> {
        Ok(Self {
            log: LineLog::open(path)?,
            cache: Mutex::new(ReadCache::default()),
        })
    }

    pub fn path(&self) -> &Path {
        self.log.path()
    }

    pub fn lock_path(&self) -> PathBuf {
        let mut p = self.log.path().as_os_str().to_owned();
        p.push(".lock");
        PathBuf::from(p)
    }

    /// Appends a record and returns its sequence number. A torn or corrupt
    /// tail left by a crashed writer is truncated first.
    pub fn append(&self, draft: ScoreDraft) -> Result<u64, MemoryError> {
        draft.validate().map_err(MemoryError::InvalidRecord)?;
        let guard = self.log.lock()?;
        let (next_seq, valid_end) = self.refresh()?;
        let len = self.log.len()?;
        if len > valid_end {
            warn!(
                "{}: dropping {} unreadable tail bytes before append",
                self.log.path().display(),
                len - valid_end
            );
            self.log.truncate_to(&guard, valid_end)?;
        }
        let record = ScoreRecord::from_draft(next_seq, draft);
        self.log.append_line(&guard, &encode_record(&record), true)?;
        Ok(next_seq)
    }

    /// Truncates an unreadable tail under the write lock.
    pub fn recover(&self) -> Result<Recovery, MemoryError> {
        let guard = self.log.lock()?;
        let (count, valid_end) = self.refresh()?;
        let len = self.log.len()?;
        if len > valid_end {
            self.log.truncate_to(&guard, valid_end)?;
        }
        Ok(Recovery {
            valid_records: count,
            truncated_bytes: len.saturating_sub(valid_end),
        })
    }

    /// Reports a corrupt tail without touching the file.
    pub fn check_tail(&self) -> Result<(), MemoryError> {
        let (count, valid_end) = self.refresh()?;
        let len = self.log.len()?;
        if len > valid_end {
            return Err(MemoryError::CorruptTail {
                last_valid_seq: count.checked_sub(1),
                valid_bytes: valid_end,
                tail_bytes: len - valid_end,
            });
        }
        Ok(())
    }

    /// Pulls newly appended records into the read cache; returns
    /// (record count, offset past the last valid record).
    fn refresh(&self) -> Result<(u64, u64), MemoryError> {
        let mut cache = self.cache.lock().expect("memory cache poisoned");
        let len = self.log.len()?;
        if len < cache.offset {
            // Only a tail past the valid prefix is ever truncated, so a
            // shrink below our offset means the file was replaced.
            *cache = ReadCache::default();
        }
        let scan = self
            .log
            .read_from(cache.offset, cache.records.len() as u64, &seq_matches)?;
        for line in &scan.lines {
            cache.records.push(decode_record(line)?);
        }
        cache.offset = scan.valid_end;
        Ok((cache.records.len() as u64, cache.offset))
    }

    fn with_records<T>(&self, f: impl FnOnce(&[ScoreRecord]) -> T) -> Result<T, MemoryError> {
        self.refresh()?;
        let cache = self.cache.lock().expect("memory cache poisoned");
        Ok(f(&cache.records))
    }

    /// Every valid record, in seq order.
    pub fn records(&self) -> Result<Vec<ScoreRecord>, MemoryError> {
        self.with_records(|r| r.to_vec())
    }

    /// Records with seq strictly greater than `after`; `None` reads from the
    /// start.
    pub fn read_since(&self, after: Option<u64>) -> Result<Vec<ScoreRecord>, MemoryError> {
        self.with_records(|r| {
            let start = after.map_or(0, |s| (s + 1).min(r.len() as u64) as usize);
            r[start..].to_vec()
        })
    }

    pub fn len(&self) -> Result<u64, MemoryError> {
        self.with_records(|r| r.len() as u64)
    }

    pub fn is_empty(&self) -> Result<bool, MemoryError> {
        Ok(self.len()? == 0)
    }

    pub fn last_seq(&self) -> Result<Option<u64>, MemoryError> {
        self.with_records(|r| r.last().map(|rec| rec.seq))
    }

    /// The `k` best ok records, highest score first, older first on ties.
    pub fn top_k(&self, k: usize) -> Result<Vec<ScoreRecord>, MemoryError> {
        self.with_records(|r| ranked(r, k, Ordering::reverse))
    }

    /// The `k` worst ok records, lowest score first, older first on ties.
    pub fn bottom_k(&self, k: usize) -> Result<Vec<ScoreRecord>, MemoryError> {
        self.with_records(|r| ranked(r, k, |o| o))
    }

    pub fn contains(&self, prompt_id: &str) -> Result<bool, MemoryError> {
        self.with_records(|r| r.iter().any(|rec| rec.prompt_id == prompt_id))
    }

    /// Distinct ok prompt texts, first occurrence order.
    pub fn ok_prompts(&self) -> Result<Vec<String>, MemoryError> {
        self.with_records(|r| {
            let mut seen = HashSet::new();
            r.iter()
                .filter(|rec| rec.is_ok() && seen.insert(rec.prompt_id.as_str()))
                .map(|rec| rec.prompt_text.clone())
                .collect()
        })
    }

    pub fn best_score(&self) -> Result<Option<f64>, MemoryError> {
        Ok(self.top_k(1)?.first().map(|r| r.relative_score))
    }
}

/// Selection of the `k` extreme ok records. `dir` maps the ascending score
/// order to the wanted one; seq always breaks ties ascending.
pub fn ranked(
    records: &[ScoreRecord],
    k: usize,
    dir: impl Fn(Ordering) -> Ordering,
) -> Vec<ScoreRecord> {
    let mut ok: Vec<&ScoreRecord> = records.iter().filter(|r| r.is_ok()).collect();
    ok.sort_by(|a, b| {
        dir(a.relative_score.total_cmp(&b.relative_score)).then(a.seq.cmp(&b.seq))
    });
    ok.into_iter().take(k).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::validate_template;
    use std::io::Write;

    pub(crate) fn draft(score: f64) -> ScoreDraft {
        let t = validate_template(&format!("p{score} {{raw_text}}")).unwrap();
        ScoreDraft::ok(&t, "a1", 0.1, 0.1 + score, 100, 1)
    }

    fn store() -> (tempfile::TempDir, MemoryStore) {
        let dir = tempfile::tempdir().unwrap();
        let s = MemoryStore::open(dir.path().join("memory.log")).unwrap();
        (dir, s)
    }

    #[test]
    fn first_append_is_seq_zero() {
        let (_d, s) = store();
        assert!(s.read_since(None).unwrap().is_empty());
        assert!(s.read_since(Some(0)).unwrap().is_empty());
        assert_eq!(s.append(draft(0.01)).unwrap(), 0);
        assert_eq!(s.append(draft(0.02)).unwrap(), 1);
        let since0 = s.read_since(Some(0)).unwrap();
        assert_eq!(since0.len(), 1);
        assert_eq!(since0[0].seq, 1);
    }

    #[test]
    fn line_format_is_exact() {
        let (_d, s) = store();
        let t = validate_template("x {raw_text}").unwrap();
        let mut d = ScoreDraft::ok(&t, "a1", 0.25, 0.5, 20, 3);
        d.created_at = DateTime::parse_from_rfc3339("2025-01-02T03:04:05.678Z")
            .unwrap()
            .with_timezone(&Utc);
        s.append(d).unwrap();
        let text = std::fs::read_to_string(s.path()).unwrap();
        let expected_body = format!(
            "{{\"seq\":0,\"prompt_id\":\"{}\",\"prompt_text\":\"x {{raw_text}}\",\"agent_id\":\"a1\",\
             \"baseline_rig\":0.25,\"extended_rig\":0.5,\"relative_score\":0.25,\"eval_size\":20,\
             \"repeats\":3,\"status\":\"ok\",\"created_at\":\"2025-01-02T03:04:05.678Z\"",
            t.id
        );
        assert!(text.starts_with(&expected_body), "{text}");
        let crc = format!("{:08x}", crc32fast::hash(expected_body.as_bytes()));
        assert_eq!(text, format!("{expected_body},\"crc\":\"{crc}\"}}\n"));
    }

    #[test]
    fn top_and_bottom_order() {
        let (_d, s) = store();
        for v in [0.01, -0.02, 0.03] {
            s.append(draft(v)).unwrap();
        }
        let top: Vec<f64> = s.top_k(2).unwrap().iter().map(|r| r.relative_score).collect();
        assert_eq!(top.len(), 2);
        assert!((top[0] - 0.03).abs() < 1e-12 && (top[1] - 0.01).abs() < 1e-12);
        assert_eq!(s.top_k(10).unwrap().len(), 3);
        assert_eq!(s.bottom_k(1).unwrap()[0].seq, 1);
    }

    #[test]
    fn failed_records_do_not_rank() {
        let (_d, s) = store();
        let t = validate_template("f {raw_text}").unwrap();
        s.append(ScoreDraft::failed(&t, "a1", EvalStatus::ExtractionFailed))
            .unwrap();
        assert!(s.top_k(5).unwrap().is_empty());
        assert!(s.contains(&t.id).unwrap());
    }

    #[test]
    fn contains_after_append() {
        let (_d, s) = store();
        let d = draft(0.5);
        let id = d.prompt_id.clone();
        assert!(!s.contains(&id).unwrap());
        s.append(d).unwrap();
        assert!(s.contains(&id).unwrap());
    }

    #[test]
    fn torn_tail_recovers_and_continues_sequence() {
        let (_d, s) = store();
        for v in [0.1, 0.2, 0.3] {
            s.append(draft(v)).unwrap();
        }
        let mut f = std::fs::OpenOptions::new().append(true).open(s.path()).unwrap();
        f.write_all(b"{\"seq\":3,\"prompt_id\":\"ab").unwrap();
        drop(f);
        // a fresh handle sees the same valid prefix
        let other = MemoryStore::open(s.path()).unwrap();
        assert_eq!(other.len().unwrap(), 3);
        assert!(matches!(
            other.check_tail(),
            Err(MemoryError::CorruptTail { last_valid_seq: Some(2), .. })
        ));
        assert_eq!(other.append(draft(0.4)).unwrap(), 3);
        other.check_tail().unwrap();
        assert_eq!(s.records().unwrap().len(), 4);
    }

    #[test]
    fn invalid_drafts_are_rejected() {
        let (_d, s) = store();
        let mut d = draft(0.1);
        d.relative_score = 0.7;
        assert!(matches!(s.append(d), Err(MemoryError::InvalidRecord(_))));
    }
}
