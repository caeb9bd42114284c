//! Append-only evaluation log, one JSON object per line.
//!
//! Concurrent searches hand their records to a [`Recorder`], which writes
//! them in a fixed order (history position first, then search order within
//! the stage) regardless of which thread finished first. A log cut short at
//! any point is therefore a prefix of the uninterrupted log.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::OrchestratorError;
use crate::objective::{EvaluationRecord, Status};
use crate::space::Configuration;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DbRecord {
    pub campaign_digest: String,
    pub search_id: String,
    pub index: u64,
    pub assignments: Configuration,
    pub routine_metrics: BTreeMap<String, f64>,
    pub total: f64,
    pub status: Status,
    pub wall_seconds: f64,
    pub timestamp: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl DbRecord {
    pub fn new(digest: &str, search_id: &str, index: u64, rec: &EvaluationRecord) -> Self {
        Self {
            campaign_digest: digest.to_string(),
            search_id: search_id.to_string(),
            index,
            assignments: rec.config.clone(),
            routine_metrics: rec.routine_metrics.clone(),
            total: rec.total,
            status: rec.status,
            wall_seconds: rec.wall_seconds,
            timestamp: rec.timestamp,
            note: rec.note.clone(),
        }
    }

    pub fn to_evaluation(&self) -> EvaluationRecord {
        EvaluationRecord {
            search_id: self.search_id.clone(),
            config: self.assignments.clone(),
            routine_metrics: self.routine_metrics.clone(),
            total: self.total,
            status: self.status,
            wall_seconds: self.wall_seconds,
            timestamp: self.timestamp,
            note: self.note.clone(),
        }
    }
}

type Key = (String, String, u64);

#[derive(Debug)]
pub struct EvaluationDb {
    path: Option<PathBuf>,
    records: Vec<DbRecord>,
    index: HashMap<Key, usize>,
    writer: Option<BufWriter<File>>,
    pub notes: Vec<String>,
}

fn io_err(path: &Path, e: std::io::Error) -> OrchestratorError {
    OrchestratorError::Io(format!("{}: {e}", path.display()))
}

impl EvaluationDb {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            records: vec![],
            index: HashMap::new(),
            writer: None,
            notes: vec![],
        }
    }

    /// Opens (or creates) a log file. A trailing line without a newline is
    /// the remnant of an interrupted write: it is ignored and cut off.
    pub fn open(path: &Path) -> Result<Self, OrchestratorError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
        let (mut db, complete, len) = Self::read(path)?;
        if complete < len {
            let f = OpenOptions::new()
                .write(true)
                .open(path)
                .map_err(|e| io_err(path, e))?;
            f.set_len(complete as u64).map_err(|e| io_err(path, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| io_err(path, e))?;
        db.writer = Some(BufWriter::new(file));
        Ok(db)
    }

    /// Reads a log without ever writing to it.
    pub fn load(path: &Path) -> Result<Self, OrchestratorError> {
        if !path.exists() {
            return Err(OrchestratorError::Io(format!(
                "{}: no such file",
                path.display()
            )));
        }
        Ok(Self::read(path)?.0)
    }

    fn read(path: &Path) -> Result<(Self, usize, usize), OrchestratorError> {
        let mut db = Self::in_memory();
        db.path = Some(path.to_path_buf());
        let mut text = String::new();
        if path.exists() {
            File::open(path)
                .and_then(|mut f| f.read_to_string(&mut text))
                .map_err(|e| io_err(path, e))?;
        }
        let complete = text.rfind('\n').map_or(0, |i| i + 1);
        if complete < text.len() {
            db.notes.push(format!(
                "ignored a partial trailing record ({} bytes)",
                text.len() - complete
            ));
        }
        for (n, line) in text[..complete].lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: DbRecord = serde_json::from_str(line).map_err(|e| {
                OrchestratorError::Parse(format!("{} line {}: {e}", path.display(), n + 1))
            })?;
            db.insert(rec);
        }
        Ok((db, complete, text.len()))
    }

    fn insert(&mut self, rec: DbRecord) {
        let key = (
            rec.campaign_digest.clone(),
            rec.search_id.clone(),
            rec.index,
        );
        self.index.insert(key, self.records.len());
        self.records.push(rec);
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn records(&self) -> &[DbRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn digests(&self) -> Vec<&str> {
        let mut seen = Vec::new();
        for r in &self.records {
            if !seen.contains(&r.campaign_digest.as_str()) {
                seen.push(r.campaign_digest.as_str());
            }
        }
        seen
    }

    pub fn get(&self, digest: &str, search_id: &str, index: u64) -> Option<&DbRecord> {
        self.index
            .get(&(digest.to_string(), search_id.to_string(), index))
            .map(|&i| &self.records[i])
    }

    /// The persisted history of one search: indices `0..k` with no gap.
    pub fn history(&self, digest: &str, search_id: &str) -> Vec<EvaluationRecord> {
        let mut out = Vec::new();
        while let Some(r) = self.get(digest, search_id, out.len() as u64) {
            out.push(r.to_evaluation());
        }
        out
    }

    /// Search ids in first-appearance order.
    pub fn search_ids(&self, digest: &str) -> Vec<String> {
        let mut seen = Vec::new();
        for r in self.records.iter().filter(|r| r.campaign_digest == digest) {
            if !seen.contains(&r.search_id) {
                seen.push(r.search_id.clone());
            }
        }
        seen
    }

    pub fn append(&mut self, rec: DbRecord) -> Result<(), OrchestratorError> {
        if let Some(w) = self.writer.as_mut() {
            let path = self.path.clone().unwrap_or_default();
            let line =
                serde_json::to_string(&rec).map_err(|e| OrchestratorError::Io(e.to_string()))?;
            w.write_all(line.as_bytes())
                .and_then(|_| w.write_all(b"\n"))
                .and_then(|_| w.flush())
                .map_err(|e| io_err(&path, e))?;
        }
        self.insert(rec);
        Ok(())
    }
}

struct Pending {
    slots: Vec<(String, u64)>,
    pos: usize,
    waiting: HashMap<(String, u64), EvaluationRecord>,
    written: usize,
    error: Option<OrchestratorError>,
}

/// Serializes concurrent submissions into the canonical write order.
pub struct Recorder<'db> {
    db: Mutex<&'db mut EvaluationDb>,
    digest: String,
    state: Mutex<Pending>,
    stop_after: Option<usize>,
    stopped: AtomicBool,
}

impl<'db> Recorder<'db> {
    pub fn new(db: &'db mut EvaluationDb, digest: &str, stop_after: Option<usize>) -> Self {
        Self {
            db: Mutex::new(db),
            digest: digest.to_string(),
            state: Mutex::new(Pending {
                slots: vec![],
                pos: 0,
                waiting: HashMap::new(),
                written: 0,
                error: None,
            }),
            stop_after,
            stopped: AtomicBool::new(false),
        }
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    /// Declares the slots of the next group of concurrent searches:
    /// position-major, then in the given search order.
    pub fn begin(&self, searches: &[(String, usize)]) {
        let longest = searches.iter().map(|s| s.1).max().unwrap_or(0);
        let mut st = self.state.lock().expect("recorder lock");
        for i in 0..longest {
            for (id, budget) in searches {
                if i < *budget {
                    st.slots.push((id.clone(), i as u64));
                }
            }
        }
    }

    pub fn history(&self, search_id: &str) -> Vec<EvaluationRecord> {
        self.db
            .lock()
            .expect("db lock")
            .history(&self.digest, search_id)
    }

    pub fn stored(&self, search_id: &str, index: u64) -> Option<EvaluationRecord> {
        self.db
            .lock()
            .expect("db lock")
            .get(&self.digest, search_id, index)
            .map(DbRecord::to_evaluation)
    }

    pub fn stopped(&self) -> bool {
        self.stopped.load(Ordering::SeqCst)
    }

    pub fn written(&self) -> usize {
        self.state.lock().expect("recorder lock").written
    }

    pub fn submit(&self, search_id: &str, index: u64, rec: &EvaluationRecord) -> ControlFlow<()> {
        if self.stopped() {
            return ControlFlow::Break(());
        }
        let mut st = self.state.lock().expect("recorder lock");
        st.waiting
            .insert((search_id.to_string(), index), rec.clone());
        self.advance(&mut st, false);
        if self.stopped() {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    }

    fn write(&self, st: &mut Pending, id: &str, index: u64, rec: &EvaluationRecord) {
        let row = DbRecord::new(&self.digest, id, index, rec);
        if let Err(e) = self.db.lock().expect("db lock").append(row) {
            st.error.get_or_insert(e);
            self.stopped.store(true, Ordering::SeqCst);
            return;
        }
        st.written += 1;
        if self.stop_after.is_some_and(|k| st.written >= k) {
            self.stopped.store(true, Ordering::SeqCst);
        }
    }

    /// Writes every slot that is ready. With `skip_gaps`, slots that will
    /// never be filled (a search ended early) are passed over.
    fn advance(&self, st: &mut Pending, skip_gaps: bool) {
        while st.pos < st.slots.len() && !self.stopped() {
            let (id, index) = st.slots[st.pos].clone();
            let present = self
                .db
                .lock()
                .expect("db lock")
                .get(&self.digest, &id, index)
                .is_some();
            if present {
                st.pos += 1;
                continue;
            }
            match st.waiting.remove(&(id.clone(), index)) {
                Some(rec) => {
                    self.write(st, &id, index, &rec);
                    st.pos += 1;
                }
                None if skip_gaps => st.pos += 1,
                None => break,
            }
        }
    }

    /// Flushes the current group once all its searches have returned.
    pub fn finish_group(&self) -> Result<(), OrchestratorError> {
        let mut st = self.state.lock().expect("recorder lock");
        self.advance(&mut st, true);
        // Anything submitted outside the declared slots goes last, sorted.
        if !self.stopped() && !st.waiting.is_empty() {
            let mut rest: Vec<_> = st.waiting.drain().collect();
            rest.sort_by(|a, b| (a.0 .1, &a.0 .0).cmp(&(b.0 .1, &b.0 .0)));
            let mut done = HashSet::new();
            for ((id, index), rec) in rest {
                if self.stopped() {
                    break;
                }
                if done.insert((id.clone(), index)) {
                    self.write(&mut st, &id, index, &rec);
                }
            }
        }
        st.waiting.clear();
        match st.error.take() {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

/// Replaces `timestamp` and `wall_seconds` so two logs can be compared
/// byte for byte.
pub fn strip_timing(line: &str) -> String {
    match serde_json::from_str::<serde_json::Value>(line) {
        Ok(mut v) => {
            if let Some(o) = v.as_object_mut() {
                o.remove("timestamp");
                o.remove("wall_seconds");
            }
            v.to_string()
        }
        Err(_) => line.to_string(),
    }
}
