//! Append-only record logs plus a current-state index.
//!
//! Layout under the store root:
//!
//! ```text
//! images.jsonl  captions.jsonl  instructions.jsonl  seeds.jsonl
//! batches.jsonl ledger.jsonl    audit.jsonl
//! blobs/<dedup_key>[.ext]       archive/<fingerprint>.txt
//! ```
//!
//! Every mutation appends a full snapshot of the record it touched; on open
//! the logs are replayed and the last line per key wins. An ephemeral store
//! keeps the same index without touching disk.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use parking_lot::{Mutex, RwLock};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costing::{CostUnit, LedgerCounts};
use crate::ingest::{dedup_gate, DedupVerdict};
use crate::model::{
    BatchId, CaptionRecord, DedupKey, ImageId, ImageRecord, ImageState, InstructionRecord,
    Provenance, QuestionType, RecordId, ReviewState, SeedId,
};
use crate::review::ReviewBatch;
use crate::seedbank::SeedQuestion;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{log} line {line}: {source}")]
    Corrupt {
        log: &'static str,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{kind} `{id}` not found")]
    NotFound { kind: &'static str, id: String },
    #[error("{kind} `{id}` is {actual}, expected {expected}")]
    Conflict {
        kind: &'static str,
        id: String,
        expected: String,
        actual: String,
    },
    #[error("illegal image transition {from:?} -> {to:?} for `{id}`")]
    IllegalTransition {
        id: ImageId,
        from: ImageState,
        to: ImageState,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_owned(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Log {
    Images,
    Captions,
    Instructions,
    Seeds,
    Batches,
    Ledger,
    Audit,
}

impl Log {
    const ALL: [Log; 7] = [
        Log::Images,
        Log::Captions,
        Log::Instructions,
        Log::Seeds,
        Log::Batches,
        Log::Ledger,
        Log::Audit,
    ];

    fn file_name(self) -> &'static str {
        match self {
            Log::Images => "images.jsonl",
            Log::Captions => "captions.jsonl",
            Log::Instructions => "instructions.jsonl",
            Log::Seeds => "seeds.jsonl",
            Log::Batches => "batches.jsonl",
            Log::Ledger => "ledger.jsonl",
            Log::Audit => "audit.jsonl",
        }
    }
}

/// One ledger increment as persisted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub unit: CostUnit,
    pub count: u64,
    /// Record the charge is attributed to.
    pub ref_id: String,
}

/// One audited state transition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub seq: u64,
    pub at: DateTime<Utc>,
    pub entity: String,
    pub entity_id: String,
    pub from: String,
    pub to: String,
    pub reviewer: Option<String>,
    pub round: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// Outcome of [`Store::admit_image`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Admission {
    Inserted {
        id: ImageId,
        near_duplicate: bool,
    },
    Duplicate(ImageId),
    /// The same content was seen before and rejected; it stays rejected.
    PreviouslyRejected(ImageId),
}

/// Read view over the image index used by the dedup gate.
pub struct ImageIndex<'a> {
    images: &'a BTreeMap<ImageId, ImageRecord>,
    by_key: &'a HashMap<DedupKey, ImageId>,
}

impl ImageIndex<'_> {
    pub fn live_by_key(&self, key: &DedupKey) -> Option<&ImageRecord> {
        self.by_key.get(key).and_then(|id| self.images.get(id))
    }

    pub fn live(&self) -> impl Iterator<Item = &ImageRecord> {
        self.images
            .values()
            .filter(|r| r.state != ImageState::Rejected)
    }
}

#[derive(Debug, Default, Clone)]
struct State {
    images: BTreeMap<ImageId, ImageRecord>,
    /// dedup key -> id, for non-rejected images only
    by_key: HashMap<DedupKey, ImageId>,
    captions: BTreeMap<ImageId, CaptionRecord>,
    instructions: BTreeMap<RecordId, InstructionRecord>,
    generated_units: BTreeSet<(ImageId, QuestionType)>,
    seeds: BTreeMap<SeedId, SeedQuestion>,
    batches: BTreeMap<BatchId, ReviewBatch>,
    ledger: LedgerCounts,
    audit: Vec<AuditEntry>,
    blobs: HashMap<String, Vec<u8>>,
}

impl State {
    fn put_image(&mut self, rec: ImageRecord) {
        if let Some(old) = self.images.get(&rec.id) {
            if self.by_key.get(&old.dedup_key) == Some(&old.id) {
                self.by_key.remove(&old.dedup_key);
            }
        }
        if rec.state != ImageState::Rejected {
            self.by_key.insert(rec.dedup_key.clone(), rec.id.clone());
        }
        self.images.insert(rec.id.clone(), rec);
    }

    fn put_instruction(&mut self, rec: InstructionRecord) {
        if rec.provenance == Provenance::Generated {
            if let Some(img) = &rec.image_id {
                self.generated_units.insert((img.clone(), rec.qtype));
            }
        }
        self.instructions.insert(rec.id.clone(), rec);
    }

    fn apply_ledger(&mut self, e: &LedgerEntry) {
        match e.unit {
            CostUnit::Caption => self.ledger.caption_count += e.count,
            CostUnit::Instruction => self.ledger.instruction_count += e.count,
            CostUnit::Correction => self.ledger.correction_count += e.count,
        }
    }
}

pub struct Store {
    root: Option<PathBuf>,
    state: RwLock<State>,
    append_lock: Mutex<()>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store")
            .field("root", &self.root)
            .finish_non_exhaustive()
    }
}

fn replay<T: DeserializeOwned>(
    path: &Path,
    log: Log,
    mut apply: impl FnMut(T),
) -> Result<(), StoreError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(io_err(path)(e)),
    };
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|source| StoreError::Corrupt {
            log: log.file_name(),
            line: i + 1,
            source,
        })?;
        apply(value);
    }
    Ok(())
}

impl Store {
    /// Opens (or creates) a store directory and replays its logs.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(root.join("blobs")).map_err(io_err(&root))?;
        let mut st = State::default();
        for log in Log::ALL {
            let path = root.join(log.file_name());
            match log {
                Log::Images => replay(&path, log, |r: ImageRecord| st.put_image(r))?,
                Log::Captions => replay(&path, log, |r: CaptionRecord| {
                    st.captions.insert(r.image_id.clone(), r);
                })?,
                Log::Instructions => {
                    replay(&path, log, |r: InstructionRecord| st.put_instruction(r))?
                }
                Log::Seeds => replay(&path, log, |r: SeedQuestion| {
                    st.seeds.insert(r.id.clone(), r);
                })?,
                Log::Batches => replay(&path, log, |r: ReviewBatch| {
                    st.batches.insert(r.id.clone(), r);
                })?,
                Log::Ledger => replay(&path, log, |e: LedgerEntry| st.apply_ledger(&e))?,
                Log::Audit => replay(&path, log, |e: AuditEntry| st.audit.push(e))?,
            }
        }
        Ok(Self {
            root: Some(root),
            state: RwLock::new(st),
            append_lock: Mutex::new(()),
        })
    }

    /// An in-memory store with no backing files.
    pub fn ephemeral() -> Self {
        Self {
            root: None,
            state: RwLock::new(State::default()),
            append_lock: Mutex::new(()),
        }
    }

    /// Copies the current index into a new ephemeral store.
    pub fn fork_ephemeral(&self) -> Self {
        Self {
            root: None,
            state: RwLock::new(self.state.read().clone()),
            append_lock: Mutex::new(()),
        }
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    fn append<T: Serialize>(&self, log: Log, value: &T) -> Result<(), StoreError> {
        let Some(root) = &self.root else {
            return Ok(());
        };
        let path = root.join(log.file_name());
        let mut line = serde_json::to_string(value).expect("records serialize");
        line.push('\n');
        let _guard = self.append_lock.lock();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        f.write_all(line.as_bytes()).map_err(io_err(&path))
    }

    // ---- images ----

    /// Runs the dedup gate and inserts the candidate if it is accepted.
    /// The check and insert happen under one write lock.
    pub fn admit_image(&self, mut candidate: ImageRecord) -> Result<Admission, StoreError> {
        let mut st = self.state.write();
        if let Some(existing) = st.images.get(&candidate.id) {
            if existing.state == ImageState::Rejected {
                return Ok(Admission::PreviouslyRejected(existing.id.clone()));
            }
        }
        let verdict = dedup_gate(
            &ImageIndex {
                images: &st.images,
                by_key: &st.by_key,
            },
            &candidate,
        );
        match verdict {
            DedupVerdict::Duplicate(existing) => Ok(Admission::Duplicate(existing)),
            DedupVerdict::Accepted { needs_screening } => {
                if needs_screening {
                    candidate.add_flag(crate::model::ImageFlag::NearDuplicate);
                }
                self.append(Log::Images, &candidate)?;
                let id = candidate.id.clone();
                st.put_image(candidate);
                Ok(Admission::Inserted {
                    id,
                    near_duplicate: needs_screening,
                })
            }
        }
    }

    pub fn image(&self, id: &ImageId) -> Option<ImageRecord> {
        self.state.read().images.get(id).cloned()
    }

    pub fn images(&self) -> Vec<ImageRecord> {
        self.state.read().images.values().cloned().collect()
    }

    pub fn images_in_state(&self, state: ImageState) -> Vec<ImageRecord> {
        self.state
            .read()
            .images
            .values()
            .filter(|r| r.state == state)
            .cloned()
            .collect()
    }

    /// Rewrites an image's mutable fields. The state must not change here;
    /// use [`Store::transition_image`] for that.
    pub fn update_image(&self, rec: ImageRecord) -> Result<(), StoreError> {
        let mut st = self.state.write();
        let current = st.images.get(&rec.id).ok_or_else(|| StoreError::NotFound {
            kind: "image",
            id: rec.id.to_string(),
        })?;
        if current.state != rec.state {
            return Err(StoreError::Conflict {
                kind: "image",
                id: rec.id.to_string(),
                expected: format!("{:?}", current.state),
                actual: format!("{:?}", rec.state),
            });
        }
        if *current == rec {
            return Ok(());
        }
        self.append(Log::Images, &rec)?;
        st.put_image(rec);
        Ok(())
    }

    /// Compare-and-swap on image state.
    pub fn transition_image(
        &self,
        id: &ImageId,
        from: ImageState,
        to: ImageState,
    ) -> Result<ImageRecord, StoreError> {
        let mut st = self.state.write();
        let current = st.images.get(id).ok_or_else(|| StoreError::NotFound {
            kind: "image",
            id: id.to_string(),
        })?;
        if current.state != from {
            return Err(StoreError::Conflict {
                kind: "image",
                id: id.to_string(),
                expected: format!("{from:?}"),
                actual: format!("{:?}", current.state),
            });
        }
        if !from.can_transition_to(to) {
            return Err(StoreError::IllegalTransition {
                id: id.clone(),
                from,
                to,
            });
        }
        let mut next = current.clone();
        next.state = to;
        self.append(Log::Images, &next)?;
        st.put_image(next.clone());
        Ok(next)
    }

    // ---- blobs ----

    /// Writes bytes to the content-addressed blob directory and returns the
    /// path relative to the store root.
    pub fn put_blob(
        &self,
        key: &DedupKey,
        ext: Option<&str>,
        bytes: &[u8],
    ) -> Result<String, StoreError> {
        let name = match ext {
            Some(ext) if !ext.is_empty() => format!("{}.{}", key, ext.to_ascii_lowercase()),
            _ => key.to_string(),
        };
        let rel = format!("blobs/{name}");
        match &self.root {
            Some(root) => {
                let path = root.join(&rel);
                if !path.exists() {
                    fs::write(&path, bytes).map_err(io_err(&path))?;
                }
            }
            None => {
                self.state.write().blobs.insert(rel.clone(), bytes.to_vec());
            }
        }
        Ok(rel)
    }

    pub fn read_blob(&self, rel: &str) -> Result<Vec<u8>, StoreError> {
        match &self.root {
            Some(root) => {
                let path = root.join(rel);
                fs::read(&path).map_err(io_err(&path))
            }
            None => self
                .state
                .read()
                .blobs
                .get(rel)
                .cloned()
                .ok_or_else(|| StoreError::NotFound {
                    kind: "blob",
                    id: rel.to_owned(),
                }),
        }
    }

    pub fn blob_exists(&self, rel: &str) -> bool {
        match &self.root {
            Some(root) => root.join(rel).is_file(),
            None => self.state.read().blobs.contains_key(rel),
        }
    }

    /// Saves a raw backend response for audit. Returns the archive path.
    pub fn archive_raw(&self, name: &str, text: &str) -> Result<Option<PathBuf>, StoreError> {
        let Some(root) = &self.root else {
            return Ok(None);
        };
        let dir = root.join("archive");
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let path = dir.join(format!("{name}.txt"));
        fs::write(&path, text).map_err(io_err(&path))?;
        Ok(Some(path))
    }

    // ---- captions ----

    pub fn put_caption(&self, rec: CaptionRecord) -> Result<(), StoreError> {
        let mut st = self.state.write();
        self.append(Log::Captions, &rec)?;
        st.captions.insert(rec.image_id.clone(), rec);
        Ok(())
    }

    pub fn caption(&self, image: &ImageId) -> Option<CaptionRecord> {
        self.state.read().captions.get(image).cloned()
    }

    pub fn captions(&self) -> Vec<CaptionRecord> {
        self.state.read().captions.values().cloned().collect()
    }

    // ---- instructions ----

    /// Inserts unless a record with the same id exists. Returns whether it
    /// was inserted.
    pub fn insert_instruction(&self, rec: InstructionRecord) -> Result<bool, StoreError> {
        let mut st = self.state.write();
        if st.instructions.contains_key(&rec.id) {
            return Ok(false);
        }
        self.append(Log::Instructions, &rec)?;
        st.put_instruction(rec);
        Ok(true)
    }

    /// Inserts a batch of records atomically with respect to other writers.
    /// Records already present are skipped. Returns the inserted count.
    pub fn insert_instructions(&self, recs: Vec<InstructionRecord>) -> Result<usize, StoreError> {
        let mut st = self.state.write();
        let mut n = 0;
        for rec in recs {
            if st.instructions.contains_key(&rec.id) {
                continue;
            }
            self.append(Log::Instructions, &rec)?;
            st.put_instruction(rec);
            n += 1;
        }
        Ok(n)
    }

    pub fn instruction(&self, id: &RecordId) -> Option<InstructionRecord> {
        self.state.read().instructions.get(id).cloned()
    }

    pub fn instructions(&self) -> Vec<InstructionRecord> {
        self.state.read().instructions.values().cloned().collect()
    }

    pub fn has_generated_unit(&self, image: &ImageId, qtype: QuestionType) -> bool {
        self.state
            .read()
            .generated_units
            .contains(&(image.clone(), qtype))
    }

    /// Compare-and-swap on review state.
    pub fn transition_instruction(
        &self,
        id: &RecordId,
        expected: ReviewState,
        next: ReviewState,
    ) -> Result<InstructionRecord, StoreError> {
        let mut st = self.state.write();
        let current = st
            .instructions
            .get(id)
            .ok_or_else(|| StoreError::NotFound {
                kind: "instruction",
                id: id.to_string(),
            })?;
        if current.review_state != expected {
            return Err(StoreError::Conflict {
                kind: "instruction",
                id: id.to_string(),
                expected: format!("{expected:?}"),
                actual: format!("{:?}", current.review_state),
            });
        }
        let mut rec = current.clone();
        rec.review_state = next;
        self.append(Log::Instructions, &rec)?;
        st.put_instruction(rec.clone());
        Ok(rec)
    }

    // ---- seeds ----

    pub fn put_seed(&self, seed: SeedQuestion) -> Result<bool, StoreError> {
        let mut st = self.state.write();
        if st.seeds.get(&seed.id) == Some(&seed) {
            return Ok(false);
        }
        self.append(Log::Seeds, &seed)?;
        st.seeds.insert(seed.id.clone(), seed);
        Ok(true)
    }

    pub fn seeds(&self) -> Vec<SeedQuestion> {
        self.state.read().seeds.values().cloned().collect()
    }

    pub fn seed(&self, id: &SeedId) -> Option<SeedQuestion> {
        self.state.read().seeds.get(id).cloned()
    }

    // ---- batches ----

    pub fn put_batch(&self, batch: ReviewBatch) -> Result<(), StoreError> {
        let mut st = self.state.write();
        self.append(Log::Batches, &batch)?;
        st.batches.insert(batch.id.clone(), batch);
        Ok(())
    }

    pub fn batch(&self, id: &BatchId) -> Option<ReviewBatch> {
        self.state.read().batches.get(id).cloned()
    }

    pub fn batches(&self) -> Vec<ReviewBatch> {
        self.state.read().batches.values().cloned().collect()
    }

    // ---- ledger ----

    pub fn record_cost(
        &self,
        unit: CostUnit,
        count: u64,
        ref_id: impl Into<String>,
    ) -> Result<(), StoreError> {
        if count == 0 {
            return Ok(());
        }
        let entry = LedgerEntry {
            unit,
            count,
            ref_id: ref_id.into(),
        };
        let mut st = self.state.write();
        self.append(Log::Ledger, &entry)?;
        st.apply_ledger(&entry);
        Ok(())
    }

    pub fn ledger_counts(&self) -> LedgerCounts {
        self.state.read().ledger
    }

    // ---- audit ----

    #[allow(clippy::too_many_arguments)]
    pub fn audit(
        &self,
        at: DateTime<Utc>,
        entity: &str,
        entity_id: &str,
        from: &str,
        to: &str,
        reviewer: Option<&str>,
        round: Option<u32>,
        note: Option<&str>,
    ) -> Result<(), StoreError> {
        let mut st = self.state.write();
        let entry = AuditEntry {
            seq: st.audit.len() as u64 + 1,
            at,
            entity: entity.to_owned(),
            entity_id: entity_id.to_owned(),
            from: from.to_owned(),
            to: to.to_owned(),
            reviewer: reviewer.map(str::to_owned),
            round,
            note: note.map(str::to_owned),
        };
        self.append(Log::Audit, &entry)?;
        st.audit.push(entry);
        Ok(())
    }

    pub fn audit_log(&self) -> Vec<AuditEntry> {
        self.state.read().audit.clone()
    }

    /// Total number of persisted records across all record kinds, used to
    /// detect whether a run produced anything new.
    pub fn record_count(&self) -> usize {
        let st = self.state.read();
        st.images.len()
            + st.captions.len()
            + st.instructions.len()
            + st.seeds.len()
            + st.batches.len()
    }
}
