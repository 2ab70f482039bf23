//! Image collection: web crawl by key phrase, similarity expansion, and
//! open-source manifest import, all funnelled through one dedup gate and
//! into a leased screening queue.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Duration, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    with_retry, FetchError, FetchedImage, ImageFetcher, IndexError, RetryPolicy, SimilarityIndex,
};
use crate::clock::{Clock, SystemClock};
use crate::model::{Domain, ImageId, ImageRecord, ImageState, SourceChannel};
use crate::store::{Admission, ImageIndex, Store, StoreError};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("no key phrases configured for {0}")]
    EmptyKeyPhrases(Domain),
    #[error("key phrase file {path}: {reason}")]
    KeyPhraseFile { path: PathBuf, reason: String },
    #[error("k must be at least 1")]
    InvalidK,
    #[error("anchor image `{0}` not found")]
    AnchorMissing(ImageId),
    #[error("anchor image `{0}` has not passed screening")]
    AnchorNotScreened(ImageId),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("manifest {path}: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("screening queue is empty")]
    EmptyQueue,
    #[error("image `{0}` is not leased to this reviewer")]
    StaleLease(ImageId),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Search phrases for one domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyPhraseSet {
    pub domain: Domain,
    pub phrases: Vec<String>,
}

impl KeyPhraseSet {
    pub fn new(domain: Domain, phrases: Vec<String>) -> Result<Self, IngestError> {
        let phrases: Vec<String> = phrases
            .into_iter()
            .map(|p| p.trim().to_owned())
            .filter(|p| !p.is_empty())
            .collect();
        if phrases.is_empty() {
            return Err(IngestError::EmptyKeyPhrases(domain));
        }
        Ok(Self { domain, phrases })
    }

    /// One phrase per line; `#` starts a comment line.
    pub fn parse(domain: Domain, text: &str) -> Result<Self, IngestError> {
        Self::new(
            domain,
            text.lines()
                .filter(|l| !l.trim_start().starts_with('#'))
                .map(str::to_owned)
                .collect(),
        )
    }

    /// Loads `<dir>/<domain_key>.txt`.
    pub fn load(dir: &Path, domain: Domain) -> Result<Self, IngestError> {
        let path = dir.join(format!("{}.txt", domain.key()));
        let text = fs::read_to_string(&path).map_err(|e| IngestError::KeyPhraseFile {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        Self::parse(domain, &text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimilarityQuery {
    pub anchor_image_id: ImageId,
    pub k: usize,
    pub index_name: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DedupVerdict {
    /// `needs_screening` marks a near-duplicate: same domain and the same
    /// tag multiset as a live image. It is admitted but flagged.
    Accepted {
        needs_screening: bool,
    },
    Duplicate(ImageId),
}

fn tag_multiset(tags: &[String]) -> Vec<String> {
    let mut v: Vec<String> = tags.iter().map(|t| t.trim().to_lowercase()).collect();
    v.sort();
    v
}

/// Exact dedup on the content digest plus the tag-multiset heuristic.
/// Images without tags are never near-duplicate flagged.
pub fn dedup_gate(index: &ImageIndex<'_>, candidate: &ImageRecord) -> DedupVerdict {
    if let Some(existing) = index.live_by_key(&candidate.dedup_key) {
        return DedupVerdict::Duplicate(existing.id.clone());
    }
    if candidate.tags.is_empty() {
        return DedupVerdict::Accepted {
            needs_screening: false,
        };
    }
    let sig = tag_multiset(&candidate.tags);
    let near = index
        .live()
        .any(|r| r.domain == candidate.domain && tag_multiset(&r.tags) == sig);
    DedupVerdict::Accepted {
        needs_screening: near,
    }
}

/// Per-run counters for one collection channel.
///
/// `accepted + duplicates + errors == fetched` always holds.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelReport {
    pub fetched: usize,
    pub accepted: Vec<ImageId>,
    pub duplicates: Vec<(String, ImageId)>,
    pub errors: Vec<String>,
    pub flagged: Vec<ImageId>,
    /// Phrases whose fetch failed after retries.
    pub failed_phrases: Vec<(String, String)>,
    /// Set when the fetcher reported its quota exhausted.
    pub halted: bool,
}

impl ChannelReport {
    pub fn is_conserved(&self) -> bool {
        self.accepted.len() + self.duplicates.len() + self.errors.len() == self.fetched
    }
}

fn uri_extension(uri: &str) -> Option<String> {
    let path = uri.split(['?', '#']).next().unwrap_or(uri);
    let name = path.rsplit('/').next()?;
    let (_, ext) = name.rsplit_once('.')?;
    (!ext.is_empty() && ext.len() <= 5 && ext.chars().all(|c| c.is_ascii_alphanumeric()))
        .then(|| ext.to_ascii_lowercase())
}

fn admit(
    store: &Store,
    report: &mut ChannelReport,
    mut rec: ImageRecord,
    bytes: &[u8],
) -> Result<(), StoreError> {
    report.fetched += 1;
    if bytes.is_empty() {
        report
            .errors
            .push(format!("{}: empty image payload", rec.uri));
        return Ok(());
    }
    rec.blob = Some(store.put_blob(&rec.dedup_key, uri_extension(&rec.uri).as_deref(), bytes)?);
    let uri = rec.uri.clone();
    match store.admit_image(rec)? {
        Admission::Inserted { id, near_duplicate } => {
            if near_duplicate {
                report.flagged.push(id.clone());
            }
            report.accepted.push(id);
        }
        Admission::Duplicate(existing) | Admission::PreviouslyRejected(existing) => {
            report.duplicates.push((uri, existing));
        }
    }
    Ok(())
}

/// Crawls every phrase through the fetcher and admits the results.
pub fn crawl_channel(
    store: &Store,
    phrases: &KeyPhraseSet,
    fetcher: &dyn ImageFetcher,
    retry: &RetryPolicy,
) -> Result<ChannelReport, IngestError> {
    let mut report = ChannelReport::default();
    for phrase in &phrases.phrases {
        let fetched = with_retry(
            retry,
            None,
            |e: &FetchError| matches!(e, FetchError::Unavailable(_)),
            || fetcher.fetch(phrase, phrases.domain),
        );
        let images = match fetched {
            Ok(r) => r.value,
            Err(FetchError::QuotaExceeded) => {
                log::warn!("fetch quota exceeded; halting crawl for {}", phrases.domain);
                report.halted = true;
                break;
            }
            Err(e) => {
                report.failed_phrases.push((phrase.clone(), e.to_string()));
                continue;
            }
        };
        for FetchedImage { uri, bytes, tags } in images {
            let mut rec =
                ImageRecord::collected(&bytes, uri, SourceChannel::WebCrawl, phrases.domain, tags);
            rec.key_phrase = Some(phrase.clone());
            admit(store, &mut report, rec, &bytes)?;
        }
    }
    Ok(report)
}

/// Pulls up to `k` neighbours of a screened anchor from the similarity index.
pub fn expand_similar(
    store: &Store,
    query: &SimilarityQuery,
    index: &dyn SimilarityIndex,
) -> Result<ChannelReport, IngestError> {
    if query.k == 0 {
        return Err(IngestError::InvalidK);
    }
    let anchor = store
        .image(&query.anchor_image_id)
        .ok_or_else(|| IngestError::AnchorMissing(query.anchor_image_id.clone()))?;
    if !matches!(anchor.state, ImageState::Screened | ImageState::Captioned) {
        return Err(IngestError::AnchorNotScreened(anchor.id));
    }
    // one extra in case the index returns the anchor itself
    let neighbors = index.neighbors(&anchor, query.k + 1)?;
    let mut report = ChannelReport::default();
    for n in neighbors
        .into_iter()
        .filter(|n| crate::model::DedupKey::of_bytes(&n.bytes) != anchor.dedup_key)
        .take(query.k)
    {
        let mut rec = ImageRecord::collected(
            &n.bytes,
            n.uri,
            SourceChannel::SimilarityExpansion,
            anchor.domain,
            n.tags,
        );
        rec.anchor_id = Some(anchor.id.clone());
        rec.extra.insert(
            "similarity_index".into(),
            serde_json::Value::String(query.index_name.clone()),
        );
        admit(store, &mut report, rec, &n.bytes)?;
    }
    Ok(report)
}

/// One row of an open-source import manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub uri: String,
    pub domain: Domain,
    #[serde(default)]
    pub tags: Vec<String>,
    #[serde(default)]
    pub ocr_text: Option<String>,
    #[serde(default)]
    pub category: Option<String>,
}

fn resolve_local(base: &Path, uri: &str) -> PathBuf {
    let p = Path::new(uri.strip_prefix("file://").unwrap_or(uri));
    if p.is_absolute() {
        p.to_owned()
    } else {
        base.join(p)
    }
}

/// Imports a JSONL manifest of `{uri, domain, tags}` rows. `uri` is a local
/// path, relative to the manifest's directory unless absolute.
pub fn import_manifest(store: &Store, manifest: &Path) -> Result<ChannelReport, IngestError> {
    let text = fs::read_to_string(manifest).map_err(|source| IngestError::Manifest {
        path: manifest.to_owned(),
        source,
    })?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut report = ChannelReport::default();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: ManifestRow = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                report.fetched += 1;
                report.errors.push(format!("line {}: {e}", i + 1));
                continue;
            }
        };
        let bytes = match fs::read(resolve_local(base, &row.uri)) {
            Ok(b) => b,
            Err(e) => {
                report.fetched += 1;
                report
                    .errors
                    .push(format!("line {}: {}: {e}", i + 1, row.uri));
                continue;
            }
        };
        let mut rec = ImageRecord::collected(
            &bytes,
            row.uri,
            SourceChannel::OpenSource,
            row.domain,
            row.tags,
        );
        rec.ocr_text = row.ocr_text.filter(|t| !t.trim().is_empty());
        rec.category = row.category;
        admit(store, &mut report, rec, &bytes)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Lease {
    reviewer: String,
    expires: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum ScreenVerdict {
    Approve {
        #[serde(default)]
        category: Option<String>,
    },
    Reject,
}

/// Leased queue over collected images awaiting human screening.
pub struct ScreeningQueue {
    leases: Mutex<HashMap<ImageId, Lease>>,
    ttl: Duration,
    clock: Arc<dyn Clock>,
}

impl Default for ScreeningQueue {
    fn default() -> Self {
        Self::new(Duration::minutes(30), Arc::new(SystemClock))
    }
}

impl ScreeningQueue {
    pub fn new(ttl: Duration, clock: Arc<dyn Clock>) -> Self {
        Self {
            leases: Mutex::new(HashMap::new()),
            ttl,
            clock,
        }
    }

    /// Leases up to `limit` collected images to `reviewer`. Images leased to
    /// someone else are skipped until their lease expires.
    pub fn pull(
        &self,
        store: &Store,
        reviewer: &str,
        limit: usize,
    ) -> Result<Vec<ImageRecord>, IngestError> {
        let now = self.clock.now();
        let mut leases = self.leases.lock();
        leases.retain(|_, l| l.expires > now);
        let picked: Vec<ImageRecord> = store
            .images_in_state(ImageState::Collected)
            .into_iter()
            .filter(|r| !leases.contains_key(&r.id))
            .take(limit)
            .collect();
        if picked.is_empty() {
            return Err(IngestError::EmptyQueue);
        }
        for r in &picked {
            leases.insert(
                r.id.clone(),
                Lease {
                    reviewer: reviewer.to_owned(),
                    expires: now + self.ttl,
                },
            );
        }
        Ok(picked)
    }

    /// Applies a screening verdict to an image leased by `reviewer`.
    pub fn resolve(
        &self,
        store: &Store,
        image: &ImageId,
        reviewer: &str,
        verdict: &ScreenVerdict,
    ) -> Result<ImageRecord, IngestError> {
        let now = self.clock.now();
        let mut leases = self.leases.lock();
        match leases.get(image) {
            Some(l) if l.reviewer == reviewer && l.expires > now => {}
            _ => return Err(IngestError::StaleLease(image.clone())),
        }
        let rec = apply_screen_verdict(store, image, verdict, Some(reviewer), now)?;
        leases.remove(image);
        Ok(rec)
    }
}

fn apply_screen_verdict(
    store: &Store,
    image: &ImageId,
    verdict: &ScreenVerdict,
    reviewer: Option<&str>,
    at: DateTime<Utc>,
) -> Result<ImageRecord, IngestError> {
    let (to, label) = match verdict {
        ScreenVerdict::Approve { .. } => (ImageState::Screened, "screened"),
        ScreenVerdict::Reject => (ImageState::Rejected, "rejected"),
    };
    if let ScreenVerdict::Approve { category: Some(c) } = verdict {
        let mut rec = store.image(image).ok_or_else(|| StoreError::NotFound {
            kind: "image",
            id: image.to_string(),
        })?;
        rec.category = Some(c.clone());
        store.update_image(rec)?;
    }
    let rec = store.transition_image(image, ImageState::Collected, to)?;
    store.audit(
        at,
        "image",
        image.as_str(),
        "collected",
        label,
        reviewer,
        None,
        None,
    )?;
    Ok(rec)
}

/// Screens every collected image without a human, approving all except
/// near-duplicate-flagged ones, which are rejected. For hermetic runs only.
pub fn auto_screen(store: &Store, clock: &dyn Clock) -> Result<(usize, usize), IngestError> {
    let mut approved = 0;
    let mut rejected = 0;
    for rec in store.images_in_state(ImageState::Collected) {
        let verdict = if rec.has_flag(crate::model::ImageFlag::NearDuplicate) {
            rejected += 1;
            ScreenVerdict::Reject
        } else {
            approved += 1;
            ScreenVerdict::Approve { category: None }
        };
        apply_screen_verdict(store, &rec.id, &verdict, Some("auto"), clock.now())?;
    }
    Ok((approved, rejected))
}
