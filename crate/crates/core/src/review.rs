//! Multi-round human correction over (image, caption, instruction) triples.
//!
//! A batch is opened over unreviewed records of one domain. Each round is a
//! full pass over the batch's active tasks in a freshly shuffled order.
//! Reviewers lease one task at a time and submit approve, correct, or
//! reject. A batch is accepted only when at least `min_rounds` rounds have
//! completed and the last one made no corrections and no rejections.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use chrono::{DateTime, Duration, Utc};
use parking_lot::Mutex;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, SystemClock};
use crate::costing::CostUnit;
use crate::model::{
    content_digest, validate_record, BatchId, Domain, Extra, ImageId, IndicatorSuffixTable,
    InstructionRecord, Provenance, QuestionType, RecordId, ReviewState, TaskId, Turn,
    ValidationReport,
};
use crate::store::{Store, StoreError};

/// "three or more rounds of rework"
pub const MIN_ROUNDS_FLOOR: u32 = 3;

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("no records selected")]
    EmptySelection,
    #[error("record `{0}` is not unreviewed")]
    AlreadyInReview(RecordId),
    #[error("record `{0}` not found")]
    UnknownRecord(RecordId),
    #[error("record `{record}` belongs to {actual}, not {expected}")]
    DomainMismatch {
        record: RecordId,
        expected: Domain,
        actual: Domain,
    },
    #[error("min_rounds {0} is below the floor of {MIN_ROUNDS_FLOOR}")]
    MinRoundsTooLow(u32),
    #[error("batch `{0}` not found")]
    BatchNotFound(BatchId),
    #[error("task `{0}` not found")]
    TaskNotFound(TaskId),
    #[error("batch `{0}` has no round in progress")]
    BatchNotInRound(BatchId),
    #[error("every remaining task in batch `{0}` is leased to another reviewer")]
    LeaseConflict(BatchId),
    #[error("task `{0}` is not leased to this reviewer")]
    StaleLease(TaskId),
    #[error("correction is invalid: {}", .0.codes().join(", "))]
    InvalidCorrection(ValidationReport),
    #[error("correction changes nothing")]
    EmptyCorrection,
    #[error("round incomplete in batch `{batch}`: {remaining} tasks outstanding")]
    RoundIncomplete { batch: BatchId, remaining: usize },
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchState {
    Open,
    InRound,
    Accepted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSlot {
    pub task_id: TaskId,
    pub original_record_id: RecordId,
    /// Latest version of the record; changes on correction.
    pub record_id: RecordId,
    /// False once the record has been rejected.
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskLease {
    pub reviewer: String,
    pub expires: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundProgress {
    /// 1-based round number.
    pub index: u32,
    pub order: Vec<TaskId>,
    pub leases: BTreeMap<TaskId, TaskLease>,
    pub done: BTreeSet<TaskId>,
    pub corrections: u32,
    pub rejections: u32,
}

impl RoundProgress {
    fn is_clean(&self) -> bool {
        self.corrections == 0 && self.rejections == 0
    }

    fn remaining(&self) -> usize {
        self.order.len() - self.done.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub index: u32,
    pub order: Vec<TaskId>,
    pub corrections: u32,
    pub rejections: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewBatch {
    pub id: BatchId,
    pub domain: Domain,
    pub task_ids: Vec<TaskId>,
    pub slots: Vec<TaskSlot>,
    pub rounds_completed: u32,
    pub min_rounds: u32,
    pub state: BatchState,
    pub rng_seed: u64,
    pub round: Option<RoundProgress>,
    pub history: Vec<RoundSummary>,
}

impl ReviewBatch {
    pub fn slot(&self, task: &TaskId) -> Option<&TaskSlot> {
        self.slots.iter().find(|s| &s.task_id == task)
    }

    fn slot_mut(&mut self, task: &TaskId) -> Option<&mut TaskSlot> {
        self.slots.iter_mut().find(|s| &s.task_id == task)
    }

    pub fn active_tasks(&self) -> Vec<TaskId> {
        self.slots
            .iter()
            .filter(|s| s.active)
            .map(|s| s.task_id.clone())
            .collect()
    }

    pub fn summary(&self) -> BatchSummary {
        BatchSummary {
            id: self.id.clone(),
            domain: self.domain,
            tasks: self.slots.len(),
            active_tasks: self.slots.iter().filter(|s| s.active).count(),
            rounds_completed: self.rounds_completed,
            min_rounds: self.min_rounds,
            state: self.state,
            current_round: self.round.as_ref().map(|r| r.index),
            remaining_in_round: self.round.as_ref().map(RoundProgress::remaining),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub id: BatchId,
    pub domain: Domain,
    pub tasks: usize,
    pub active_tasks: usize,
    pub rounds_completed: u32,
    pub min_rounds: u32,
    pub state: BatchState,
    pub current_round: Option<u32>,
    pub remaining_in_round: Option<usize>,
}

/// Per-domain checklist shown to reviewers. Guidance only; verdicts are
/// never derived from it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcceptanceCriteria {
    pub domain: Domain,
    pub checklist: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CriteriaTable {
    pub general: Vec<String>,
    pub domains: BTreeMap<Domain, Vec<String>>,
}

impl Default for CriteriaTable {
    fn default() -> Self {
        let general = [
            "The question fits the domain and the question type.",
            "The answer is correct and supported by the image and the caption.",
            "Question and answer contain no hallucinated details.",
            "Question and answer are free of grammatical errors.",
            "A multiple-choice question has four options and exactly one is correct.",
        ];
        let ocr = [
            "The text in the image is recognized correctly.",
            "The text content is recognized comprehensively.",
            "The order of the text output corresponds to its position in the image.",
        ];
        Self {
            general: general.map(String::from).to_vec(),
            domains: BTreeMap::from([(Domain::Ocr, ocr.map(String::from).to_vec())]),
        }
    }
}

impl CriteriaTable {
    pub fn for_domain(&self, domain: Domain) -> AcceptanceCriteria {
        let mut checklist = self.general.clone();
        checklist.extend(self.domains.get(&domain).into_iter().flatten().cloned());
        AcceptanceCriteria { domain, checklist }
    }
}

/// Edited fields of a correction. Absent fields keep their current value.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Correction {
    pub question: Option<String>,
    pub options: Option<Vec<String>>,
    pub correct_option: Option<u8>,
    pub answer: Option<String>,
    pub turns: Option<Vec<Turn>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Approve,
    Correct {
        correction: Correction,
    },
    Reject {
        #[serde(default)]
        reason: Option<String>,
    },
}

impl Verdict {
    fn label(&self) -> &'static str {
        match self {
            Verdict::Approve => "approved",
            Verdict::Correct { .. } => "corrected",
            Verdict::Reject { .. } => "rejected",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub image_id: ImageId,
    pub uri: String,
    pub blob: Option<String>,
}

/// A leased unit of review work.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewTask {
    pub id: TaskId,
    pub batch_id: BatchId,
    pub round_index: u32,
    pub reviewer_id: String,
    pub lease_expires: DateTime<Utc>,
    pub image: Option<ImageRef>,
    pub caption: Option<String>,
    pub record: InstructionRecord,
    pub checklist: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum NextTask {
    Task(Box<ReviewTask>),
    RoundComplete {
        batch_id: BatchId,
        round_index: u32,
        rounds_completed: u32,
        min_rounds: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictOutcome {
    pub task_id: TaskId,
    pub verdict: String,
    /// The record now standing for this task.
    pub record: InstructionRecord,
    pub superseded: Option<RecordId>,
    pub batch: BatchSummary,
}

/// Task order for `round`: a seeded shuffle of `tasks`, rotated by one if
/// it would repeat `previous` exactly.
pub fn round_order(
    rng_seed: u64,
    round: u32,
    tasks: &[TaskId],
    previous: Option<&[TaskId]>,
) -> Vec<TaskId> {
    let mut order = tasks.to_vec();
    let mut rng =
        ChaCha8Rng::seed_from_u64(rng_seed ^ u64::from(round).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    if order.len() >= 2 && previous.is_some_and(|p| p == order.as_slice()) {
        order.rotate_left(1);
    }
    order
}

pub fn batch_id(domain: Domain, records: &[RecordId], min_rounds: u32, rng_seed: u64) -> BatchId {
    let mut parts = vec![
        "batch".to_owned(),
        domain.key().to_owned(),
        min_rounds.to_string(),
        rng_seed.to_string(),
    ];
    parts.extend(records.iter().map(|r| r.0.clone()));
    BatchId(content_digest(&parts))
}

pub fn task_id(batch: &BatchId, record: &RecordId) -> TaskId {
    TaskId(content_digest(&["task", batch.as_str(), record.as_str()]))
}

/// Unreviewed records of a domain in id order, at most `limit`.
pub fn select_unreviewed(store: &Store, domain: Domain, limit: usize) -> Vec<RecordId> {
    store
        .instructions()
        .into_iter()
        .filter(|r| r.domain == domain && r.review_state == ReviewState::Unreviewed)
        .map(|r| r.id)
        .take(limit)
        .collect()
}

pub struct ReviewService {
    store: Arc<Store>,
    clock: Arc<dyn Clock>,
    lease_ttl: Duration,
    suffixes: IndicatorSuffixTable,
    criteria: CriteriaTable,
    lock: Mutex<()>,
}

impl ReviewService {
    pub fn new(store: Arc<Store>) -> Self {
        Self {
            store,
            clock: Arc::new(SystemClock),
            lease_ttl: Duration::minutes(30),
            suffixes: IndicatorSuffixTable::default(),
            criteria: CriteriaTable::default(),
            lock: Mutex::new(()),
        }
    }

    pub fn with_clock(mut self, clock: Arc<dyn Clock>) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_lease_ttl(mut self, ttl: Duration) -> Self {
        self.lease_ttl = ttl;
        self
    }

    pub fn with_suffixes(mut self, suffixes: IndicatorSuffixTable) -> Self {
        self.suffixes = suffixes;
        self
    }

    pub fn with_criteria(mut self, criteria: CriteriaTable) -> Self {
        self.criteria = criteria;
        self
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.store
    }

    pub fn criteria(&self, domain: Domain) -> AcceptanceCriteria {
        self.criteria.for_domain(domain)
    }

    pub fn batch(&self, id: &BatchId) -> Result<ReviewBatch, ReviewError> {
        self.store
            .batch(id)
            .ok_or_else(|| ReviewError::BatchNotFound(id.clone()))
    }

    pub fn batches(&self) -> Vec<BatchSummary> {
        self.store
            .batches()
            .iter()
            .map(ReviewBatch::summary)
            .collect()
    }

    #[allow(clippy::too_many_arguments)]
    fn audit(
        &self,
        entity: &str,
        id: &str,
        from: &str,
        to: &str,
        reviewer: Option<&str>,
        round: Option<u32>,
        note: Option<&str>,
    ) -> Result<(), StoreError> {
        self.store.audit(
            self.clock.now(),
            entity,
            id,
            from,
            to,
            reviewer,
            round,
            note,
        )
    }

    fn set_record_state(
        &self,
        id: &RecordId,
        from: ReviewState,
        to: ReviewState,
        reviewer: Option<&str>,
        round: Option<u32>,
        note: Option<&str>,
    ) -> Result<InstructionRecord, StoreError> {
        let rec = self.store.transition_instruction(id, from, to)?;
        self.audit(
            "instruction",
            id.as_str(),
            state_label(from),
            state_label(to),
            reviewer,
            round,
            note,
        )?;
        Ok(rec)
    }

    pub fn open_batch(
        &self,
        domain: Domain,
        records: &[RecordId],
        min_rounds: u32,
        rng_seed: u64,
        opened_by: &str,
    ) -> Result<ReviewBatch, ReviewError> {
        if min_rounds < MIN_ROUNDS_FLOOR {
            return Err(ReviewError::MinRoundsTooLow(min_rounds));
        }
        if records.is_empty() {
            return Err(ReviewError::EmptySelection);
        }
        let _guard = self.lock.lock();
        let mut ids: Vec<RecordId> = records.to_vec();
        ids.sort();
        ids.dedup();
        for id in &ids {
            let rec = self
                .store
                .instruction(id)
                .ok_or_else(|| ReviewError::UnknownRecord(id.clone()))?;
            if rec.review_state != ReviewState::Unreviewed {
                return Err(ReviewError::AlreadyInReview(id.clone()));
            }
            if rec.domain != domain {
                return Err(ReviewError::DomainMismatch {
                    record: id.clone(),
                    expected: domain,
                    actual: rec.domain,
                });
            }
        }
        let id = batch_id(domain, &ids, min_rounds, rng_seed);
        let slots: Vec<TaskSlot> = ids
            .iter()
            .map(|r| TaskSlot {
                task_id: task_id(&id, r),
                original_record_id: r.clone(),
                record_id: r.clone(),
                active: true,
            })
            .collect();
        for (i, r) in ids.iter().enumerate() {
            if let Err(e) = self.set_record_state(
                r,
                ReviewState::Unreviewed,
                ReviewState::InReview,
                Some(opened_by),
                None,
                Some(id.as_str()),
            ) {
                // another writer got there first; undo what this call did
                for done in &ids[..i] {
                    self.set_record_state(
                        done,
                        ReviewState::InReview,
                        ReviewState::Unreviewed,
                        Some(opened_by),
                        None,
                        Some("batch open aborted"),
                    )?;
                }
                return Err(match e {
                    StoreError::Conflict { .. } => ReviewError::AlreadyInReview(r.clone()),
                    other => other.into(),
                });
            }
        }
        let batch = ReviewBatch {
            id: id.clone(),
            domain,
            task_ids: slots.iter().map(|s| s.task_id.clone()).collect(),
            slots,
            rounds_completed: 0,
            min_rounds,
            state: BatchState::Open,
            rng_seed,
            round: None,
            history: Vec::new(),
        };
        self.store.put_batch(batch.clone())?;
        self.audit(
            "batch",
            id.as_str(),
            "none",
            "open",
            Some(opened_by),
            None,
            None,
        )?;
        Ok(batch)
    }

    fn start_round(
        &self,
        batch: &mut ReviewBatch,
        reviewer: Option<&str>,
    ) -> Result<(), ReviewError> {
        let index = batch.rounds_completed + 1;
        let active = batch.active_tasks();
        let previous = batch.history.last().map(|h| {
            h.order
                .iter()
                .filter(|t| active.contains(t))
                .cloned()
                .collect::<Vec<_>>()
        });
        let order = round_order(batch.rng_seed, index, &active, previous.as_deref());
        let from = match batch.state {
            BatchState::Open => "open",
            _ => "in_round",
        };
        batch.state = BatchState::InRound;
        batch.round = Some(RoundProgress {
            index,
            order,
            leases: BTreeMap::new(),
            done: BTreeSet::new(),
            corrections: 0,
            rejections: 0,
        });
        self.audit(
            "batch",
            batch.id.as_str(),
            from,
            &format!("round_{index}"),
            reviewer,
            Some(index),
            None,
        )?;
        Ok(())
    }

    /// Leases the next unserved task of the current round to `reviewer`. A
    /// reviewer who already holds a live lease gets the same task back.
    pub fn next_task(&self, batch_id: &BatchId, reviewer: &str) -> Result<NextTask, ReviewError> {
        let _guard = self.lock.lock();
        let mut batch = self.batch(batch_id)?;
        let now = self.clock.now();
        match batch.state {
            BatchState::Accepted => return Err(ReviewError::BatchNotInRound(batch_id.clone())),
            BatchState::Open => self.start_round(&mut batch, Some(reviewer))?,
            BatchState::InRound => {}
        }
        let round = batch.round.as_mut().expect("in-round batch has a round");
        round.leases.retain(|_, l| l.expires > now);
        let held = round
            .leases
            .iter()
            .find(|(t, l)| l.reviewer == reviewer && !round.done.contains(*t))
            .map(|(t, _)| t.clone());
        let pick = held.or_else(|| {
            round
                .order
                .iter()
                .find(|t| !round.done.contains(*t) && !round.leases.contains_key(*t))
                .cloned()
        });
        let Some(task) = pick else {
            let (index, complete) = (round.index, round.remaining() == 0);
            self.store.put_batch(batch.clone())?;
            if complete {
                return Ok(NextTask::RoundComplete {
                    batch_id: batch.id,
                    round_index: index,
                    rounds_completed: batch.rounds_completed,
                    min_rounds: batch.min_rounds,
                });
            }
            return Err(ReviewError::LeaseConflict(batch.id));
        };
        let expires = now + self.lease_ttl;
        round.leases.insert(
            task.clone(),
            TaskLease {
                reviewer: reviewer.to_owned(),
                expires,
            },
        );
        let round_index = round.index;
        self.store.put_batch(batch.clone())?;
        let slot = batch.slot(&task).expect("ordered task has a slot");
        Ok(NextTask::Task(Box::new(self.present(
            &batch,
            slot,
            round_index,
            reviewer,
            expires,
        )?)))
    }

    fn present(
        &self,
        batch: &ReviewBatch,
        slot: &TaskSlot,
        round_index: u32,
        reviewer: &str,
        expires: DateTime<Utc>,
    ) -> Result<ReviewTask, ReviewError> {
        let record = self
            .store
            .instruction(&slot.record_id)
            .ok_or_else(|| ReviewError::UnknownRecord(slot.record_id.clone()))?;
        let image = record.image_id.as_ref().and_then(|id| self.store.image(id));
        let caption = record
            .image_id
            .as_ref()
            .and_then(|id| self.store.caption(id))
            .map(|c| c.text);
        Ok(ReviewTask {
            id: slot.task_id.clone(),
            batch_id: batch.id.clone(),
            round_index,
            reviewer_id: reviewer.to_owned(),
            lease_expires: expires,
            image: image.map(|i| ImageRef {
                image_id: i.id,
                uri: i.uri,
                blob: i.blob,
            }),
            caption,
            checklist: self.criteria.for_domain(batch.domain).checklist,
            record,
        })
    }

    fn find_task(&self, task: &TaskId) -> Result<ReviewBatch, ReviewError> {
        self.store
            .batches()
            .into_iter()
            .find(|b| b.slot(task).is_some())
            .ok_or_else(|| ReviewError::TaskNotFound(task.clone()))
    }

    fn apply_correction(
        &self,
        current: &InstructionRecord,
        c: &Correction,
    ) -> Result<InstructionRecord, ReviewError> {
        let mut next = current.clone();
        if let Some(q) = &c.question {
            next.question = q.clone();
        }
        if let Some(o) = &c.options {
            next.options = o.iter().map(|s| s.trim().to_owned()).collect();
        }
        if let Some(i) = c.correct_option {
            next.correct_option = Some(i);
        }
        if let Some(a) = &c.answer {
            next.answer = Some(a.clone());
        }
        if let Some(t) = &c.turns {
            next.turns = t.clone();
            if let Some(first) = t.first() {
                next.question = first.question.clone();
            }
        }
        if next.qtype != QuestionType::MultiRound && !next.question.trim().is_empty() {
            next.question = self.suffixes.append(&next.question, next.qtype);
        }
        if next.qtype == QuestionType::MultipleChoice {
            if let Some(text) = next.correct_option_text() {
                next.answer = Some(text.to_owned());
            }
        }
        if next.question == current.question
            && next.options == current.options
            && next.correct_option == current.correct_option
            && next.answer == current.answer
            && next.turns == current.turns
        {
            return Err(ReviewError::EmptyCorrection);
        }
        next.provenance = Provenance::Corrected;
        next.ancestor_id = Some(current.id.clone());
        next.review_state = ReviewState::InReview;
        next.extra = Extra::new();
        next.id = next.corrected_id();
        let report = validate_record(&next, &self.suffixes);
        if !report.is_valid() {
            return Err(ReviewError::InvalidCorrection(report));
        }
        Ok(next)
    }

    pub fn submit_verdict(
        &self,
        task: &TaskId,
        reviewer: &str,
        verdict: &Verdict,
    ) -> Result<VerdictOutcome, ReviewError> {
        let _guard = self.lock.lock();
        let mut batch = self.find_task(task)?;
        let now = self.clock.now();
        let round = batch
            .round
            .as_ref()
            .filter(|_| batch.state == BatchState::InRound)
            .ok_or_else(|| ReviewError::StaleLease(task.clone()))?;
        let round_index = round.index;
        match round.leases.get(task) {
            Some(l) if l.reviewer == reviewer && l.expires > now && !round.done.contains(task) => {}
            _ => return Err(ReviewError::StaleLease(task.clone())),
        }
        let slot = batch.slot(task).expect("task found in batch").clone();
        let current = self
            .store
            .instruction(&slot.record_id)
            .ok_or_else(|| ReviewError::UnknownRecord(slot.record_id.clone()))?;
        let mut superseded = None;
        let record = match verdict {
            Verdict::Approve => current,
            Verdict::Correct { correction } => {
                let next = self.apply_correction(&current, correction)?;
                self.store.insert_instruction(next.clone())?;
                self.audit(
                    "instruction",
                    next.id.as_str(),
                    "none",
                    "in_review",
                    Some(reviewer),
                    Some(round_index),
                    Some(&format!("corrects {}", current.id)),
                )?;
                self.set_record_state(
                    &current.id,
                    ReviewState::InReview,
                    ReviewState::Rejected,
                    Some(reviewer),
                    Some(round_index),
                    Some("superseded"),
                )?;
                superseded = Some(current.id.clone());
                batch.slot_mut(task).expect("slot").record_id = next.id.clone();
                next
            }
            Verdict::Reject { reason } => {
                let rec = self.set_record_state(
                    &current.id,
                    ReviewState::InReview,
                    ReviewState::Rejected,
                    Some(reviewer),
                    Some(round_index),
                    reason.as_deref(),
                )?;
                batch.slot_mut(task).expect("slot").active = false;
                rec
            }
        };
        let round = batch.round.as_mut().expect("round checked above");
        match verdict {
            Verdict::Approve => {}
            Verdict::Correct { .. } => round.corrections += 1,
            Verdict::Reject { .. } => round.rejections += 1,
        }
        round.leases.remove(task);
        round.done.insert(task.clone());
        self.store.put_batch(batch.clone())?;
        self.audit(
            "task",
            task.as_str(),
            "leased",
            verdict.label(),
            Some(reviewer),
            Some(round_index),
            None,
        )?;
        Ok(VerdictOutcome {
            task_id: task.clone(),
            verdict: verdict.label().to_owned(),
            record,
            superseded,
            batch: batch.summary(),
        })
    }

    /// Closes the current round. Accepts the batch after a clean round once
    /// `min_rounds` are done; otherwise opens the next shuffled round.
    pub fn advance_round(&self, batch_id: &BatchId, by: &str) -> Result<ReviewBatch, ReviewError> {
        let _guard = self.lock.lock();
        let mut batch = self.batch(batch_id)?;
        if batch.state != BatchState::InRound {
            return Err(ReviewError::BatchNotInRound(batch_id.clone()));
        }
        let round = batch.round.take().expect("in-round batch has a round");
        if round.remaining() > 0 {
            return Err(ReviewError::RoundIncomplete {
                batch: batch_id.clone(),
                remaining: round.remaining(),
            });
        }
        batch.rounds_completed += 1;
        let clean = round.is_clean();
        batch.history.push(RoundSummary {
            index: round.index,
            order: round.order,
            corrections: round.corrections,
            rejections: round.rejections,
        });
        if clean && batch.rounds_completed >= batch.min_rounds {
            let index = batch.rounds_completed;
            let mut accepted = 0u64;
            for slot in batch.slots.iter().filter(|s| s.active) {
                self.set_record_state(
                    &slot.record_id,
                    ReviewState::InReview,
                    ReviewState::Accepted,
                    Some(by),
                    Some(index),
                    None,
                )?;
                accepted += 1;
            }
            batch.state = BatchState::Accepted;
            self.store
                .record_cost(CostUnit::Correction, accepted, batch.id.as_str())?;
            self.store.put_batch(batch.clone())?;
            self.audit(
                "batch",
                batch.id.as_str(),
                "in_round",
                "accepted",
                Some(by),
                Some(index),
                None,
            )?;
        } else {
            self.start_round(&mut batch, Some(by))?;
            self.store.put_batch(batch.clone())?;
        }
        Ok(batch)
    }
}

fn state_label(s: ReviewState) -> &'static str {
    match s {
        ReviewState::Unreviewed => "unreviewed",
        ReviewState::InReview => "in_review",
        ReviewState::Accepted => "accepted",
        ReviewState::Rejected => "rejected",
    }
}
