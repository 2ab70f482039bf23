//! Dataset export in dialogue form and corpus statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    Domain, ImageId, IndicatorSuffixTable, InstructionRecord, Provenance, QuestionType, RecordId,
    ReviewState,
};
use crate::store::Store;

pub const IMAGE_TOKEN: &str = "<image>";

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("record {record} refers to an image that cannot be resolved ({reference})")]
    UnresolvedImageRef { record: RecordId, reference: String },
    #[error("no accepted records match the selection")]
    EmptySelection,
    #[error("unknown export profile `{0}`")]
    UnknownProfile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Narrows the accepted records to export. Empty lists mean "any".
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExportFilter {
    pub domains: Vec<Domain>,
    pub qtypes: Vec<QuestionType>,
    pub provenance: Vec<Provenance>,
}

impl ExportFilter {
    pub fn matches(&self, r: &InstructionRecord) -> bool {
        r.review_state == ReviewState::Accepted
            && (self.domains.is_empty() || self.domains.contains(&r.domain))
            && (self.qtypes.is_empty() || self.qtypes.contains(&r.qtype))
            && (self.provenance.is_empty() || self.provenance.contains(&r.provenance))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportProfile {
    #[default]
    Conversations,
}

impl std::str::FromStr for ExportProfile {
    type Err = ExportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "conversations" => Ok(ExportProfile::Conversations),
            other => Err(ExportError::UnknownProfile(other.to_owned())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    #[default]
    Jsonl,
    JsonArray,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub from: String,
    pub value: String,
}

impl Message {
    fn human(value: String) -> Self {
        Self {
            from: "human".into(),
            value,
        }
    }

    fn gpt(value: String) -> Self {
        Self {
            from: "gpt".into(),
            value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueEntry {
    pub id: String,
    /// Image path relative to the store root.
    pub image: String,
    pub domain: Domain,
    pub qtype: QuestionType,
    pub conversations: Vec<Message>,
}

fn letter(i: usize) -> char {
    (b'A' + i as u8) as char
}

/// The human prompt of a single-turn record. Options sit between the
/// question body and its indicator suffix.
pub fn render_question(r: &InstructionRecord, suffixes: &IndicatorSuffixTable) -> String {
    if r.qtype != QuestionType::MultipleChoice {
        return r.question.clone();
    }
    let mut s = suffixes.strip(&r.question, r.qtype).to_owned();
    for (i, o) in r.options.iter().enumerate() {
        let _ = write!(s, "\n{}. {o}", letter(i));
    }
    let suffix = suffixes.suffix(r.qtype);
    if !suffix.is_empty() {
        s.push('\n');
        s.push_str(suffix);
    }
    s
}

pub fn render_answer(r: &InstructionRecord) -> String {
    match (r.qtype, r.correct_option) {
        (QuestionType::MultipleChoice, Some(i)) => {
            format!(
                "{}. {}",
                letter(i as usize),
                r.correct_option_text().unwrap_or_default()
            )
        }
        _ => r.answer.clone().unwrap_or_default(),
    }
}

fn image_ref(store: &Store, r: &InstructionRecord) -> Result<String, ExportError> {
    let unresolved = |reference: String| ExportError::UnresolvedImageRef {
        record: r.id.clone(),
        reference,
    };
    let rel = match (&r.image_id, &r.source_path) {
        (Some(id), _) => store
            .image(id)
            .and_then(|i| i.blob)
            .ok_or_else(|| unresolved(format!("image {id}")))?,
        (None, Some(p)) => p.clone(),
        (None, None) => return Err(unresolved("none".into())),
    };
    if !store.blob_exists(&rel) {
        return Err(unresolved(rel));
    }
    Ok(rel)
}

pub fn to_dialogue(
    store: &Store,
    r: &InstructionRecord,
    suffixes: &IndicatorSuffixTable,
) -> Result<DialogueEntry, ExportError> {
    let image = image_ref(store, r)?;
    let pairs: Vec<(String, String)> = if r.qtype == QuestionType::MultiRound {
        r.turns
            .iter()
            .map(|t| (t.question.clone(), t.answer.clone()))
            .collect()
    } else {
        vec![(render_question(r, suffixes), render_answer(r))]
    };
    let mut conversations = Vec::with_capacity(pairs.len() * 2);
    for (i, (q, a)) in pairs.into_iter().enumerate() {
        let q = if i == 0 {
            format!("{IMAGE_TOKEN}\n{q}")
        } else {
            q
        };
        conversations.push(Message::human(q));
        conversations.push(Message::gpt(a));
    }
    Ok(DialogueEntry {
        id: r.id.to_string(),
        image,
        domain: r.domain,
        qtype: r.qtype,
        conversations,
    })
}

/// Accepted records matching `filter`, as dialogue entries sorted by id.
pub fn export_entries(
    store: &Store,
    filter: &ExportFilter,
    _profile: ExportProfile,
    suffixes: &IndicatorSuffixTable,
) -> Result<Vec<DialogueEntry>, ExportError> {
    let mut records: Vec<InstructionRecord> = store
        .instructions()
        .into_iter()
        .filter(|r| filter.matches(r))
        .collect();
    if records.is_empty() {
        return Err(ExportError::EmptySelection);
    }
    records.sort_by(|a, b| a.id.cmp(&b.id));
    records
        .iter()
        .map(|r| to_dialogue(store, r, suffixes))
        .collect()
}

pub fn write_entries(
    entries: &[DialogueEntry],
    format: OutputFormat,
    out: &mut dyn Write,
) -> Result<(), ExportError> {
    match format {
        OutputFormat::Jsonl => {
            for e in entries {
                serde_json::to_writer(&mut *out, e)?;
                out.write_all(b"\n")?;
            }
        }
        OutputFormat::JsonArray => {
            serde_json::to_writer_pretty(&mut *out, entries)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Exports to `out` and returns the number of entries written.
pub fn export_dataset(
    store: &Store,
    filter: &ExportFilter,
    profile: ExportProfile,
    format: OutputFormat,
    suffixes: &IndicatorSuffixTable,
    out: &mut dyn Write,
) -> Result<usize, ExportError> {
    let entries = export_entries(store, filter, profile, suffixes)?;
    write_entries(&entries, format, out)?;
    Ok(entries.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsSelection {
    #[default]
    All,
    Accepted,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub total: usize,
    pub by_domain: BTreeMap<Domain, usize>,
    pub by_qtype: BTreeMap<QuestionType, usize>,
    pub by_provenance: BTreeMap<String, usize>,
    /// Distinct images referenced by the selected records.
    pub images: usize,
    /// Of those images, how many carry a caption.
    pub captions: usize,
    pub instructions_per_image: f64,
}

impl StatsReport {
    pub fn domains(&self) -> usize {
        self.by_domain.len()
    }

    /// Plain-text table of the report.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<44} {:>8}", "domain", "count");
        for (d, n) in &self.by_domain {
            let _ = writeln!(s, "{:<44} {:>8}", d.name(), n);
        }
        let _ = writeln!(s, "{:<44} {:>8}", "total", self.total);
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<44} {:>8}", "type", "count");
        for (q, n) in &self.by_qtype {
            let _ = writeln!(s, "{:<44} {:>8}", q.abbrev(), n);
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<44} {:>8}", "domains", self.domains());
        let _ = writeln!(s, "{:<44} {:>8}", "images", self.images);
        let _ = writeln!(s, "{:<44} {:>8}", "captions", self.captions);
        let _ = writeln!(
            s,
            "{:<44} {:>8.2}",
            "instructions per image", self.instructions_per_image
        );
        s
    }
}

pub fn dataset_stats(store: &Store, selection: StatsSelection) -> StatsReport {
    let records: Vec<InstructionRecord> = store
        .instructions()
        .into_iter()
        .filter(|r| match selection {
            StatsSelection::All => true,
            StatsSelection::Accepted => r.review_state == ReviewState::Accepted,
        })
        .collect();
    let mut rep = StatsReport {
        total: records.len(),
        ..StatsReport::default()
    };
    let mut image_ids: BTreeSet<&ImageId> = BTreeSet::new();
    let mut paths: BTreeSet<&str> = BTreeSet::new();
    for r in &records {
        *rep.by_domain.entry(r.domain).or_default() += 1;
        *rep.by_qtype.entry(r.qtype).or_default() += 1;
        let prov = serde_json::to_value(r.provenance)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default();
        *rep.by_provenance.entry(prov).or_default() += 1;
        match (&r.image_id, &r.source_path) {
            (Some(id), _) => {
                image_ids.insert(id);
            }
            (None, Some(p)) => {
                paths.insert(p);
            }
            _ => {}
        }
    }
    rep.captions = image_ids
        .iter()
        .filter(|id| store.caption(id).is_some())
        .count();
    rep.images = image_ids.len() + paths.len();
    if rep.images > 0 {
        rep.instructions_per_image = rep.total as f64 / rep.images as f64;
    }
    rep
}
