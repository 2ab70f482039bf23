use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::domain::{Domain, QuestionType};
use super::ids::{content_digest, DedupKey, ImageId, RecordId};

/// Fields present in a log line that this version does not know about.
/// They are carried through untouched when the record is rewritten.
pub type Extra = BTreeMap<String, serde_json::Value>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceChannel {
    WebCrawl,
    SimilarityExpansion,
    OpenSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageState {
    Collected,
    Screened,
    Captioned,
    Rejected,
}

impl ImageState {
    /// Lifecycle is `collected -> screened -> captioned`, plus `any -> rejected`.
    pub fn can_transition_to(self, next: ImageState) -> bool {
        matches!(
            (self, next),
            (ImageState::Collected, ImageState::Screened)
                | (ImageState::Screened, ImageState::Captioned)
                | (
                    ImageState::Collected | ImageState::Screened | ImageState::Captioned,
                    ImageState::Rejected
                )
        )
    }
}

/// Markers attached to an image for human attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageFlag {
    /// Same domain and identical tag multiset as an existing image.
    NearDuplicate,
    /// The captioning backend returned no text.
    EmptyCaption,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: ImageId,
    pub uri: String,
    pub source_channel: SourceChannel,
    pub domain: Domain,
    pub key_phrase: Option<String>,
    pub tags: Vec<String>,
    pub ocr_text: Option<String>,
    pub dedup_key: DedupKey,
    pub state: ImageState,
    /// Seed category assigned during screening.
    #[serde(default)]
    pub category: Option<String>,
    #[serde(default)]
    pub flags: Vec<ImageFlag>,
    /// Path of the stored bytes relative to the store root.
    #[serde(default)]
    pub blob: Option<String>,
    /// Anchor image for similarity-expansion records.
    #[serde(default)]
    pub anchor_id: Option<ImageId>,
    #[serde(flatten)]
    pub extra: Extra,
}

impl ImageRecord {
    /// A freshly collected record for `bytes`.
    pub fn collected(
        bytes: &[u8],
        uri: impl Into<String>,
        channel: SourceChannel,
        domain: Domain,
        tags: Vec<String>,
    ) -> Self {
        let dedup_key = DedupKey::of_bytes(bytes);
        Self {
            id: ImageId::from_dedup_key(&dedup_key),
            uri: uri.into(),
            source_channel: channel,
            domain,
            key_phrase: None,
            tags,
            ocr_text: None,
            dedup_key,
            state: ImageState::Collected,
            category: None,
            flags: Vec::new(),
            blob: None,
            anchor_id: None,
            extra: Extra::new(),
        }
    }

    pub fn has_flag(&self, flag: ImageFlag) -> bool {
        self.flags.contains(&flag)
    }

    pub fn add_flag(&mut self, flag: ImageFlag) {
        if !self.has_flag(flag) {
            self.flags.push(flag);
            self.flags.sort();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub image_id: ImageId,
    pub text: String,
    pub backend_id: String,
    pub prompt_fingerprint: String,
    /// The exact prompt sent to the backend.
    pub prompt: String,
    #[serde(flatten)]
    pub extra: Extra,
}

/// Digest of a prompt as sent to a backend.
pub fn prompt_fingerprint(prompt: &str) -> String {
    content_digest(&["prompt", prompt])
}

impl CaptionRecord {
    pub fn fingerprint_matches(&self) -> bool {
        prompt_fingerprint(&self.prompt) == self.prompt_fingerprint
    }

    pub fn word_count(&self) -> usize {
        self.text.split_whitespace().count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Generated,
    Converted,
    Corrected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewState {
    Unreviewed,
    InReview,
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub question: String,
    pub answer: String,
}

impl Turn {
    pub fn new(question: impl Into<String>, answer: impl Into<String>) -> Self {
        Self {
            question: question.into(),
            answer: answer.into(),
        }
    }
}

/// Attribution of a converted record to its external source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceRef {
    pub source_name: String,
    pub source_item_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub id: RecordId,
    pub image_id: Option<ImageId>,
    /// Image path shipped by an external source when there is no local image.
    #[serde(default)]
    pub source_path: Option<String>,
    #[serde(default)]
    pub source: Option<SourceRef>,
    pub domain: Domain,
    pub qtype: QuestionType,
    pub question: String,
    pub options: Vec<String>,
    pub correct_option: Option<u8>,
    pub answer: Option<String>,
    pub turns: Vec<Turn>,
    pub provenance: Provenance,
    /// Pre-correction ancestor, set on corrected records.
    #[serde(default)]
    pub ancestor_id: Option<RecordId>,
    pub review_state: ReviewState,
    #[serde(flatten)]
    pub extra: Extra,
}

impl InstructionRecord {
    /// Id of a generated record: digest of `(image_id, qtype, question)`.
    pub fn generated_id(image_id: &ImageId, qtype: QuestionType, question: &str) -> RecordId {
        RecordId(content_digest(&[
            "generated",
            image_id.as_str(),
            qtype.key(),
            question,
        ]))
    }

    pub fn converted_id(source: &SourceRef, qtype: QuestionType) -> RecordId {
        RecordId(content_digest(&[
            "converted",
            &source.source_name,
            &source.source_item_id,
            qtype.key(),
        ]))
    }

    /// Id of a corrected record: digest of the ancestor and the full edited content.
    pub fn corrected_id(&self) -> RecordId {
        let mut parts: Vec<String> = vec![
            "corrected".into(),
            self.ancestor_id
                .as_ref()
                .map(|a| a.0.clone())
                .unwrap_or_default(),
            self.qtype.key().into(),
            self.question.clone(),
            self.correct_option
                .map(|c| c.to_string())
                .unwrap_or_default(),
            self.answer.clone().unwrap_or_default(),
        ];
        parts.extend(self.options.iter().cloned());
        for t in &self.turns {
            parts.push(t.question.clone());
            parts.push(t.answer.clone());
        }
        RecordId(content_digest(&parts))
    }

    /// A single-turn record with empty review state, used by builders and tests.
    pub fn single_turn(
        image_id: ImageId,
        domain: Domain,
        qtype: QuestionType,
        question: impl Into<String>,
        answer: impl Into<String>,
    ) -> Self {
        let question = question.into();
        Self {
            id: Self::generated_id(&image_id, qtype, &question),
            image_id: Some(image_id),
            source_path: None,
            source: None,
            domain,
            qtype,
            question,
            options: Vec::new(),
            correct_option: None,
            answer: Some(answer.into()),
            turns: Vec::new(),
            provenance: Provenance::Generated,
            ancestor_id: None,
            review_state: ReviewState::Unreviewed,
            extra: Extra::new(),
        }
    }

    pub fn correct_option_text(&self) -> Option<&str> {
        self.correct_option
            .and_then(|i| self.options.get(i as usize))
            .map(String::as_str)
    }
}

/// Knobs for a generation run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub n_seed_refs: usize,
    pub questions_per_call: usize,
    pub multi_round_turns: usize,
    pub rng_seed: u64,
    pub backend_profile: String,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            n_seed_refs: 3,
            questions_per_call: 3,
            multi_round_turns: 5,
            rng_seed: 42,
            backend_profile: "mock".into(),
        }
    }
}

impl GenerationConfig {
    /// Items expected back from one backend call for `qtype`.
    pub fn expected_items(&self, qtype: QuestionType) -> usize {
        if qtype == QuestionType::MultiRound {
            self.multi_round_turns
        } else {
            self.questions_per_call
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_state_transitions() {
        use ImageState::*;
        assert!(Collected.can_transition_to(Screened));
        assert!(Screened.can_transition_to(Captioned));
        assert!(Collected.can_transition_to(Rejected));
        assert!(Captioned.can_transition_to(Rejected));
        assert!(!Collected.can_transition_to(Captioned));
        assert!(!Captioned.can_transition_to(Screened));
        assert!(!Rejected.can_transition_to(Collected));
        assert!(!Rejected.can_transition_to(Rejected));
    }

    #[test]
    fn unknown_fields_survive_rewrite() {
        let line = r#"{"image_id":"abc","text":"A cat.","backend_id":"mock","prompt_fingerprint":"f","prompt":"p","reviewer_note":{"x":1}}"#;
        let rec: CaptionRecord = serde_json::from_str(line).unwrap();
        assert_eq!(rec.extra["reviewer_note"]["x"], 1);
        let back = serde_json::to_string(&rec).unwrap();
        assert!(back.contains(r#""reviewer_note":{"x":1}"#));
    }

    #[test]
    fn same_content_same_id() {
        let img = ImageId::from("img1");
        let a = InstructionRecord::generated_id(&img, QuestionType::Judgment, "Is it red?");
        let b = InstructionRecord::generated_id(&img, QuestionType::Judgment, "Is it red?");
        let c = InstructionRecord::generated_id(&img, QuestionType::Judgment, "Is it red!");
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
