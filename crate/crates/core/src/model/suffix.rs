use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::domain::QuestionType;

/// The multiple-choice indicator.
pub const MULTIPLE_CHOICE_SUFFIX: &str = "Please choose the most appropriate option";

/// Indicator utterance appended to each question to signal the expected
/// answer format.
///
/// Only the multiple-choice wording is fixed; the others are configuration
/// and the defaults follow common instruction-tuning phrasing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IndicatorSuffixTable(BTreeMap<QuestionType, String>);

impl Default for IndicatorSuffixTable {
    fn default() -> Self {
        let mut map = BTreeMap::new();
        map.insert(
            QuestionType::Judgment,
            "Please answer yes or no.".to_owned(),
        );
        map.insert(
            QuestionType::MultipleChoice,
            MULTIPLE_CHOICE_SUFFIX.to_owned(),
        );
        map.insert(QuestionType::LongVqa, "Please answer in detail.".to_owned());
        map.insert(
            QuestionType::ShortVqa,
            "Answer the question using a single word or phrase.".to_owned(),
        );
        map.insert(QuestionType::MultiRound, String::new());
        Self(map)
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SuffixTableError {
    #[error("missing indicator suffix for {0}")]
    Missing(QuestionType),
    #[error("multiple-choice suffix must be `{MULTIPLE_CHOICE_SUFFIX}`")]
    MultipleChoiceWording,
}

impl IndicatorSuffixTable {
    /// Overrides entries of the default table.
    pub fn with_overrides(
        overrides: BTreeMap<QuestionType, String>,
    ) -> Result<Self, SuffixTableError> {
        let mut table = Self::default();
        table.0.extend(overrides);
        table.check()?;
        Ok(table)
    }

    pub fn check(&self) -> Result<(), SuffixTableError> {
        for q in QuestionType::SINGLE_TURN {
            if self.0.get(&q).is_none_or(|s| s.trim().is_empty()) {
                return Err(SuffixTableError::Missing(q));
            }
        }
        if self.0[&QuestionType::MultipleChoice] != MULTIPLE_CHOICE_SUFFIX {
            return Err(SuffixTableError::MultipleChoiceWording);
        }
        Ok(())
    }

    pub fn suffix(&self, qtype: QuestionType) -> &str {
        self.0.get(&qtype).map(String::as_str).unwrap_or("")
    }

    /// Appends the registered suffix for `qtype` unless the question already
    /// ends with it.
    pub fn append(&self, question: &str, qtype: QuestionType) -> String {
        let suffix = self.suffix(qtype);
        let body = question.trim_end();
        if suffix.is_empty() || body.ends_with(suffix) {
            return body.to_owned();
        }
        format!("{body} {suffix}")
    }

    /// The question with its suffix removed, for rendering options between
    /// the body and the indicator.
    pub fn strip<'a>(&self, question: &'a str, qtype: QuestionType) -> &'a str {
        let suffix = self.suffix(qtype);
        let body = question.trim_end();
        if suffix.is_empty() {
            return body;
        }
        body.strip_suffix(suffix).map(str::trim_end).unwrap_or(body)
    }
}
