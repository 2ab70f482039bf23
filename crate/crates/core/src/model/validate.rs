//! Structural checks over instruction records.
//!
//! Violations are reported as data. The checks run in a fixed order so a
//! report is a deterministic function of the record.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::domain::QuestionType;
use super::ids::RecordId;
use super::records::{InstructionRecord, Provenance};
use super::suffix::IndicatorSuffixTable;

pub const MC_OPTION_COUNT: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: String,
    pub message: String,
}

impl Violation {
    fn new(code: &str, message: impl Into<String>) -> Self {
        Self {
            code: code.to_owned(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub record_id: RecordId,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn codes(&self) -> Vec<&str> {
        self.violations.iter().map(|v| v.code.as_str()).collect()
    }
}

pub fn validate_record(
    record: &InstructionRecord,
    suffixes: &IndicatorSuffixTable,
) -> ValidationReport {
    let mut out = Vec::new();
    let r = record;

    if r.question.trim().is_empty() {
        out.push(Violation::new("empty-question", "question is empty"));
    }

    if (r.qtype == QuestionType::MultiRound) != r.domain.is_multi_round() {
        out.push(Violation::new(
            "qtype-domain",
            format!(
                "question type {} is not valid in domain {}",
                r.qtype, r.domain
            ),
        ));
    }

    if r.qtype == QuestionType::MultipleChoice {
        if r.options.len() != MC_OPTION_COUNT {
            out.push(Violation::new(
                "option-count",
                format!(
                    "expected {MC_OPTION_COUNT} options, found {}",
                    r.options.len()
                ),
            ));
        }
        match r.correct_option {
            None => out.push(Violation::new(
                "correct-option",
                "correct_option is missing",
            )),
            Some(i) if i as usize >= MC_OPTION_COUNT || i as usize >= r.options.len() => {
                out.push(Violation::new(
                    "correct-option",
                    format!("correct_option {i} is out of range"),
                ))
            }
            Some(_) => {}
        }
        let mut seen = HashSet::new();
        if r.options.iter().any(|o| o.trim().is_empty()) {
            out.push(Violation::new("empty-option", "an option is empty"));
        }
        if !r
            .options
            .iter()
            .all(|o| seen.insert(o.trim().to_lowercase()))
        {
            out.push(Violation::new(
                "duplicate-options",
                "options repeat, so more than one could be correct",
            ));
        }
    } else if !r.options.is_empty() || r.correct_option.is_some() {
        out.push(Violation::new(
            "unexpected-options",
            "options are only allowed on multiple-choice records",
        ));
    }

    if r.qtype == QuestionType::MultiRound {
        if r.turns.len() != 5 {
            out.push(Violation::new(
                "turn-count",
                format!("expected 5 turns, found {}", r.turns.len()),
            ));
        }
        if r.turns
            .iter()
            .any(|t| t.question.trim().is_empty() || t.answer.trim().is_empty())
        {
            out.push(Violation::new(
                "empty-turn",
                "a turn has an empty question or answer",
            ));
        }
        if r.answer.is_some() {
            out.push(Violation::new(
                "answer-present",
                "multi-round records carry answers in turns",
            ));
        }
    } else {
        if !r.turns.is_empty() {
            out.push(Violation::new(
                "unexpected-turns",
                "turns are only allowed on multi-round records",
            ));
        }
        if r.answer.as_deref().is_none_or(|a| a.trim().is_empty()) {
            out.push(Violation::new("answer-missing", "answer is missing"));
        }
    }

    let suffix = suffixes.suffix(r.qtype);
    if !suffix.is_empty() && !r.question.trim_end().ends_with(suffix) {
        out.push(Violation::new(
            "suffix",
            format!("question does not end with `{suffix}`"),
        ));
    }

    match r.provenance {
        Provenance::Corrected if r.ancestor_id.is_none() => out.push(Violation::new(
            "lineage",
            "corrected record has no ancestor",
        )),
        Provenance::Generated | Provenance::Converted if r.ancestor_id.is_some() => out.push(
            Violation::new("lineage", "only corrected records have an ancestor"),
        ),
        _ => {}
    }

    match r.provenance {
        Provenance::Generated if r.image_id.is_none() => out.push(Violation::new(
            "image-ref",
            "generated record has no image_id",
        )),
        _ if r.image_id.is_none() && r.source_path.is_none() => out.push(Violation::new(
            "image-ref",
            "record has neither image_id nor source_path",
        )),
        _ => {}
    }

    if r.provenance == Provenance::Converted && r.source.is_none() {
        out.push(Violation::new(
            "attribution",
            "converted record has no source reference",
        ));
    }

    ValidationReport {
        record_id: r.id.clone(),
        violations: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Domain, ImageId, Turn};

    fn table() -> IndicatorSuffixTable {
        IndicatorSuffixTable::default()
    }

    fn mc(options: usize, correct: u8) -> InstructionRecord {
        let t = table();
        let mut r = InstructionRecord::single_turn(
            ImageId::from("img"),
            Domain::ImageEmotion,
            QuestionType::MultipleChoice,
            t.append(
                "Which mood does this image convey?",
                QuestionType::MultipleChoice,
            ),
            "calm",
        );
        r.options = (0..options).map(|i| format!("option {i}")).collect();
        r.correct_option = Some(correct);
        r
    }

    fn multi_round(turns: usize) -> InstructionRecord {
        let mut r = InstructionRecord::single_turn(
            ImageId::from("img"),
            Domain::MultiRoundLongVqa,
            QuestionType::MultiRound,
            "What is happening?",
            "",
        );
        r.answer = None;
        r.turns = (0..turns)
            .map(|i| Turn::new(format!("q{i}"), format!("a{i}")))
            .collect();
        r
    }

    #[test]
    fn well_formed_mc_has_no_violations() {
        let report = validate_record(&mc(4, 2), &table());
        assert!(report.is_valid(), "{:?}", report.violations);
    }

    #[test]
    fn five_options_is_one_option_count_violation() {
        let report = validate_record(&mc(5, 2), &table());
        assert_eq!(report.codes(), vec!["option-count"]);
    }

    #[test]
    fn four_turns_is_one_turn_count_violation() {
        assert!(validate_record(&multi_round(5), &table()).is_valid());
        assert_eq!(
            validate_record(&multi_round(4), &table()).codes(),
            vec!["turn-count"]
        );
    }

    #[test]
    fn empty_question_is_flagged() {
        let mut r = mc(4, 0);
        r.question = String::new();
        let codes = validate_record(&r, &table()).codes().join(",");
        assert!(codes.contains("empty-question"));
    }

    #[test]
    fn missing_suffix_is_flagged() {
        let mut r = mc(4, 0);
        r.question = "Which mood?".into();
        assert_eq!(validate_record(&r, &table()).codes(), vec!["suffix"]);
    }

    #[test]
    fn corrected_needs_ancestor() {
        let mut r = mc(4, 0);
        r.provenance = Provenance::Corrected;
        assert_eq!(validate_record(&r, &table()).codes(), vec!["lineage"]);
        r.ancestor_id = Some(RecordId::from("parent"));
        assert!(validate_record(&r, &table()).is_valid());
    }

    #[test]
    fn multi_round_only_in_multi_round_domain() {
        let mut r = multi_round(5);
        r.domain = Domain::Landmark;
        assert_eq!(validate_record(&r, &table()).codes(), vec!["qtype-domain"]);
    }

    #[test]
    fn duplicate_options_break_exactly_one_correct() {
        let mut r = mc(4, 0);
        r.options[3] = r.options[0].to_uppercase();
        assert_eq!(
            validate_record(&r, &table()).codes(),
            vec!["duplicate-options"]
        );
    }
}
