//! Parser for the numbered question blocks returned by the text backend.

use std::collections::HashSet;
use std::sync::LazyLock;

use regex::Regex;
use thiserror::Error;

use crate::model::{QuestionType, MC_OPTION_COUNT};

static QUESTION: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^[*#\s]*question\s*(\d+)\s*[:.)\-]\**\s*(.*)$").unwrap());
static OPTION: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*\(?([A-Z])\s*[.):]\s*(.*)$").unwrap());
static ANSWER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)^[*#\s]*answer(?:\s*\d+)?\s*:\**\s*(.*)$").unwrap());
static LETTER_ANSWER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(?i:option\s+)?\(?([A-Z])\)?(?:\s*[.):]\s*(.*))?$").unwrap());

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("response is empty or holds no numbered questions")]
    Empty,
    #[error("expected {expected} items, found {found}")]
    CountMismatch { expected: usize, found: usize },
    #[error("question {found} appears where question {expected} was expected")]
    Numbering { expected: usize, found: usize },
    #[error("item {item}: question text is empty")]
    EmptyQuestion { item: usize },
    #[error("item {item}: malformed options ({reason})")]
    MalformedOptions { item: usize, reason: String },
    #[error("item {item}: no answer")]
    MissingAnswer { item: usize },
    #[error("item {item}: answer `{answer}` {}", if *.ambiguous { "matches more than one option" } else { "matches no option" })]
    AnswerNotInOptions {
        item: usize,
        answer: String,
        ambiguous: bool,
    },
    #[error("item {item}: `{answer}` is not a yes/no answer")]
    InvalidJudgment { item: usize, answer: String },
    #[error("item {item}: question repeats an earlier one")]
    DuplicateQuestion { item: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedItem {
    pub question: String,
    pub options: Vec<String>,
    /// Index into `options` for multiple-choice items.
    pub correct_option: Option<u8>,
    pub answer: String,
}

#[derive(Default)]
struct Block {
    number: usize,
    question: Vec<String>,
    options: Vec<(char, String)>,
    answer: Option<Vec<String>>,
}

fn blocks(raw: &str) -> Result<Vec<Block>, ParseError> {
    let mut out: Vec<Block> = Vec::new();
    for line in raw.lines() {
        let line = line.trim_end();
        if let Some(c) = QUESTION.captures(line) {
            let number: usize = c[1].parse().unwrap_or(0);
            let expected = out.len() + 1;
            if number != expected {
                return Err(ParseError::Numbering {
                    expected,
                    found: number,
                });
            }
            out.push(Block {
                number,
                question: vec![c[2].trim().to_owned()],
                ..Block::default()
            });
            continue;
        }
        // Preamble before the first question is ignored.
        let Some(b) = out.last_mut() else { continue };
        if let Some(ans) = b.answer.as_mut() {
            ans.push(line.to_owned());
            continue;
        }
        if let Some(c) = ANSWER.captures(line) {
            b.answer = Some(vec![c[1].trim().to_owned()]);
            continue;
        }
        if let Some(c) = OPTION.captures(line) {
            let letter = c[1].chars().next().unwrap_or('?');
            b.options.push((letter, c[2].trim().to_owned()));
            continue;
        }
        if b.options.is_empty() {
            b.question.push(line.trim().to_owned());
        } else if let Some(last) = b.options.last_mut() {
            if !line.trim().is_empty() {
                last.1.push(' ');
                last.1.push_str(line.trim());
            }
        }
    }
    Ok(out)
}

fn join_words(lines: &[String]) -> String {
    lines
        .iter()
        .map(|l| l.trim())
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

fn clean(s: &str) -> String {
    s.trim().trim_matches('*').trim().to_owned()
}

fn norm(s: &str) -> String {
    s.trim()
        .trim_end_matches(['.', '!', '。'])
        .trim()
        .to_lowercase()
}

/// "Yes"/"No" for the accepted spellings of a yes/no answer.
pub fn normalize_judgment(answer: &str) -> Option<&'static str> {
    let a = answer.trim().to_lowercase();
    let split = a.find(|c: char| !c.is_alphabetic()).unwrap_or(a.len());
    let (word, rest) = a.split_at(split);
    let rest_ok = rest.is_empty() || rest.starts_with([',', '.', '!', ';']);
    if !rest_ok {
        return None;
    }
    match word {
        "yes" | "true" => Some("Yes"),
        "no" | "false" => Some("No"),
        _ => None,
    }
}

/// Resolves a multiple-choice answer to an option index. Exact option text
/// wins; otherwise a leading letter (optionally followed by the option text).
pub fn resolve_option(item: usize, answer: &str, options: &[String]) -> Result<u8, ParseError> {
    let not_found = |ambiguous| ParseError::AnswerNotInOptions {
        item,
        answer: answer.to_owned(),
        ambiguous,
    };
    let a = norm(answer);
    let text_hits: Vec<usize> = options
        .iter()
        .enumerate()
        .filter(|(_, o)| norm(o) == a)
        .map(|(i, _)| i)
        .collect();
    match text_hits.len() {
        1 => return Ok(text_hits[0] as u8),
        0 => {}
        _ => return Err(not_found(true)),
    }
    let Some(c) = LETTER_ANSWER.captures(answer.trim()) else {
        return Err(not_found(false));
    };
    let idx = (c[1].as_bytes()[0] - b'A') as usize;
    if idx >= options.len() {
        return Err(not_found(false));
    }
    if let Some(text) = c.get(2).map(|m| norm(m.as_str())).filter(|t| !t.is_empty()) {
        if text != norm(&options[idx]) {
            return Err(not_found(false));
        }
    }
    Ok(idx as u8)
}

/// Parses `expected` items of type `qtype` out of a raw backend response.
pub fn parse_generation_response(
    raw: &str,
    qtype: QuestionType,
    expected: usize,
) -> Result<Vec<ParsedItem>, ParseError> {
    let blocks = blocks(raw)?;
    if blocks.is_empty() {
        return Err(ParseError::Empty);
    }
    if blocks.len() != expected {
        return Err(ParseError::CountMismatch {
            expected,
            found: blocks.len(),
        });
    }
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(blocks.len());
    for b in blocks {
        let item = b.number;
        let question = clean(&join_words(&b.question));
        if question.is_empty() {
            return Err(ParseError::EmptyQuestion { item });
        }
        if !seen.insert(norm(&question)) {
            return Err(ParseError::DuplicateQuestion { item });
        }
        let answer_lines = b.answer.ok_or(ParseError::MissingAnswer { item })?;
        let answer = clean(answer_lines.join("\n").trim());
        if answer.is_empty() {
            return Err(ParseError::MissingAnswer { item });
        }
        let malformed = |reason: String| ParseError::MalformedOptions { item, reason };
        let mut parsed = ParsedItem {
            question,
            options: Vec::new(),
            correct_option: None,
            answer,
        };
        match qtype {
            QuestionType::MultipleChoice => {
                if b.options.len() != MC_OPTION_COUNT {
                    return Err(malformed(format!(
                        "expected {MC_OPTION_COUNT} options, found {}",
                        b.options.len()
                    )));
                }
                for (i, (letter, text)) in b.options.iter().enumerate() {
                    let want = (b'A' + i as u8) as char;
                    if *letter != want {
                        return Err(malformed(format!(
                            "option `{letter}` where `{want}` was expected"
                        )));
                    }
                    if text.is_empty() {
                        return Err(malformed(format!("option {letter} is empty")));
                    }
                }
                parsed.options = b.options.into_iter().map(|(_, t)| clean(&t)).collect();
                let idx = resolve_option(item, &parsed.answer, &parsed.options)?;
                parsed.correct_option = Some(idx);
                parsed.answer = parsed.options[idx as usize].clone();
            }
            _ if !b.options.is_empty() => {
                return Err(malformed(format!("{qtype} items take no options")));
            }
            QuestionType::Judgment => {
                parsed.answer = normalize_judgment(&parsed.answer)
                    .ok_or_else(|| ParseError::InvalidJudgment {
                        item,
                        answer: parsed.answer.clone(),
                    })?
                    .to_owned();
            }
            _ => {}
        }
        out.push(parsed);
    }
    Ok(out)
}
