//! Import of external question-answer datasets through declarative
//! field-mapping adapters.
//!
//! An adapter names where each field lives in a manifest row (dotted paths,
//! numeric segments index arrays), how answers are encoded, and which domain
//! the records belong to. Every row of a manifest is converted and validated
//! before anything is written, so a bad row leaves the store untouched.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::generator::{normalize_judgment, resolve_option};
use crate::model::{
    validate_record, DedupKey, Domain, Extra, IndicatorSuffixTable, InstructionRecord, Provenance,
    QuestionType, ReviewState, SourceRef, MC_OPTION_COUNT,
};
use crate::store::{Store, StoreError};

const BUILTIN: [(&str, &str); 4] = [
    ("math", include_str!("../adapters/math.json")),
    ("chart", include_str!("../adapters/chart.json")),
    (
        "scientific_figure",
        include_str!("../adapters/scientific_figure.json"),
    ),
    ("map", include_str!("../adapters/map.json")),
];

/// Words above which a free-text answer counts as long.
pub const LONG_ANSWER_WORDS: usize = 12;

#[derive(Debug, Error)]
pub enum ConvertError {
    #[error("unknown adapter `{0}`")]
    UnknownAdapter(String),
    #[error("adapter {name}: {reason}")]
    BadAdapter { name: String, reason: String },
    #[error("manifest {manifest} row {row}: {reason}")]
    SourceSchemaMismatch {
        manifest: String,
        row: usize,
        reason: String,
    },
    #[error("{0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Math,
    Chart,
    ScientificFigure,
    Map,
}

impl Family {
    pub fn default_domain(self) -> Domain {
        match self {
            Family::Math | Family::Chart => Domain::NumericalCalculation,
            Family::ScientificFigure => Domain::ComplexReasoning,
            Family::Map => Domain::SpatialRelationship,
        }
    }
}

/// How a multiple-choice answer is written in the source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerFormat {
    /// Option text, or a letter.
    #[default]
    Text,
    /// A letter A to D.
    Letter,
    /// A zero-based option index.
    Index,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewPolicy {
    /// Records enter the review queue.
    #[default]
    Required,
    /// Records are trusted and land as accepted.
    Skip,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldMap {
    pub item_id: String,
    pub image: String,
    pub question: String,
    pub answer: String,
    #[serde(default)]
    pub choices: Option<String>,
    #[serde(default)]
    pub qtype: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub name: String,
    pub source_name: String,
    pub family: Family,
    #[serde(default)]
    pub domain: Option<Domain>,
    pub fields: FieldMap,
    #[serde(default)]
    pub answer_format: AnswerFormat,
    #[serde(default)]
    pub review: ReviewPolicy,
}

impl AdapterSpec {
    pub fn domain(&self) -> Domain {
        self.domain.unwrap_or(self.family.default_domain())
    }

    fn check(&self) -> Result<(), ConvertError> {
        if self.domain().is_multi_round() {
            return Err(ConvertError::BadAdapter {
                name: self.name.clone(),
                reason: "converted records cannot be multi-round".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct AdapterRegistry(BTreeMap<String, AdapterSpec>);

impl AdapterRegistry {
    /// The four bundled adapter families.
    pub fn builtin() -> Self {
        let mut r = Self::default();
        for (name, text) in BUILTIN {
            let spec: AdapterSpec = serde_json::from_str(text).expect("bundled adapter parses");
            debug_assert_eq!(spec.name, name);
            r.0.insert(spec.name.clone(), spec);
        }
        r
    }

    pub fn register(&mut self, spec: AdapterSpec) -> Result<(), ConvertError> {
        spec.check()?;
        self.0.insert(spec.name.clone(), spec);
        Ok(())
    }

    /// Adds every `*.json` spec in `dir`, overriding bundled ones by name.
    pub fn load_dir(&mut self, dir: &Path) -> Result<usize, ConvertError> {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| ConvertError::Io(dir.into(), e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        for p in &paths {
            let text = fs::read_to_string(p).map_err(|e| ConvertError::Io(p.clone(), e))?;
            let spec: AdapterSpec =
                serde_json::from_str(&text).map_err(|e| ConvertError::BadAdapter {
                    name: p.display().to_string(),
                    reason: e.to_string(),
                })?;
            self.register(spec)?;
        }
        Ok(paths.len())
    }

    pub fn get(&self, name: &str) -> Result<&AdapterSpec, ConvertError> {
        self.0
            .get(name)
            .ok_or_else(|| ConvertError::UnknownAdapter(name.to_owned()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }
}

/// Looks up a dotted path such as `meta.choices.2`.
pub fn lookup<'a>(row: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(row, |v, seg| match v {
        Value::Array(a) => seg.parse::<usize>().ok().and_then(|i| a.get(i)),
        Value::Object(o) => o.get(seg),
        _ => None,
    })
}

fn scalar(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.trim().to_owned()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(if *b { "Yes" } else { "No" }.to_owned()),
        _ => None,
    }
}

/// Picks the question type for one row.
pub fn infer_qtype(
    explicit: Option<&str>,
    has_choices: bool,
    answer: &str,
) -> Result<QuestionType, String> {
    if let Some(t) = explicit {
        return t
            .parse()
            .map_err(|_| format!("unknown question type `{t}`"));
    }
    if has_choices {
        return Ok(QuestionType::MultipleChoice);
    }
    if normalize_judgment(answer).is_some() {
        return Ok(QuestionType::Judgment);
    }
    if answer.split_whitespace().count() > LONG_ANSWER_WORDS {
        Ok(QuestionType::LongVqa)
    } else {
        Ok(QuestionType::ShortVqa)
    }
}

struct RowCtx<'a> {
    spec: &'a AdapterSpec,
    base: &'a Path,
    suffixes: &'a IndicatorSuffixTable,
}

/// A converted row plus the image bytes it refers to.
pub struct ConvertedRow {
    pub record: InstructionRecord,
    pub image_bytes: Vec<u8>,
    pub image_ext: Option<String>,
}

impl RowCtx<'_> {
    fn field(&self, row: &Value, path: &str) -> Result<String, String> {
        let v = lookup(row, path).ok_or_else(|| format!("missing field `{path}`"))?;
        let s = scalar(v).ok_or_else(|| format!("field `{path}` is not a scalar"))?;
        if s.is_empty() {
            return Err(format!("field `{path}` is empty"));
        }
        Ok(s)
    }

    fn convert(&self, row: &Value) -> Result<ConvertedRow, String> {
        let f = &self.spec.fields;
        let item_id = self.field(row, &f.item_id)?;
        let question = self.field(row, &f.question)?;
        let raw_answer = self.field(row, &f.answer)?;
        let image = self.field(row, &f.image)?;
        let choices: Option<Vec<String>> = match &f.choices {
            None => None,
            Some(p) => match lookup(row, p) {
                None | Some(Value::Null) => None,
                Some(Value::Array(a)) if a.is_empty() => None,
                Some(Value::Array(a)) => Some(
                    a.iter()
                        .map(|v| {
                            scalar(v).ok_or_else(|| format!("choice in `{p}` is not a scalar"))
                        })
                        .collect::<Result<_, _>>()?,
                ),
                Some(_) => return Err(format!("field `{p}` is not a list")),
            },
        };
        let explicit = match &f.qtype {
            Some(p) => lookup(row, p).and_then(scalar),
            None => None,
        };
        let qtype = infer_qtype(explicit.as_deref(), choices.is_some(), &raw_answer)?;

        let mut options = Vec::new();
        let mut correct_option = None;
        let mut answer = raw_answer.clone();
        match qtype {
            QuestionType::MultipleChoice => {
                let opts = choices.ok_or("multiple-choice row has no choices")?;
                if opts.len() != MC_OPTION_COUNT {
                    return Err(format!(
                        "expected {MC_OPTION_COUNT} choices, found {}",
                        opts.len()
                    ));
                }
                let idx = match self.spec.answer_format {
                    AnswerFormat::Index => raw_answer
                        .parse::<u8>()
                        .ok()
                        .filter(|i| (*i as usize) < MC_OPTION_COUNT)
                        .ok_or_else(|| format!("answer `{raw_answer}` is not an option index"))?,
                    AnswerFormat::Letter => match raw_answer.trim().as_bytes() {
                        [c @ b'A'..=b'D'] => c - b'A',
                        [c @ b'a'..=b'd'] => c - b'a',
                        _ => return Err(format!("answer `{raw_answer}` is not an option letter")),
                    },
                    AnswerFormat::Text => {
                        resolve_option(0, &raw_answer, &opts).map_err(|e| e.to_string())?
                    }
                };
                answer = opts[idx as usize].clone();
                options = opts;
                correct_option = Some(idx);
            }
            QuestionType::Judgment => {
                answer = normalize_judgment(&raw_answer)
                    .ok_or_else(|| format!("`{raw_answer}` is not a yes/no answer"))?
                    .to_owned();
            }
            QuestionType::MultiRound => {
                return Err("converted records cannot be multi-round".into())
            }
            _ => {}
        }

        let path = self.base.join(&image);
        let image_bytes = fs::read(&path).map_err(|e| format!("image {}: {e}", path.display()))?;
        let source = SourceRef {
            source_name: self.spec.source_name.clone(),
            source_item_id: item_id,
        };
        let mut extra = Extra::new();
        extra.insert("adapter".into(), Value::String(self.spec.name.clone()));
        let record = InstructionRecord {
            id: InstructionRecord::converted_id(&source, qtype),
            image_id: None,
            source_path: Some(image.clone()),
            source: Some(source),
            domain: self.spec.domain(),
            qtype,
            question: self.suffixes.append(&question, qtype),
            options,
            correct_option,
            answer: Some(answer),
            turns: Vec::new(),
            provenance: Provenance::Converted,
            ancestor_id: None,
            review_state: match self.spec.review {
                ReviewPolicy::Required => ReviewState::Unreviewed,
                ReviewPolicy::Skip => ReviewState::Accepted,
            },
            extra,
        };
        let report = validate_record(&record, self.suffixes);
        if !report.is_valid() {
            return Err(format!("converted record is invalid: {:?}", report.codes()));
        }
        Ok(ConvertedRow {
            record,
            image_bytes,
            image_ext: Path::new(&image)
                .extension()
                .map(|e| e.to_string_lossy().into_owned()),
        })
    }
}

/// Converts every row of a JSONL manifest without touching any store.
pub fn convert_rows(
    manifest: &Path,
    spec: &AdapterSpec,
    suffixes: &IndicatorSuffixTable,
) -> Result<Vec<ConvertedRow>, ConvertError> {
    let text = fs::read_to_string(manifest).map_err(|e| ConvertError::Io(manifest.into(), e))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let ctx = RowCtx {
        spec,
        base,
        suffixes,
    };
    let mismatch = |row, reason| ConvertError::SourceSchemaMismatch {
        manifest: manifest.display().to_string(),
        row,
        reason,
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Value = serde_json::from_str(line).map_err(|e| mismatch(i + 1, e.to_string()))?;
        out.push(ctx.convert(&row).map_err(|r| mismatch(i + 1, r))?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ConvertReport {
    pub adapter: String,
    pub rows: usize,
    pub inserted: usize,
    pub already_present: usize,
}

/// Converts a manifest and persists the records with their images copied
/// into the store. Image references point at the stored copy.
pub fn convert_source(
    store: &Store,
    registry: &AdapterRegistry,
    adapter: &str,
    manifest: &Path,
    suffixes: &IndicatorSuffixTable,
) -> Result<ConvertReport, ConvertError> {
    let spec = registry.get(adapter)?;
    let rows = convert_rows(manifest, spec, suffixes)?;
    let mut records = Vec::with_capacity(rows.len());
    for r in rows {
        let key = DedupKey::of_bytes(&r.image_bytes);
        let rel = store.put_blob(&key, r.image_ext.as_deref(), &r.image_bytes)?;
        let mut rec = r.record;
        rec.extra.insert(
            "original_path".into(),
            Value::String(rec.source_path.take().unwrap_or_default()),
        );
        rec.source_path = Some(rel);
        records.push(rec);
    }
    let n = records.len();
    let inserted = store.insert_instructions(records)?;
    Ok(ConvertReport {
        adapter: adapter.to_owned(),
        rows: n,
        inserted,
        already_present: n - inserted,
    })
}
