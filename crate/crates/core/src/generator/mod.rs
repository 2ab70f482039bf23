//! Instruction generation: prompt assembly, backend calls, response parsing
//! and persistence of validated records.

mod parse;
mod prompt;

use std::path::PathBuf;

use rayon::prelude::*;
use thiserror::Error;

pub use parse::{
    normalize_judgment, parse_generation_response, resolve_option, ParseError, ParsedItem,
};
pub use prompt::{
    build_generation_prompt, render_seed_list, GenPromptTemplate, GenerationTemplates,
    DEFAULT_TEMPLATE, MULTI_ROUND_ANCHOR, SEED_ANCHOR,
};

use crate::backend::{with_retry, BackendError, CallSettings, TextBackend, TextRequest};
use crate::costing::CostUnit;
use crate::model::{
    content_digest, prompt_fingerprint, validate_record, CaptionRecord, Domain, Extra,
    GenerationConfig, ImageId, ImageRecord, ImageState, IndicatorSuffixTable, InstructionRecord,
    PromptMode, Provenance, QuestionType, ReviewState, Turn, ValidationReport,
};
use crate::seedbank::{SeedError, SeedQuestion, SeedSampler, TrialGenerator};
use crate::store::{Store, StoreError};
use crate::template::TemplateError;

#[derive(Debug, Error)]
pub enum GenerateError {
    #[error("{domain} cannot take {qtype} questions: {reason}")]
    ModeMismatch {
        domain: Domain,
        qtype: QuestionType,
        reason: String,
    },
    #[error("expected {expected} seed questions, got {found}")]
    SeedCount { expected: usize, found: usize },
    #[error("caption belongs to {caption_for}, not {image}")]
    CaptionMismatch {
        image: ImageId,
        caption_for: ImageId,
    },
    #[error("image {0} has no caption")]
    NotCaptioned(ImageId),
    #[error("generation template: {0}")]
    MissingTemplate(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("unparseable response for {image}/{qtype}: {error}")]
    ParseFailure {
        image: ImageId,
        qtype: QuestionType,
        error: ParseError,
        archived: Vec<PathBuf>,
    },
    #[error("record {} failed validation: {:?}", .0.record_id, .0.codes())]
    Invalid(ValidationReport),
    #[error("backend failure for {image}/{qtype}: {source}")]
    Backend {
        image: ImageId,
        qtype: QuestionType,
        source: BackendError,
    },
    #[error(transparent)]
    Seeds(#[from] SeedError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Appends the indicator suffix for `qtype` exactly once.
pub fn append_indicator(
    question: &str,
    qtype: QuestionType,
    suffixes: &IndicatorSuffixTable,
) -> String {
    suffixes.append(question, qtype)
}

/// Per-unit rng seed so that sampling does not depend on processing order.
pub fn unit_seed(rng_seed: u64, image: &ImageId, qtype: QuestionType) -> u64 {
    let d = content_digest(&["unit", &rng_seed.to_string(), image.as_str(), qtype.key()]);
    u64::from_str_radix(&d[..16], 16).expect("hex digest")
}

/// Turns parsed items into records for one (image, qtype) unit.
pub fn build_records(
    image: &ImageRecord,
    qtype: QuestionType,
    items: Vec<ParsedItem>,
    suffixes: &IndicatorSuffixTable,
) -> Result<Vec<InstructionRecord>, GenerateError> {
    let records = if qtype == QuestionType::MultiRound {
        let turns: Vec<Turn> = items
            .into_iter()
            .map(|i| Turn::new(i.question, i.answer))
            .collect();
        let question = turns
            .first()
            .map(|t| t.question.clone())
            .unwrap_or_default();
        vec![InstructionRecord {
            id: InstructionRecord::generated_id(&image.id, qtype, &question),
            image_id: Some(image.id.clone()),
            source_path: None,
            source: None,
            domain: image.domain,
            qtype,
            question,
            options: Vec::new(),
            correct_option: None,
            answer: None,
            turns,
            provenance: Provenance::Generated,
            ancestor_id: None,
            review_state: ReviewState::Unreviewed,
            extra: Extra::new(),
        }]
    } else {
        items
            .into_iter()
            .map(|i| {
                let question = append_indicator(&i.question, qtype, suffixes);
                let mut r = InstructionRecord::single_turn(
                    image.id.clone(),
                    image.domain,
                    qtype,
                    question,
                    i.answer,
                );
                r.options = i.options;
                r.correct_option = i.correct_option;
                r
            })
            .collect()
    };
    let mut ids = std::collections::HashSet::new();
    for (n, r) in records.iter().enumerate() {
        let report = validate_record(r, suffixes);
        if !report.is_valid() {
            return Err(GenerateError::Invalid(report));
        }
        if !ids.insert(r.id.clone()) {
            return Err(GenerateError::ParseFailure {
                image: image.id.clone(),
                qtype,
                error: ParseError::DuplicateQuestion { item: n + 1 },
                archived: Vec::new(),
            });
        }
    }
    Ok(records)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GenerateOutcome {
    pub records: Vec<InstructionRecord>,
    pub inserted: usize,
    /// The unit was already generated in an earlier run.
    pub skipped: bool,
    /// The first response did not parse and the reminder prompt was used.
    pub reminded: bool,
    pub retries: u32,
}

/// Result of calling the backend for one unit, before persistence.
struct Drafted {
    records: Vec<InstructionRecord>,
    reminded: bool,
    retries: u32,
}

pub struct Generator<'a> {
    pub store: &'a Store,
    pub templates: &'a GenerationTemplates,
    pub backend: &'a dyn TextBackend,
    pub settings: &'a CallSettings,
    pub config: &'a GenerationConfig,
    pub suffixes: &'a IndicatorSuffixTable,
}

impl Generator<'_> {
    /// Seeds offered for one unit. Empty for domains without seeds.
    pub fn seeds_for(
        &self,
        image: &ImageRecord,
        qtype: QuestionType,
        pool: &[SeedQuestion],
    ) -> Result<Vec<SeedQuestion>, GenerateError> {
        if image.domain.prompt_mode() != PromptMode::WithSeed {
            return Ok(Vec::new());
        }
        let mut s = SeedSampler::new(unit_seed(self.config.rng_seed, &image.id, qtype));
        Ok(s.sample(
            pool,
            image.domain,
            image.category.as_deref(),
            self.config.n_seed_refs,
        )?)
    }

    pub fn prompt(
        &self,
        image: &ImageRecord,
        caption: &CaptionRecord,
        qtype: QuestionType,
        seeds: &[SeedQuestion],
    ) -> Result<String, GenerateError> {
        build_generation_prompt(
            caption,
            image,
            qtype,
            seeds,
            self.templates,
            self.config.n_seed_refs,
            self.config.questions_per_call,
        )
    }

    fn call(
        &self,
        image: &ImageRecord,
        qtype: QuestionType,
        prompt: &str,
    ) -> Result<(String, u32), GenerateError> {
        let fp = prompt_fingerprint(prompt);
        let req = TextRequest {
            model: &self.settings.model,
            max_tokens: self.settings.max_tokens,
            temperature: self.settings.temperature,
            prompt,
            fingerprint: &fp,
        };
        let out = with_retry(
            &self.settings.retry,
            self.settings.limiter.as_deref(),
            BackendError::is_transient,
            || self.backend.complete(&req),
        )
        .map_err(|source| GenerateError::Backend {
            image: image.id.clone(),
            qtype,
            source,
        })?;
        Ok((out.value, out.retries))
    }

    /// Calls the backend and parses, retrying once with the format reminder.
    /// Both raw responses are archived when the second attempt also fails.
    fn draft(
        &self,
        image: &ImageRecord,
        qtype: QuestionType,
        prompt: &str,
    ) -> Result<Drafted, GenerateError> {
        let expected = self.config.expected_items(qtype);
        let (raw, mut retries) = self.call(image, qtype, prompt)?;
        let first_err = match parse_generation_response(&raw, qtype, expected) {
            Ok(items) => {
                return Ok(Drafted {
                    records: build_records(image, qtype, items, self.suffixes)?,
                    reminded: false,
                    retries,
                })
            }
            Err(e) => e,
        };
        log::warn!(
            "response for {}/{qtype} did not parse ({first_err}); retrying with reminder",
            image.id
        );
        let second = format!("{prompt}\n\n{}", self.templates.reminder_for(expected)?);
        let (raw2, r2) = self.call(image, qtype, &second)?;
        retries += r2;
        match parse_generation_response(&raw2, qtype, expected) {
            Ok(items) => Ok(Drafted {
                records: build_records(image, qtype, items, self.suffixes)?,
                reminded: true,
                retries,
            }),
            Err(error) => {
                let mut archived = Vec::new();
                for (p, r) in [(prompt, &raw), (second.as_str(), &raw2)] {
                    let name = format!("generation-{}", prompt_fingerprint(p));
                    archived.extend(self.store.archive_raw(&name, r)?);
                }
                Err(GenerateError::ParseFailure {
                    image: image.id.clone(),
                    qtype,
                    error,
                    archived,
                })
            }
        }
    }

    fn persist(
        &self,
        image: &ImageRecord,
        qtype: QuestionType,
        d: Drafted,
    ) -> Result<GenerateOutcome, GenerateError> {
        let fresh = d
            .records
            .iter()
            .filter(|r| self.store.instruction(&r.id).is_none())
            .count();
        self.store.record_cost(
            CostUnit::Instruction,
            fresh as u64,
            format!("{}/{}", image.id, qtype.key()),
        )?;
        let inserted = self.store.insert_instructions(d.records.clone())?;
        Ok(GenerateOutcome {
            records: d.records,
            inserted,
            skipped: false,
            reminded: d.reminded,
            retries: d.retries,
        })
    }

    fn check_ready(
        &self,
        image: &ImageRecord,
        caption: &CaptionRecord,
    ) -> Result<(), GenerateError> {
        if image.state != ImageState::Captioned {
            return Err(GenerateError::NotCaptioned(image.id.clone()));
        }
        if caption.image_id != image.id {
            return Err(GenerateError::CaptionMismatch {
                image: image.id.clone(),
                caption_for: caption.image_id.clone(),
            });
        }
        Ok(())
    }

    /// Generates and persists one unit. Nothing is written unless every
    /// record parses and validates.
    pub fn generate_instructions(
        &self,
        image: &ImageRecord,
        caption: &CaptionRecord,
        qtype: QuestionType,
        seeds: &[SeedQuestion],
    ) -> Result<GenerateOutcome, GenerateError> {
        self.check_ready(image, caption)?;
        if self.store.has_generated_unit(&image.id, qtype) {
            return Ok(GenerateOutcome {
                skipped: true,
                ..GenerateOutcome::default()
            });
        }
        let prompt = self.prompt(image, caption, qtype, seeds)?;
        let d = self.draft(image, qtype, &prompt)?;
        self.persist(image, qtype, d)
    }

    /// Generates every pending unit with bounded parallelism. Results are
    /// persisted in unit order. Parse failures are recorded and skipped;
    /// the run stops at the first backend failure.
    pub fn generate_all(
        &self,
        units: &[GenUnit],
        seed_pool: &[SeedQuestion],
    ) -> Result<GenRunReport, GenerateError> {
        let mut report = GenRunReport::default();
        let pending: Vec<&GenUnit> = units
            .iter()
            .filter(|u| {
                let done = self.store.has_generated_unit(&u.image.id, u.qtype);
                report.skipped += usize::from(done);
                !done
            })
            .collect();
        let workers = self.settings.parallelism.max(1);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .expect("thread pool");
        for chunk in pending.chunks(workers * 4) {
            let drafted: Vec<Result<Drafted, GenerateError>> = pool.install(|| {
                chunk
                    .par_iter()
                    .map(|u| {
                        self.check_ready(&u.image, &u.caption)?;
                        let seeds = self.seeds_for(&u.image, u.qtype, seed_pool)?;
                        let prompt = self.prompt(&u.image, &u.caption, u.qtype, &seeds)?;
                        self.draft(&u.image, u.qtype, &prompt)
                    })
                    .collect()
            });
            for (u, d) in chunk.iter().zip(drafted) {
                match d {
                    Ok(d) => {
                        report.reminded += usize::from(d.reminded);
                        report.retries += d.retries;
                        let out = self.persist(&u.image, u.qtype, d)?;
                        report.calls += 1;
                        report.inserted += out.inserted;
                    }
                    Err(GenerateError::ParseFailure {
                        image,
                        qtype,
                        error,
                        archived,
                    }) => {
                        log::warn!("giving up on {image}/{qtype}: {error}");
                        report.parse_failures.push(ParseFailureNote {
                            image,
                            qtype,
                            error: error.to_string(),
                            archived,
                        });
                    }
                    Err(e @ GenerateError::Backend { .. }) => {
                        report.failure = Some(e.to_string());
                        return Ok(report);
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        Ok(report)
    }
}

impl TrialGenerator for Generator<'_> {
    fn trial(
        &self,
        image: &ImageRecord,
        caption: &CaptionRecord,
        qtype: QuestionType,
        seeds: &[SeedQuestion],
    ) -> Result<usize, String> {
        let prompt = self
            .prompt(image, caption, qtype, seeds)
            .map_err(|e| e.to_string())?;
        let (raw, _) = self
            .call(image, qtype, &prompt)
            .map_err(|e| e.to_string())?;
        let items = parse_generation_response(&raw, qtype, self.config.expected_items(qtype))
            .map_err(|e| e.to_string())?;
        let records =
            build_records(image, qtype, items, self.suffixes).map_err(|e| e.to_string())?;
        Ok(records.len())
    }
}

/// One (image, question type) generation unit.
#[derive(Debug, Clone)]
pub struct GenUnit {
    pub image: ImageRecord,
    pub caption: CaptionRecord,
    pub qtype: QuestionType,
}

/// Question types generated for a domain.
pub fn qtypes_for(domain: Domain) -> Vec<QuestionType> {
    if domain.is_multi_round() {
        vec![QuestionType::MultiRound]
    } else {
        QuestionType::SINGLE_TURN.to_vec()
    }
}

/// Every unit for captioned images, optionally restricted to one domain
/// and question type, in a stable order.
pub fn pending_units(
    store: &Store,
    domain: Option<Domain>,
    qtype: Option<QuestionType>,
    limit: Option<usize>,
) -> Vec<GenUnit> {
    let mut images = store.images_in_state(ImageState::Captioned);
    images.sort_by(|a, b| a.id.cmp(&b.id));
    let mut out = Vec::new();
    for image in images
        .into_iter()
        .filter(|i| domain.is_none_or(|d| d == i.domain))
    {
        let Some(caption) = store.caption(&image.id) else {
            continue;
        };
        for q in qtypes_for(image.domain) {
            if qtype.is_some_and(|t| t != q) {
                continue;
            }
            out.push(GenUnit {
                image: image.clone(),
                caption: caption.clone(),
                qtype: q,
            });
        }
    }
    if let Some(n) = limit {
        out.truncate(n);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseFailureNote {
    pub image: ImageId,
    pub qtype: QuestionType,
    pub error: String,
    pub archived: Vec<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GenRunReport {
    pub calls: usize,
    pub inserted: usize,
    pub skipped: usize,
    pub reminded: usize,
    pub retries: u32,
    pub parse_failures: Vec<ParseFailureNote>,
    pub failure: Option<String>,
}
