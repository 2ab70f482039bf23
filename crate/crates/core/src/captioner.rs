//! Domain-conditioned caption generation.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    with_retry, BackendError, CallSettings, OcrBackend, RetryPolicy, VisionBackend, VisionRequest,
};
use crate::costing::CostUnit;
use crate::model::{
    prompt_fingerprint, CaptionRecord, Domain, Extra, ImageFlag, ImageId, ImageRecord, ImageState,
};
use crate::store::{Store, StoreError};
use crate::template::{render, Sections, Slots, TemplateError};

pub const UNIVERSAL_SENTENCE: &str = "Describe the image in as much detail as possible.";
pub const DEFAULT_TEMPLATE: &str = include_str!("../templates/caption_prompt.txt");

/// Captions shorter than this many words are logged as suspicious.
pub const SHORT_CAPTION_WORDS: usize = 40;

#[derive(Debug, Error)]
pub enum CaptionError {
    #[error("caption template: {0}")]
    MissingTemplate(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("image `{id}` is {state:?}; captioning needs a screened image")]
    NotScreened { id: ImageId, state: ImageState },
    #[error("ocr needs a collected or screened image, `{id}` is {state:?}")]
    OcrState { id: ImageId, state: ImageState },
    #[error("backend returned an empty caption for `{0}`")]
    EmptyCaption(ImageId),
    #[error("captioning `{image}` failed: {source}")]
    Backend {
        image: ImageId,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionPromptTemplate {
    pub universal_body: String,
    pub domain_addenda: BTreeMap<Domain, String>,
}

impl CaptionPromptTemplate {
    pub fn parse(text: &str) -> Result<Self, CaptionError> {
        let sections = Sections::parse(text)?;
        let universal_body = sections
            .get("universal")
            .ok_or_else(|| CaptionError::MissingTemplate("no [universal] section".into()))?
            .to_owned();
        if !universal_body.contains(UNIVERSAL_SENTENCE) {
            return Err(CaptionError::MissingTemplate(format!(
                "[universal] must contain `{UNIVERSAL_SENTENCE}`"
            )));
        }
        let mut domain_addenda = BTreeMap::new();
        for name in sections.names() {
            if name == "universal" {
                continue;
            }
            let domain = name
                .strip_prefix("addendum.")
                .and_then(|k| k.parse::<Domain>().ok())
                .ok_or_else(|| {
                    CaptionError::MissingTemplate(format!("unknown section [{name}]"))
                })?;
            domain_addenda.insert(domain, sections.get(name).unwrap_or_default().to_owned());
        }
        Ok(Self {
            universal_body,
            domain_addenda,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CaptionError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CaptionError::MissingTemplate(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn addendum(&self, domain: Domain) -> Option<&str> {
        self.domain_addenda
            .get(&domain)
            .map(String::as_str)
            .filter(|s| !s.trim().is_empty())
    }
}

impl Default for CaptionPromptTemplate {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATE).expect("bundled caption template is valid")
    }
}

fn render_prompt(
    image: &ImageRecord,
    template: &CaptionPromptTemplate,
) -> Result<String, CaptionError> {
    let tags: Vec<&str> = image
        .tags
        .iter()
        .map(|t| t.trim())
        .filter(|t| !t.is_empty())
        .collect();
    let tags = if tags.is_empty() {
        "none".to_owned()
    } else {
        tags.join(", ")
    };
    let slots = Slots::new()
        .set("image_tag", &tags)
        .set_opt("ocr_text", image.ocr_text.as_deref())
        .set_opt("special_requirements", template.addendum(image.domain));
    Ok(render(&template.universal_body, &slots)?)
}

/// The caption prompt for a screened image.
pub fn build_caption_prompt(
    image: &ImageRecord,
    template: &CaptionPromptTemplate,
) -> Result<String, CaptionError> {
    if image.state != ImageState::Screened {
        return Err(CaptionError::NotScreened {
            id: image.id.clone(),
            state: image.state,
        });
    }
    render_prompt(image, template)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionOutcome {
    pub record: CaptionRecord,
    pub retries: u32,
    /// True when a caption already on file was reused.
    pub resumed: bool,
}

/// Backend response for one image, before persistence.
struct Described {
    prompt: String,
    text: String,
    retries: u32,
}

pub struct Captioner<'a> {
    pub store: &'a Store,
    pub template: &'a CaptionPromptTemplate,
    pub backend: &'a dyn VisionBackend,
    pub settings: &'a CallSettings,
}

impl Captioner<'_> {
    fn existing(&self, image: &ImageRecord, prompt: &str) -> Option<CaptionRecord> {
        self.store
            .caption(&image.id)
            .filter(|c| c.prompt == prompt && c.fingerprint_matches())
    }

    fn describe(&self, image: &ImageRecord, prompt: String) -> Result<Described, CaptionError> {
        let bytes = match &image.blob {
            Some(rel) => Some(self.store.read_blob(rel)?),
            None => None,
        };
        let req = VisionRequest {
            model: &self.settings.model,
            max_tokens: self.settings.max_tokens,
            temperature: self.settings.temperature,
            image,
            image_bytes: bytes.as_deref(),
            prompt: &prompt,
        };
        let out = with_retry(
            &self.settings.retry,
            self.settings.limiter.as_deref(),
            BackendError::is_transient,
            || self.backend.describe(&req),
        )
        .map_err(|source| CaptionError::Backend {
            image: image.id.clone(),
            source,
        })?;
        if out.retries > 0 {
            log::info!(
                "caption for {} succeeded after {} retries",
                image.id,
                out.retries
            );
        }
        Ok(Described {
            prompt,
            text: out.value,
            retries: out.retries,
        })
    }

    fn persist(&self, image: &ImageRecord, d: Described) -> Result<CaptionOutcome, CaptionError> {
        let text = d.text.trim().to_owned();
        if text.is_empty() {
            let mut flagged = image.clone();
            flagged.add_flag(ImageFlag::EmptyCaption);
            self.store.update_image(flagged)?;
            return Err(CaptionError::EmptyCaption(image.id.clone()));
        }
        let record = CaptionRecord {
            image_id: image.id.clone(),
            prompt_fingerprint: prompt_fingerprint(&d.prompt),
            prompt: d.prompt,
            text,
            backend_id: self.backend.id().to_owned(),
            extra: Extra::new(),
        };
        if record.word_count() < SHORT_CAPTION_WORDS {
            log::warn!(
                "caption for {} has only {} words",
                image.id,
                record.word_count()
            );
        }
        self.store
            .record_cost(CostUnit::Caption, 1, image.id.as_str())?;
        self.store.put_caption(record.clone())?;
        self.store
            .transition_image(&image.id, ImageState::Screened, ImageState::Captioned)?;
        Ok(CaptionOutcome {
            record,
            retries: d.retries,
            resumed: false,
        })
    }

    fn resume(
        &self,
        image: &ImageRecord,
        record: CaptionRecord,
    ) -> Result<CaptionOutcome, CaptionError> {
        self.store
            .transition_image(&image.id, ImageState::Screened, ImageState::Captioned)?;
        Ok(CaptionOutcome {
            record,
            retries: 0,
            resumed: true,
        })
    }

    /// Captions one screened image, persists the record, charges one caption
    /// unit, and moves the image to `captioned`.
    pub fn caption_image(&self, image: &ImageRecord) -> Result<CaptionOutcome, CaptionError> {
        let prompt = build_caption_prompt(image, self.template)?;
        if let Some(rec) = self.existing(image, &prompt) {
            return self.resume(image, rec);
        }
        let d = self.describe(image, prompt)?;
        self.persist(image, d)
    }

    /// Captions `images` with bounded parallelism. Backend calls within a
    /// chunk run concurrently; results are persisted in input order and the
    /// run stops at the first backend failure so that a rerun continues the
    /// same sequence.
    pub fn caption_all(&self, images: &[ImageRecord]) -> Result<CaptionRunReport, CaptionError> {
        let mut report = CaptionRunReport::default();
        let pending: Vec<&ImageRecord> = images
            .iter()
            .filter(|i| {
                if i.has_flag(ImageFlag::EmptyCaption) {
                    report.skipped_flagged.push(i.id.clone());
                    false
                } else {
                    true
                }
            })
            .collect();
        let workers = self.settings.parallelism.max(1);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .expect("thread pool");
        for chunk in pending.chunks(workers * 4) {
            let prepared: Vec<Result<Prepared, CaptionError>> = pool.install(|| {
                chunk
                    .par_iter()
                    .map(|image| {
                        let prompt = build_caption_prompt(image, self.template)?;
                        match self.existing(image, &prompt) {
                            Some(rec) => Ok(Prepared::Existing(rec)),
                            None => self.describe(image, prompt).map(Prepared::Fresh),
                        }
                    })
                    .collect()
            });
            for (image, p) in chunk.iter().zip(prepared) {
                let outcome = match p {
                    Ok(Prepared::Existing(rec)) => self.resume(image, rec),
                    Ok(Prepared::Fresh(d)) => self.persist(image, d),
                    Err(e) => Err(e),
                };
                match outcome {
                    Ok(o) => {
                        report.retries += o.retries;
                        if o.record.word_count() < SHORT_CAPTION_WORDS {
                            report.short.push(image.id.clone());
                        }
                        if o.resumed {
                            report.resumed.push(image.id.clone());
                        } else {
                            report.captioned.push(image.id.clone());
                        }
                    }
                    Err(CaptionError::EmptyCaption(id)) => report.empty.push(id),
                    Err(e) => {
                        report.failure = Some((image.id.clone(), e.to_string()));
                        return Ok(report);
                    }
                }
            }
        }
        Ok(report)
    }
}

enum Prepared {
    Existing(CaptionRecord),
    Fresh(Described),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRunReport {
    pub captioned: Vec<ImageId>,
    pub resumed: Vec<ImageId>,
    pub empty: Vec<ImageId>,
    pub short: Vec<ImageId>,
    pub skipped_flagged: Vec<ImageId>,
    pub retries: u32,
    /// First image whose backend call failed after retries; the run stopped
    /// there.
    pub failure: Option<(ImageId, String)>,
}

/// Runs OCR on an image and stores the result. An empty result is stored as
/// no OCR text.
pub fn ocr_annotate(
    store: &Store,
    image: &ImageRecord,
    ocr: &dyn OcrBackend,
    retry: &RetryPolicy,
) -> Result<ImageRecord, CaptionError> {
    if !matches!(image.state, ImageState::Collected | ImageState::Screened) {
        return Err(CaptionError::OcrState {
            id: image.id.clone(),
            state: image.state,
        });
    }
    let bytes = match &image.blob {
        Some(rel) => Some(store.read_blob(rel)?),
        None => None,
    };
    let text = with_retry(retry, None, BackendError::is_transient, || {
        ocr.recognize(image, bytes.as_deref())
    })
    .map_err(|source| CaptionError::Backend {
        image: image.id.clone(),
        source,
    })?
    .value;
    let mut next = image.clone();
    next.ocr_text = Some(text.trim().to_owned()).filter(|t| !t.is_empty());
    store.update_image(next.clone())?;
    Ok(next)
}
