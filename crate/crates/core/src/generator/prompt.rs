use std::collections::BTreeMap;
use std::path::Path;

use crate::model::{CaptionRecord, Domain, ImageRecord, PromptMode, QuestionType};
use crate::seedbank::SeedQuestion;
use crate::template::{render, unresolved_markers, Sections, Slots, TemplateError};

use super::GenerateError;

pub const DEFAULT_TEMPLATE: &str = include_str!("../../templates/generation_prompt.txt");

pub const SEED_ANCHOR: &str = "Question template:";
pub const MULTI_ROUND_ANCHOR: &str = "Create 5 Questions";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenPromptTemplate {
    pub mode: PromptMode,
    pub body: String,
}

/// All generation prompt parts, loaded from one sectioned file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationTemplates {
    pub with_seed: GenPromptTemplate,
    pub no_seed: GenPromptTemplate,
    pub multi_round: GenPromptTemplate,
    /// Output layout description per question type.
    pub output_formats: BTreeMap<QuestionType, String>,
    pub reminder: String,
    /// Extra per-domain instructions for single-turn prompts.
    pub requests: BTreeMap<Domain, String>,
    pub multi_round_requests: String,
    pub multi_round_answer_requests: String,
    pub example_qa: String,
}

fn missing(what: String) -> GenerateError {
    GenerateError::MissingTemplate(what)
}

impl GenerationTemplates {
    pub fn parse(text: &str) -> Result<Self, GenerateError> {
        let s = Sections::parse(text)?;
        let req = |name: &str| -> Result<String, GenerateError> { Ok(s.require(name)?.to_owned()) };
        let with_seed = req("with_seed")?;
        let no_seed = req("no_seed")?;
        let multi_round = req("multi_round")?;
        if !with_seed.contains(SEED_ANCHOR) || !with_seed.contains("{{seed_questions}}") {
            return Err(missing(format!(
                "[with_seed] must contain `{SEED_ANCHOR}` and the seed slot"
            )));
        }
        if no_seed.contains(SEED_ANCHOR) || no_seed.contains("seed_questions") {
            return Err(missing(
                "[no_seed] must not reference seed questions".into(),
            ));
        }
        if !multi_round.contains(MULTI_ROUND_ANCHOR) {
            return Err(missing(format!(
                "[multi_round] must contain `{MULTI_ROUND_ANCHOR}`"
            )));
        }
        let mut output_formats = BTreeMap::new();
        for q in QuestionType::ALL {
            output_formats.insert(q, req(&format!("format.{}", q.key()))?);
        }
        let mut requests = BTreeMap::new();
        for name in s.names() {
            if let Some(key) = name.strip_prefix("requests.") {
                let d: Domain = key
                    .parse()
                    .map_err(|_| missing(format!("unknown domain in [{name}]")))?;
                requests.insert(d, s.get(name).unwrap_or_default().to_owned());
            }
        }
        Ok(Self {
            with_seed: GenPromptTemplate {
                mode: PromptMode::WithSeed,
                body: with_seed,
            },
            no_seed: GenPromptTemplate {
                mode: PromptMode::NoSeed,
                body: no_seed,
            },
            multi_round: GenPromptTemplate {
                mode: PromptMode::MultiRound,
                body: multi_round,
            },
            output_formats,
            reminder: req("reminder")?,
            requests,
            multi_round_requests: req("multi_round.requests")?,
            multi_round_answer_requests: req("multi_round.answer_requests")?,
            example_qa: req("multi_round.example_qa")?,
        })
    }

    pub fn load(path: &Path) -> Result<Self, GenerateError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| missing(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn template(&self, mode: PromptMode) -> &GenPromptTemplate {
        match mode {
            PromptMode::WithSeed => &self.with_seed,
            PromptMode::NoSeed => &self.no_seed,
            PromptMode::MultiRound => &self.multi_round,
        }
    }

    /// Text appended to a prompt when the first response did not parse.
    pub fn reminder_for(&self, count: usize) -> Result<String, TemplateError> {
        let count = count.to_string();
        render(&self.reminder, &Slots::new().set("count", &count))
    }
}

impl Default for GenerationTemplates {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATE).expect("bundled generation template is valid")
    }
}

/// Numbered seed list as it appears under the template anchor.
pub fn render_seed_list(seeds: &[SeedQuestion]) -> String {
    seeds
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {}", i + 1, s.template))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Assembles the generation prompt for one (image, question type) unit.
pub fn build_generation_prompt(
    caption: &CaptionRecord,
    image: &ImageRecord,
    qtype: QuestionType,
    seeds: &[SeedQuestion],
    templates: &GenerationTemplates,
    n_seed_refs: usize,
    questions_per_call: usize,
) -> Result<String, GenerateError> {
    if caption.image_id != image.id {
        return Err(GenerateError::CaptionMismatch {
            image: image.id.clone(),
            caption_for: caption.image_id.clone(),
        });
    }
    let mode = image.domain.prompt_mode();
    let mismatch = |reason: &str| GenerateError::ModeMismatch {
        domain: image.domain,
        qtype,
        reason: reason.to_owned(),
    };
    if (qtype == QuestionType::MultiRound) != (mode == PromptMode::MultiRound) {
        return Err(mismatch(
            "multi-round questions belong to the multi-round domain only",
        ));
    }
    match mode {
        PromptMode::WithSeed if seeds.len() != n_seed_refs => {
            return Err(GenerateError::SeedCount {
                expected: n_seed_refs,
                found: seeds.len(),
            })
        }
        PromptMode::NoSeed | PromptMode::MultiRound if !seeds.is_empty() => {
            return Err(mismatch("this domain's prompt takes no seed questions"))
        }
        _ => {}
    }
    if let Some(s) = seeds.iter().find(|s| s.domain != image.domain) {
        return Err(mismatch(&format!("seed {} is for {}", s.id, s.domain)));
    }

    let count = questions_per_call.to_string();
    let seed_list = render_seed_list(seeds);
    let format = &templates.output_formats[&qtype];
    let slots = Slots::new()
        .set("count", &count)
        .set("question_type", qtype.prompt_label())
        .set("domain", image.domain.name())
        .set_opt("ocr_result", image.ocr_text.as_deref())
        .set("image_caption", &caption.text)
        .set("output_format", format);
    let slots = match mode {
        PromptMode::WithSeed => slots.set("seed_questions", &seed_list).set_opt(
            "requests",
            templates.requests.get(&image.domain).map(String::as_str),
        ),
        PromptMode::NoSeed => slots.set_opt(
            "requests",
            templates.requests.get(&image.domain).map(String::as_str),
        ),
        PromptMode::MultiRound => slots
            .set("requests", &templates.multi_round_requests)
            .set("answer_requests", &templates.multi_round_answer_requests)
            .set("example_qa", &templates.example_qa),
    };
    let prompt = render(&templates.template(mode).body, &slots)?;
    if let Some(m) = unresolved_markers(&prompt).into_iter().next() {
        return Err(GenerateError::Template(TemplateError::UnresolvedSlot(m)));
    }
    Ok(prompt)
}
