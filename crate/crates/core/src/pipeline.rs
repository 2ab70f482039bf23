//! End-to-end orchestration of the six stages from one config file.
//!
//! Every stage is idempotent: ids are content digests and each step skips
//! work whose output already exists, so resuming a failed run is the same
//! as running it again from the failed stage.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    BackendKind, BackendProfile, CallSettings, GoogleVisionOcr, OcrBackend, OpenAiCompatible,
    RetryPolicy, TextBackend, VisionBackend,
};
use crate::captioner::{ocr_annotate, CaptionPromptTemplate, Captioner};
use crate::clock::SystemClock;
use crate::converter::{convert_source, AdapterRegistry};
use crate::costing::{LedgerCounts, Money, PriceTable};
use crate::generator::{pending_units, GenerationTemplates, Generator};
use crate::ingest::{
    auto_screen, crawl_channel, expand_similar, import_manifest, KeyPhraseSet, SimilarityQuery,
};
use crate::mock::{FixtureMode, MockFetcher, MockIndex, MockOcr, MockText, MockVision};
use crate::model::{
    Domain, GenerationConfig, ImageState, IndicatorSuffixTable, PromptMode, QuestionType,
    ReviewState,
};
use crate::review::{select_unreviewed, ReviewService, MIN_ROUNDS_FLOOR};
use crate::seedbank::{eligible, load_seed_bank, persist_bank, validate_seeds_small_batch};
use crate::store::Store;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Caption,
    Seeds,
    Generate,
    Expand,
    Review,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Ingest,
        Stage::Caption,
        Stage::Seeds,
        Stage::Generate,
        Stage::Expand,
        Stage::Review,
    ];

    pub fn letter(self) -> char {
        (b'a' + self as u8) as char
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Caption => "caption",
            Stage::Seeds => "seeds",
            Stage::Generate => "generate",
            Stage::Expand => "expand",
            Stage::Review => "review",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.letter(), self.name())
    }
}

impl FromStr for Stage {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        Stage::ALL
            .into_iter()
            .find(|st| {
                st.name() == s || s.len() == 1 && st.letter() == s.chars().next().unwrap_or(' ')
            })
            .ok_or_else(|| PipelineError::Config(format!("unknown stage `{s}`")))
    }
}

/// Inclusive range of stages, written `b`, `caption`, `a..d` or `caption..generate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageRange {
    pub from: Stage,
    pub to: Stage,
}

impl StageRange {
    pub fn all() -> Self {
        Self {
            from: Stage::Ingest,
            to: Stage::Review,
        }
    }

    pub fn only(stage: Stage) -> Self {
        Self {
            from: stage,
            to: stage,
        }
    }

    pub fn contains(&self, s: Stage) -> bool {
        self.from <= s && s <= self.to
    }

    pub fn stages(&self) -> impl Iterator<Item = Stage> + '_ {
        Stage::ALL.into_iter().filter(|s| self.contains(*s))
    }
}

impl Default for StageRange {
    fn default() -> Self {
        Self::all()
    }
}

impl FromStr for StageRange {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (from, to) = match s.split_once("..") {
            Some((a, b)) => (
                if a.is_empty() {
                    Stage::Ingest
                } else {
                    a.parse()?
                },
                if b.is_empty() {
                    Stage::Review
                } else {
                    b.parse()?
                },
            ),
            None => {
                let st: Stage = s.parse()?;
                (st, st)
            }
        };
        if from > to {
            return Err(PipelineError::Config(format!("empty stage range `{s}`")));
        }
        Ok(Self { from, to })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScreeningMode {
    /// Approve every collected image except near-duplicate-flagged ones.
    Auto,
    /// Leave collected images for the screening queue.
    #[default]
    Manual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedValidation {
    /// Loaded seeds are marked validated.
    Trusted,
    /// Seeds run the small-batch trial and wait for approval.
    #[default]
    Manual,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub manifests: Vec<PathBuf>,
    /// Directory of `<domain>.txt` key-phrase files for the crawl channel.
    pub key_phrases: Option<PathBuf>,
    /// Fetch table for the crawl channel; defaults to the fixtures directory.
    pub fetch_table: Option<PathBuf>,
    /// Neighbours requested per anchor image; 0 disables expansion.
    pub similar_k: usize,
    pub screening: ScreeningMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaptionConfig {
    pub template: Option<PathBuf>,
    pub profile: String,
    pub ocr_profile: String,
    /// Domains whose images are sent through OCR before captioning when
    /// they carry no OCR text yet.
    pub ocr_domains: Vec<Domain>,
}

impl Default for CaptionConfig {
    fn default() -> Self {
        Self {
            template: None,
            profile: "caption".into(),
            ocr_profile: "ocr".into(),
            ocr_domains: vec![Domain::Ocr],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedsConfig {
    pub dir: Option<PathBuf>,
    pub validation: SeedValidation,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationSection {
    #[serde(flatten)]
    pub config: GenerationConfig,
    pub template: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConverterJob {
    pub adapter: String,
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpansionConfig {
    pub multi_round: bool,
    pub adapters_dir: Option<PathBuf>,
    pub converters: Vec<ConverterJob>,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        Self {
            multi_round: true,
            adapters_dir: None,
            converters: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReviewConfig {
    /// Open review batches over unreviewed records.
    pub open_batches: bool,
    pub batch_size: usize,
    pub min_rounds: u32,
}

impl Default for ReviewConfig {
    fn default() -> Self {
        Self {
            open_batches: true,
            batch_size: 20,
            min_rounds: MIN_ROUNDS_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub store: PathBuf,
    /// Domains to process; empty means all.
    pub domains: Vec<Domain>,
    pub mock: bool,
    pub fixtures: Option<PathBuf>,
    pub fixture_mode: FixtureMode,
    pub price: PriceTable,
    /// Indicator suffix overrides by question type key.
    pub suffixes: BTreeMap<QuestionType, String>,
    pub backends: BTreeMap<String, BackendProfile>,
    pub ingest: IngestConfig,
    pub caption: CaptionConfig,
    pub seeds: SeedsConfig,
    pub generation: GenerationSection,
    pub expansion: ExpansionConfig,
    pub review: ReviewConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            store: PathBuf::from("store"),
            domains: Vec::new(),
            mock: false,
            fixtures: None,
            fixture_mode: FixtureMode::Strict,
            price: PriceTable::default(),
            suffixes: BTreeMap::new(),
            backends: BTreeMap::new(),
            ingest: IngestConfig::default(),
            caption: CaptionConfig::default(),
            seeds: SeedsConfig::default(),
            generation: GenerationSection::default(),
            expansion: ExpansionConfig::default(),
            review: ReviewConfig::default(),
        }
    }
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    /// Loads a config file; relative paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.rebase(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn rebase(&mut self, base: &Path) {
        rebase(base, &mut self.store);
        for p in self
            .fixtures
            .iter_mut()
            .chain(self.ingest.key_phrases.iter_mut())
            .chain(self.ingest.fetch_table.iter_mut())
            .chain(self.caption.template.iter_mut())
            .chain(self.seeds.dir.iter_mut())
            .chain(self.generation.template.iter_mut())
            .chain(self.expansion.adapters_dir.iter_mut())
            .chain(self.ingest.manifests.iter_mut())
        {
            rebase(base, p);
        }
        for j in &mut self.expansion.converters {
            rebase(base, &mut j.manifest);
        }
    }

    pub fn check(&self) -> Result<(), PipelineError> {
        let g = &self.generation.config;
        let bad = |m: String| Err(PipelineError::Config(m));
        if g.multi_round_turns != 5 {
            return bad(format!(
                "multi_round_turns must be 5, got {}",
                g.multi_round_turns
            ));
        }
        if g.n_seed_refs == 0 || g.questions_per_call == 0 {
            return bad("n_seed_refs and questions_per_call must be positive".into());
        }
        if self.review.min_rounds < MIN_ROUNDS_FLOOR {
            return bad(format!(
                "review.min_rounds must be at least {MIN_ROUNDS_FLOOR}"
            ));
        }
        if self.review.batch_size == 0 {
            return bad("review.batch_size must be positive".into());
        }
        self.suffix_table()?;
        Ok(())
    }

    pub fn suffix_table(&self) -> Result<IndicatorSuffixTable, PipelineError> {
        IndicatorSuffixTable::with_overrides(self.suffixes.clone())
            .map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn selected_domains(&self) -> Vec<Domain> {
        if self.domains.is_empty() {
            Domain::ALL.to_vec()
        } else {
            let mut d = self.domains.clone();
            d.sort();
            d.dedup();
            d
        }
    }

    fn profile(&self, name: &str) -> BackendProfile {
        self.backends.get(name).cloned().unwrap_or_default()
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("stage {stage} failed: {message} (resume with --from {})", .stage.name())]
    StageFailure {
        stage: Stage,
        message: String,
        report: Box<RunReport>,
    },
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::StageFailure { .. } => 3,
        }
    }
}

/// Live backends for one run.
pub struct Backends {
    pub vision: Box<dyn VisionBackend>,
    pub text: Box<dyn TextBackend>,
    pub ocr: Box<dyn OcrBackend>,
    pub caption_settings: CallSettings,
    pub text_settings: CallSettings,
    pub retry: RetryPolicy,
}

impl Backends {
    pub fn mock(fixtures: Option<PathBuf>, mode: FixtureMode) -> Self {
        Self {
            vision: Box::new(MockVision::new(fixtures.clone(), mode)),
            text: Box::new(MockText::new(fixtures.clone(), mode)),
            ocr: Box::new(MockOcr::new(fixtures, mode)),
            caption_settings: CallSettings::default(),
            text_settings: CallSettings::default(),
            retry: RetryPolicy::immediate(3),
        }
    }

    pub fn from_config(cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        if cfg.mock {
            return Ok(Self::mock(cfg.fixtures.clone(), cfg.fixture_mode));
        }
        let conf = |e: crate::backend::BackendError| PipelineError::Config(e.to_string());
        let fixtures = || (cfg.fixtures.clone(), cfg.fixture_mode);
        let cap_name = &cfg.caption.profile;
        let cap = cfg.profile(cap_name);
        let vision: Box<dyn VisionBackend> = match cap.kind {
            BackendKind::Mock => Box::new(MockVision::new(fixtures().0, fixtures().1)),
            BackendKind::OpenaiCompatible => {
                Box::new(OpenAiCompatible::from_profile(cap_name, &cap).map_err(conf)?)
            }
            BackendKind::GoogleVision => {
                return Err(PipelineError::Config(format!(
                    "profile {cap_name} cannot caption images"
                )))
            }
        };
        let text_name = &cfg.generation.config.backend_profile;
        let txt = cfg.profile(text_name);
        let text: Box<dyn TextBackend> = match txt.kind {
            BackendKind::Mock => Box::new(MockText::new(fixtures().0, fixtures().1)),
            BackendKind::OpenaiCompatible => {
                Box::new(OpenAiCompatible::from_profile(text_name, &txt).map_err(conf)?)
            }
            BackendKind::GoogleVision => {
                return Err(PipelineError::Config(format!(
                    "profile {text_name} cannot generate text"
                )))
            }
        };
        let ocr_p = cfg.profile(&cfg.caption.ocr_profile);
        let ocr: Box<dyn OcrBackend> = match ocr_p.kind {
            BackendKind::GoogleVision => {
                Box::new(GoogleVisionOcr::from_profile(&ocr_p).map_err(conf)?)
            }
            _ => Box::new(MockOcr::new(fixtures().0, fixtures().1)),
        };
        Ok(Self {
            vision,
            text,
            ocr,
            retry: cap.retry,
            caption_settings: cap.call_settings(),
            text_settings: txt.call_settings(),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Option<Stage>,
    /// Named counters, e.g. `captioned` or `instructions`.
    pub counts: BTreeMap<String, u64>,
    pub ledger_delta: LedgerCounts,
    pub cost_delta: Money,
    /// Store records (images, captions, instructions, seeds, batches) added.
    pub new_records: usize,
    pub notes: Vec<String>,
}

impl StageReport {
    fn count(&mut self, key: &str, n: usize) {
        *self.counts.entry(key.to_owned()).or_default() += n as u64;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    pub dry_run: bool,
    pub stages: Vec<StageReport>,
    pub ledger_delta: LedgerCounts,
    pub cost_delta: Money,
    pub new_records: usize,
    /// Stage to resume from after a failure.
    pub resume_from: Option<Stage>,
    pub failure: Option<String>,
}

impl RunReport {
    pub fn stage(&self, s: Stage) -> Option<&StageReport> {
        self.stages.iter().find(|r| r.stage == Some(s))
    }

    pub fn count(&self, s: Stage, key: &str) -> u64 {
        self.stage(s)
            .and_then(|r| r.counts.get(key))
            .copied()
            .unwrap_or(0)
    }
}

type StageResult = Result<(), String>;

pub struct Pipeline {
    pub config: PipelineConfig,
    pub store: Arc<Store>,
    pub backends: Backends,
    suffixes: IndicatorSuffixTable,
    caption_template: CaptionPromptTemplate,
    gen_templates: GenerationTemplates,
}

impl Pipeline {
    pub fn new(
        config: PipelineConfig,
        store: Arc<Store>,
        backends: Backends,
    ) -> Result<Self, PipelineError> {
        config.check()?;
        let caption_template = match &config.caption.template {
            Some(p) => {
                CaptionPromptTemplate::load(p).map_err(|e| PipelineError::Config(e.to_string()))?
            }
            None => CaptionPromptTemplate::default(),
        };
        let gen_templates = match &config.generation.template {
            Some(p) => {
                GenerationTemplates::load(p).map_err(|e| PipelineError::Config(e.to_string()))?
            }
            None => GenerationTemplates::default(),
        };
        Ok(Self {
            suffixes: config.suffix_table()?,
            config,
            store,
            backends,
            caption_template,
            gen_templates,
        })
    }

    /// Opens the configured store and backends.
    pub fn from_config(config: PipelineConfig) -> Result<Self, PipelineError> {
        let store = Store::open(&config.store).map_err(|e| PipelineError::Config(e.to_string()))?;
        let backends = Backends::from_config(&config)?;
        Self::new(config, Arc::new(store), backends)
    }

    fn in_scope(&self, d: Domain) -> bool {
        self.config.domains.is_empty() || self.config.domains.contains(&d)
    }

    /// Runs the stages in `range`, in order.
    pub fn run(&self, range: StageRange, dry_run: bool) -> Result<RunReport, PipelineError> {
        let mut report = RunReport {
            dry_run,
            ..RunReport::default()
        };
        if dry_run {
            for s in range.stages() {
                report.stages.push(self.plan(s));
            }
            return Ok(report);
        }
        let ledger0 = self.store.ledger_counts();
        let records0 = self.store.record_count();
        for s in range.stages() {
            let l0 = self.store.ledger_counts();
            let r0 = self.store.record_count();
            let mut sr = StageReport {
                stage: Some(s),
                ..StageReport::default()
            };
            log::info!("stage {s}");
            let outcome = match s {
                Stage::Ingest => self.ingest(&mut sr),
                Stage::Caption => self.caption(&mut sr),
                Stage::Seeds => self.seeds(&mut sr),
                Stage::Generate => self.generate(&mut sr, false),
                Stage::Expand => self.expand(&mut sr),
                Stage::Review => self.review(&mut sr),
            };
            sr.ledger_delta = self.store.ledger_counts().delta_since(&l0);
            sr.cost_delta = sr.ledger_delta.total(&self.config.price);
            sr.new_records = self.store.record_count() - r0;
            report.stages.push(sr);
            if let Err(message) = outcome {
                self.finish(&mut report, ledger0, records0);
                report.resume_from = Some(s);
                report.failure = Some(message.clone());
                return Err(PipelineError::StageFailure {
                    stage: s,
                    message,
                    report: Box::new(report),
                });
            }
        }
        self.finish(&mut report, ledger0, records0);
        Ok(report)
    }

    fn finish(&self, report: &mut RunReport, ledger0: LedgerCounts, records0: usize) {
        report.ledger_delta = self.store.ledger_counts().delta_since(&ledger0);
        report.cost_delta = report.ledger_delta.total(&self.config.price);
        report.new_records = self.store.record_count() - records0;
    }

    /// Pending work per stage from the current store, without side effects.
    fn plan(&self, s: Stage) -> StageReport {
        let mut sr = StageReport {
            stage: Some(s),
            ..StageReport::default()
        };
        let images_in = |st: ImageState| {
            self.store
                .images_in_state(st)
                .into_iter()
                .filter(|i| self.in_scope(i.domain))
                .count()
        };
        match s {
            Stage::Ingest => sr.count("manifests", self.config.ingest.manifests.len()),
            Stage::Caption => {
                let n = images_in(ImageState::Screened);
                sr.count("pending_captions", n);
                sr.ledger_delta.caption_count = n as u64;
            }
            Stage::Seeds => sr.count("seed_dirs", usize::from(self.config.seeds.dir.is_some())),
            Stage::Generate | Stage::Expand => {
                let units: Vec<_> = pending_units(&self.store, None, None, None)
                    .into_iter()
                    .filter(|u| self.in_scope(u.image.domain))
                    .filter(|u| (s == Stage::Expand) == (u.qtype == QuestionType::MultiRound))
                    .filter(|u| !self.store.has_generated_unit(&u.image.id, u.qtype))
                    .collect();
                sr.count("pending_units", units.len());
                let items: usize = units
                    .iter()
                    .map(|u| {
                        if u.qtype == QuestionType::MultiRound {
                            1
                        } else {
                            self.config.generation.config.questions_per_call
                        }
                    })
                    .sum();
                sr.ledger_delta.instruction_count = items as u64;
                sr.count(
                    "converters",
                    if s == Stage::Expand {
                        self.config.expansion.converters.len()
                    } else {
                        0
                    },
                );
            }
            Stage::Review => {
                let n = self
                    .store
                    .instructions()
                    .iter()
                    .filter(|r| {
                        r.review_state == ReviewState::Unreviewed && self.in_scope(r.domain)
                    })
                    .count();
                sr.count("unreviewed", n);
            }
        }
        sr.cost_delta = sr.ledger_delta.total(&self.config.price);
        sr
    }

    fn ingest(&self, sr: &mut StageReport) -> StageResult {
        let cfg = &self.config.ingest;
        let absorb = |r: crate::ingest::ChannelReport, sr: &mut StageReport| {
            sr.count("fetched", r.fetched);
            sr.count("accepted", r.accepted.len());
            sr.count("duplicates", r.duplicates.len());
            sr.count("flagged", r.flagged.len());
            sr.count("errors", r.errors.len());
            sr.notes.extend(r.errors);
            for (p, e) in r.failed_phrases {
                sr.notes.push(format!("phrase `{p}` failed: {e}"));
            }
            if r.halted {
                sr.notes
                    .push("fetch quota exhausted; channel halted".into());
            }
        };
        for m in &cfg.manifests {
            let r = import_manifest(&self.store, m).map_err(|e| e.to_string())?;
            absorb(r, sr);
        }
        if let Some(dir) = &cfg.key_phrases {
            let table = cfg
                .fetch_table
                .clone()
                .or_else(|| self.config.fixtures.clone());
            let Some(table) = table else {
                return Err("key-phrase crawling needs ingest.fetch_table or fixtures".into());
            };
            let fetcher = MockFetcher::load(&table).map_err(|e| e.to_string())?;
            for d in self.config.selected_domains() {
                if !dir.join(format!("{}.txt", d.key())).exists() {
                    continue;
                }
                let phrases = KeyPhraseSet::load(dir, d).map_err(|e| e.to_string())?;
                let r = crawl_channel(&self.store, &phrases, &fetcher, &self.backends.retry)
                    .map_err(|e| e.to_string())?;
                absorb(r, sr);
            }
        }
        if cfg.screening == ScreeningMode::Auto {
            let (a, r) = auto_screen(&self.store, &SystemClock).map_err(|e| e.to_string())?;
            sr.count("screened", a);
            sr.count("screen_rejected", r);
        }
        if cfg.similar_k > 0 {
            let Some(fx) = &self.config.fixtures else {
                return Err(
                    "similarity expansion needs a fixtures directory with index.json".into(),
                );
            };
            let index = MockIndex::load(fx).map_err(|e| e.to_string())?;
            let mut anchors: Vec<_> = self
                .store
                .images()
                .into_iter()
                .filter(|i| i.anchor_id.is_none() && self.in_scope(i.domain))
                .filter(|i| matches!(i.state, ImageState::Screened | ImageState::Captioned))
                .collect();
            anchors.sort_by(|a, b| a.id.cmp(&b.id));
            for a in anchors {
                let q = SimilarityQuery {
                    anchor_image_id: a.id,
                    k: cfg.similar_k,
                    index_name: crate::backend::SimilarityIndex::name(&index).to_owned(),
                };
                let r = expand_similar(&self.store, &q, &index).map_err(|e| e.to_string())?;
                sr.count("similar", r.accepted.len());
                absorb(r, sr);
            }
            if cfg.screening == ScreeningMode::Auto {
                let (a, r) = auto_screen(&self.store, &SystemClock).map_err(|e| e.to_string())?;
                sr.count("screened", a);
                sr.count("screen_rejected", r);
            }
        }
        Ok(())
    }

    fn caption(&self, sr: &mut StageReport) -> StageResult {
        let mut images: Vec<_> = self
            .store
            .images_in_state(ImageState::Screened)
            .into_iter()
            .filter(|i| self.in_scope(i.domain))
            .collect();
        images.sort_by(|a, b| a.id.cmp(&b.id));
        for img in images.iter_mut() {
            if img.ocr_text.is_none() && self.config.caption.ocr_domains.contains(&img.domain) {
                *img = ocr_annotate(
                    &self.store,
                    img,
                    self.backends.ocr.as_ref(),
                    &self.backends.retry,
                )
                .map_err(|e| e.to_string())?;
                sr.count("ocr", 1);
            }
        }
        let c = Captioner {
            store: &self.store,
            template: &self.caption_template,
            backend: self.backends.vision.as_ref(),
            settings: &self.backends.caption_settings,
        };
        let r = c.caption_all(&images).map_err(|e| e.to_string())?;
        sr.count("captioned", r.captioned.len());
        sr.count("resumed", r.resumed.len());
        sr.count("empty", r.empty.len());
        sr.count("short", r.short.len());
        sr.count("retries", r.retries as usize);
        match r.failure {
            Some((id, e)) => Err(format!("{id}: {e}")),
            None => Ok(()),
        }
    }

    pub fn generator(&self) -> Generator<'_> {
        Generator {
            store: &self.store,
            templates: &self.gen_templates,
            backend: self.backends.text.as_ref(),
            settings: &self.backends.text_settings,
            config: &self.config.generation.config,
            suffixes: &self.suffixes,
        }
    }

    fn seeds(&self, sr: &mut StageReport) -> StageResult {
        let Some(dir) = &self.config.seeds.dir else {
            sr.notes.push("no seed directory configured".into());
            return Ok(());
        };
        let bank = load_seed_bank(dir).map_err(|e| e.to_string())?;
        sr.notes.extend(bank.warnings.iter().cloned());
        let trusted = self.config.seeds.validation == SeedValidation::Trusted;
        let written = persist_bank(&self.store, &bank, trusted).map_err(|e| e.to_string())?;
        sr.count("seeds_written", written);
        sr.count("seeds_loaded", bank.all().count());
        if trusted {
            return Ok(());
        }
        let pool = self.store.seeds();
        for d in self.config.selected_domains() {
            let has_unvalidated = pool.iter().any(|s| s.domain == d && !s.validated);
            if d.prompt_mode() != PromptMode::WithSeed || !has_unvalidated {
                continue;
            }
            let n = self.config.generation.config.n_seed_refs;
            match validate_seeds_small_batch(
                &self.store,
                d,
                n,
                self.config.generation.config.rng_seed,
                &self.generator(),
            ) {
                Ok(rep) => {
                    sr.count("validation_trials", rep.trials.len());
                    let name = format!("seed-validation-{}", d.key());
                    let json = serde_json::to_string_pretty(&rep).map_err(|e| e.to_string())?;
                    if let Some(p) = self
                        .store
                        .archive_raw(&name, &json)
                        .map_err(|e| e.to_string())?
                    {
                        sr.notes.push(format!(
                            "{d}: validation report at {} awaits approval",
                            p.display()
                        ));
                    }
                }
                Err(e) => sr.notes.push(format!("{d}: {e}")),
            }
        }
        Ok(())
    }

    /// Stage d covers single-turn units; with `multi_round` it covers the
    /// multi-round domain instead (part of expansion).
    fn generate(&self, sr: &mut StageReport, multi_round: bool) -> StageResult {
        let pool = self.store.seeds();
        let n = self.config.generation.config.n_seed_refs;
        let units: Vec<_> = pending_units(&self.store, None, None, None)
            .into_iter()
            .filter(|u| self.in_scope(u.image.domain))
            .filter(|u| (u.qtype == QuestionType::MultiRound) == multi_round)
            .filter(|u| {
                let ready = u.image.domain.prompt_mode() != PromptMode::WithSeed
                    || eligible(&pool, u.image.domain, u.image.category.as_deref()).len() >= n;
                if !ready {
                    sr.count("blocked_units", 1);
                }
                ready
            })
            .collect();
        if sr.counts.contains_key("blocked_units") {
            sr.notes.push(format!(
                "{} units wait for {n} validated seeds",
                sr.counts["blocked_units"]
            ));
        }
        let r = self
            .generator()
            .generate_all(&units, &pool)
            .map_err(|e| e.to_string())?;
        sr.count("calls", r.calls);
        sr.count("instructions", r.inserted);
        sr.count("skipped_units", r.skipped);
        sr.count("reminded", r.reminded);
        sr.count("parse_failures", r.parse_failures.len());
        for f in &r.parse_failures {
            sr.notes
                .push(format!("{}/{}: {}", f.image, f.qtype, f.error));
        }
        match r.failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    fn expand(&self, sr: &mut StageReport) -> StageResult {
        if self.config.expansion.multi_round {
            self.generate(sr, true)?;
        }
        if self.config.expansion.converters.is_empty() {
            return Ok(());
        }
        let mut registry = AdapterRegistry::builtin();
        if let Some(dir) = &self.config.expansion.adapters_dir {
            registry.load_dir(dir).map_err(|e| e.to_string())?;
        }
        for job in &self.config.expansion.converters {
            let r = convert_source(
                &self.store,
                &registry,
                &job.adapter,
                &job.manifest,
                &self.suffixes,
            )
            .map_err(|e| e.to_string())?;
            sr.count("converted", r.inserted);
            sr.count("converted_present", r.already_present);
        }
        Ok(())
    }

    fn review(&self, sr: &mut StageReport) -> StageResult {
        if !self.config.review.open_batches {
            return Ok(());
        }
        let svc = ReviewService::new(self.store.clone()).with_suffixes(self.suffixes.clone());
        for d in self.config.selected_domains() {
            loop {
                let ids = select_unreviewed(&self.store, d, self.config.review.batch_size);
                if ids.is_empty() {
                    break;
                }
                svc.open_batch(
                    d,
                    &ids,
                    self.config.review.min_rounds,
                    self.config.generation.config.rng_seed,
                    "pipeline",
                )
                .map_err(|e| e.to_string())?;
                sr.count("batches", 1);
                sr.count("tasks", ids.len());
            }
        }
        Ok(())
    }
}

/// Loads `config_path` and runs `range`. `mock` forces mock backends.
pub fn run_pipeline(
    config_path: &Path,
    range: StageRange,
    dry_run: bool,
    mock: bool,
) -> Result<RunReport, PipelineError> {
    let mut cfg = PipelineConfig::load(config_path)?;
    cfg.mock |= mock;
    Pipeline::from_config(cfg)?.run(range, dry_run)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_ranges() {
        assert_eq!(
            "b".parse::<StageRange>().unwrap(),
            StageRange::only(Stage::Caption)
        );
        let r: StageRange = "caption..generate".parse().unwrap();
        assert_eq!(
            r.stages().collect::<Vec<_>>(),
            [Stage::Caption, Stage::Seeds, Stage::Generate]
        );
        assert_eq!("a..f".parse::<StageRange>().unwrap(), StageRange::all());
        assert_eq!("..c".parse::<StageRange>().unwrap().to, Stage::Seeds);
        assert!("f..a".parse::<StageRange>().is_err());
        assert!("zzz".parse::<StageRange>().is_err());
        assert_eq!(Stage::Review.to_string(), "f:review");
    }

    #[test]
    fn config_checks() {
        let cfg = PipelineConfig::parse("store = \"s\"\n[generation]\nmulti_round_turns = 4\n");
        assert!(matches!(cfg, Err(PipelineError::Config(_))));
        let cfg = PipelineConfig::parse("[review]\nmin_rounds = 2\n");
        assert!(matches!(cfg, Err(PipelineError::Config(_))));
        let cfg = PipelineConfig::parse("bogus = 1\n");
        assert!(matches!(cfg, Err(PipelineError::Config(_))));
        let cfg = PipelineConfig::parse(
            "domains = [\"landmark\", \"ocr\"]\n[generation]\nrng_seed = 7\n[suffixes]\nlong_vqa = \"Answer in detail.\"\n",
        )
        .unwrap();
        assert_eq!(cfg.generation.config.rng_seed, 7);
        assert_eq!(cfg.selected_domains(), [Domain::Ocr, Domain::Landmark]);
        assert_eq!(
            cfg.suffix_table().unwrap().suffix(QuestionType::LongVqa),
            "Answer in detail."
        );
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let mut cfg = PipelineConfig::parse(
            "store = \"out\"\nfixtures = \"/abs\"\n[ingest]\nmanifests = [\"m.jsonl\"]\n",
        )
        .unwrap();
        cfg.rebase(Path::new("/cfg"));
        assert_eq!(cfg.store, Path::new("/cfg/out"));
        assert_eq!(cfg.fixtures.as_deref(), Some(Path::new("/abs")));
        assert_eq!(cfg.ingest.manifests[0], Path::new("/cfg/m.jsonl"));
    }
}
