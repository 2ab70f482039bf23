//! Per-domain seed questions: loading, sampling, and the small-batch
//! validation loop.
//!
//! Seed file layout, one file per domain named `<domain_key>.txt`:
//!
//! ```text
//! # comment
//! [general]
//! Identify the species in the image.
//!
//! [wildcard category=formula]
//! What should the value of <variable> in the picture be equal to?
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::LazyLock;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    content_digest, CaptionRecord, Domain, ImageRecord, PromptMode, QuestionType, SeedId,
};
use crate::store::{Store, StoreError};

static PLACEHOLDER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"<[^<>\n]+>").unwrap());
static HEADER: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^\[\s*(general|wildcard)(?:\s+category\s*=\s*([^\]]*?))?\s*\]$").unwrap()
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedKind {
    General,
    Wildcard,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedQuestion {
    pub id: SeedId,
    pub domain: Domain,
    pub kind: SeedKind,
    pub template: String,
    #[serde(default)]
    pub category: Option<String>,
    #[serde(default)]
    pub validated: bool,
}

impl SeedQuestion {
    /// Builds a seed, deriving its kind from the presence of `<...>`
    /// placeholders.
    pub fn new(domain: Domain, template: impl Into<String>, category: Option<String>) -> Self {
        let template = template.into().trim().to_owned();
        let kind = if has_placeholder(&template) {
            SeedKind::Wildcard
        } else {
            SeedKind::General
        };
        let category = category
            .map(|c| c.trim().to_owned())
            .filter(|c| !c.is_empty());
        Self {
            id: SeedId(content_digest(&[
                "seed",
                domain.key(),
                &template,
                category.as_deref().unwrap_or(""),
            ])),
            domain,
            kind,
            template,
            category,
            validated: false,
        }
    }

    pub fn placeholders(&self) -> Vec<&str> {
        PLACEHOLDER
            .find_iter(&self.template)
            .map(|m| m.as_str())
            .collect()
    }
}

pub fn has_placeholder(text: &str) -> bool {
    PLACEHOLDER.is_match(text)
}

#[derive(Debug, Error)]
pub enum SeedError {
    #[error("{file} line {line}: {reason}")]
    Parse {
        file: String,
        line: usize,
        reason: String,
    },
    #[error("seed file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("only {pool} eligible seeds, {wanted} requested")]
    InsufficientSeeds { pool: usize, wanted: usize },
    #[error("no captioned images in {0}")]
    NoCaptionedImages(Domain),
    #[error("seed `{0}` not found")]
    UnknownSeed(SeedId),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Parses one seed file. `file` is only used in error messages.
pub fn parse_seed_file(
    domain: Domain,
    file: &str,
    text: &str,
) -> Result<Vec<SeedQuestion>, SeedError> {
    let err = |line: usize, reason: String| SeedError::Parse {
        file: file.to_owned(),
        line,
        reason,
    };
    let mut section: Option<(SeedKind, Option<String>)> = None;
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let n = i + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line.starts_with('[') {
            let cap = HEADER
                .captures(line)
                .ok_or_else(|| err(n, format!("unrecognized header `{line}`")))?;
            let kind = if &cap[1] == "general" {
                SeedKind::General
            } else {
                SeedKind::Wildcard
            };
            section = Some((kind, cap.get(2).map(|m| m.as_str().to_owned())));
            continue;
        }
        let Some((kind, category)) = &section else {
            return Err(err(
                n,
                "seed before the first [general] or [wildcard] header".into(),
            ));
        };
        let seed = SeedQuestion::new(domain, line, category.clone());
        if seed.kind != *kind {
            let reason = match kind {
                SeedKind::General => "general seed contains a <placeholder>",
                SeedKind::Wildcard => "wildcard seed has no <placeholder>",
            };
            return Err(err(n, reason.into()));
        }
        if seen.insert(seed.id.clone()) {
            out.push(seed);
        }
    }
    Ok(out)
}

/// Seeds grouped by domain, as loaded from disk.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SeedBank {
    pub seeds: BTreeMap<Domain, Vec<SeedQuestion>>,
    pub warnings: Vec<String>,
}

impl SeedBank {
    pub fn counts(&self) -> BTreeMap<Domain, usize> {
        self.seeds.iter().map(|(d, s)| (*d, s.len())).collect()
    }

    pub fn by_category(&self, domain: Domain) -> BTreeMap<Option<String>, usize> {
        let mut out = BTreeMap::new();
        for s in self.seeds.get(&domain).into_iter().flatten() {
            *out.entry(s.category.clone()).or_insert(0) += 1;
        }
        out
    }

    pub fn all(&self) -> impl Iterator<Item = &SeedQuestion> {
        self.seeds.values().flatten()
    }
}

/// Loads every `<domain_key>.txt` in `dir`. Files for unknown domains are an
/// error; with-seed domains whose file yields no seeds produce a warning.
pub fn load_seed_bank(dir: &Path) -> Result<SeedBank, SeedError> {
    let io = |source| SeedError::Io {
        path: dir.display().to_string(),
        source,
    };
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(io)?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "txt"))
        .collect();
    entries.sort();
    let mut bank = SeedBank::default();
    for path in entries {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default();
        let file = path.display().to_string();
        let domain: Domain = stem.parse().map_err(|_| SeedError::Parse {
            file: file.clone(),
            line: 0,
            reason: format!("file name `{stem}` is not a domain key"),
        })?;
        let text = fs::read_to_string(&path).map_err(|source| SeedError::Io {
            path: file.clone(),
            source,
        })?;
        let seeds = parse_seed_file(domain, &file, &text)?;
        match domain.prompt_mode() {
            PromptMode::WithSeed if seeds.is_empty() => bank
                .warnings
                .push(format!("{file}: no seeds for with-seed domain {domain}")),
            PromptMode::NoSeed | PromptMode::MultiRound if !seeds.is_empty() => {
                bank.warnings.push(format!(
                    "{file}: {domain} does not use seed questions; seeds ignored at generation"
                ))
            }
            _ => {}
        }
        bank.seeds.entry(domain).or_default().extend(seeds);
    }
    for w in &bank.warnings {
        log::warn!("{w}");
    }
    Ok(bank)
}

/// Persists a loaded bank. Seeds already in the store keep their validation
/// flag; `trusted` marks every loaded seed as validated. Returns the number
/// of seed records written.
pub fn persist_bank(store: &Store, bank: &SeedBank, trusted: bool) -> Result<usize, SeedError> {
    let mut written = 0;
    for seed in bank.all() {
        let mut seed = seed.clone();
        seed.validated = trusted || store.seed(&seed.id).is_some_and(|s| s.validated);
        if store.put_seed(seed)? {
            written += 1;
        }
    }
    Ok(written)
}

/// Validated seeds of `domain`, restricted to `category` when given, in id
/// order.
pub fn eligible<'a>(
    pool: &'a [SeedQuestion],
    domain: Domain,
    category: Option<&str>,
) -> Vec<&'a SeedQuestion> {
    let mut out: Vec<&SeedQuestion> = pool
        .iter()
        .filter(|s| s.validated && s.domain == domain)
        .filter(|s| category.is_none_or(|c| s.category.as_deref() == Some(c)))
        .collect();
    out.sort_by(|a, b| a.id.cmp(&b.id));
    out
}

/// Draws `n` distinct items uniformly without replacement.
pub fn draw<'a, T>(
    rng: &mut ChaCha8Rng,
    pool: &[&'a T],
    n: usize,
) -> Result<Vec<&'a T>, SeedError> {
    if pool.len() < n {
        return Err(SeedError::InsufficientSeeds {
            pool: pool.len(),
            wanted: n,
        });
    }
    Ok(index::sample(rng, pool.len(), n)
        .into_iter()
        .map(|i| pool[i])
        .collect())
}

/// A reproducible stream of seed samples.
pub struct SeedSampler {
    rng: ChaCha8Rng,
}

impl SeedSampler {
    pub fn new(rng_seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
        }
    }

    pub fn sample(
        &mut self,
        pool: &[SeedQuestion],
        domain: Domain,
        category: Option<&str>,
        n: usize,
    ) -> Result<Vec<SeedQuestion>, SeedError> {
        let candidates = eligible(pool, domain, category);
        Ok(draw(&mut self.rng, &candidates, n)?
            .into_iter()
            .cloned()
            .collect())
    }
}

/// One-shot sample of `n` validated seeds.
pub fn sample_seeds(
    pool: &[SeedQuestion],
    domain: Domain,
    category: Option<&str>,
    n: usize,
    rng_seed: u64,
) -> Result<Vec<SeedQuestion>, SeedError> {
    SeedSampler::new(rng_seed).sample(pool, domain, category, n)
}

/// Runs one trial generation without persisting anything. Returns the
/// number of parsed items or a description of the failure.
pub trait TrialGenerator {
    fn trial(
        &self,
        image: &ImageRecord,
        caption: &CaptionRecord,
        qtype: QuestionType,
        seeds: &[SeedQuestion],
    ) -> Result<usize, String>;
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedUsage {
    pub calls: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub image_id: crate::model::ImageId,
    pub qtype: QuestionType,
    pub seed_ids: Vec<SeedId>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedValidationReport {
    pub domain: Domain,
    pub trials: Vec<TrialOutcome>,
    pub parse_success_rate: f64,
    pub usage: BTreeMap<SeedId, SeedUsage>,
    /// Seeds that took part in at least one failed trial.
    pub offending: Vec<SeedId>,
}

impl SeedValidationReport {
    pub fn seed_ids(&self) -> impl Iterator<Item = &SeedId> {
        self.usage.keys()
    }
}

pub const VALIDATION_SAMPLE_LIMIT: usize = 10;

/// Generates a small trial batch over up to ten captioned images of `domain`
/// using candidate (not necessarily validated) seeds. Question types rotate
/// through the single-turn kinds so every output format is exercised.
pub fn validate_seeds_small_batch(
    store: &Store,
    domain: Domain,
    n_seed_refs: usize,
    rng_seed: u64,
    generator: &dyn TrialGenerator,
) -> Result<SeedValidationReport, SeedError> {
    let images: Vec<(ImageRecord, CaptionRecord)> = store
        .images_in_state(crate::model::ImageState::Captioned)
        .into_iter()
        .filter(|i| i.domain == domain)
        .filter_map(|i| store.caption(&i.id).map(|c| (i, c)))
        .take(VALIDATION_SAMPLE_LIMIT)
        .collect();
    if images.is_empty() {
        return Err(SeedError::NoCaptionedImages(domain));
    }
    let candidates: Vec<SeedQuestion> = store
        .seeds()
        .into_iter()
        .filter(|s| s.domain == domain)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut trials = Vec::new();
    let mut usage: BTreeMap<SeedId, SeedUsage> = BTreeMap::new();
    for (i, (image, caption)) in images.iter().enumerate() {
        let qtype = if domain.is_multi_round() {
            QuestionType::MultiRound
        } else {
            QuestionType::SINGLE_TURN[i % QuestionType::SINGLE_TURN.len()]
        };
        let mut pool: Vec<&SeedQuestion> = candidates
            .iter()
            .filter(|s| image.category.is_none() || s.category == image.category)
            .collect();
        pool.sort_by(|a, b| a.id.cmp(&b.id));
        let seeds: Vec<SeedQuestion> = match domain.prompt_mode() {
            PromptMode::WithSeed => draw(&mut rng, &pool, n_seed_refs)?
                .into_iter()
                .cloned()
                .collect(),
            _ => Vec::new(),
        };
        let error = generator.trial(image, caption, qtype, &seeds).err();
        for s in &seeds {
            let u = usage.entry(s.id.clone()).or_default();
            u.calls += 1;
            u.failures += usize::from(error.is_some());
        }
        trials.push(TrialOutcome {
            image_id: image.id.clone(),
            qtype,
            seed_ids: seeds.iter().map(|s| s.id.clone()).collect(),
            error,
        });
    }
    let ok = trials.iter().filter(|t| t.error.is_none()).count();
    let offending = usage
        .iter()
        .filter(|(_, u)| u.failures > 0)
        .map(|(id, _)| id.clone())
        .collect();
    Ok(SeedValidationReport {
        domain,
        parse_success_rate: ok as f64 / trials.len() as f64,
        trials,
        usage,
        offending,
    })
}

/// Records a human approval of a validation report: every seed listed in
/// the report, except those in `exclude`, becomes validated.
pub fn approve_report(
    store: &Store,
    report: &SeedValidationReport,
    exclude: &[SeedId],
) -> Result<usize, SeedError> {
    let mut flipped = 0;
    for id in report.seed_ids().filter(|id| !exclude.contains(id)) {
        let mut seed = store
            .seed(id)
            .ok_or_else(|| SeedError::UnknownSeed(id.clone()))?;
        if !seed.validated {
            seed.validated = true;
            store.put_seed(seed)?;
            flipped += 1;
        }
    }
    Ok(flipped)
}
