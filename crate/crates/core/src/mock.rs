//! Deterministic stand-ins for every backend contract.
//!
//! Fixture directory layout:
//!
//! ```text
//! captions/<image_id>.txt     caption per image
//! ocr/<image_id>.txt          OCR text per image (empty file = no text)
//! llm/<fingerprint>.txt       text-backend response per prompt fingerprint
//! fetch.json                  {"<phrase>": [{"uri", "file" | "bytes_hex", "tags"}]}
//! index.json                  {"<anchor id or uri>": [{"uri", "file" | "bytes_hex", "tags"}]}
//! ```
//!
//! In `Strict` mode a missing entry is `FixtureMissing`. `Synthesize`
//! derives a response from the request itself, and `Record` does the same
//! and writes the result back so that later strict runs replay it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::backend::{
    BackendError, FetchError, FetchedImage, ImageFetcher, IndexError, OcrBackend, SimilarityIndex,
    TextBackend, TextRequest, VisionBackend, VisionRequest,
};
use crate::generator::{MULTI_ROUND_ANCHOR, SEED_ANCHOR};
use crate::model::{content_digest, Domain, ImageRecord, QuestionType};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixtureMode {
    #[default]
    Strict,
    Synthesize,
    Record,
}

/// Call-count driven failures, applied on top of any mock.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FaultProfile {
    /// The first n calls fail with a transient error.
    pub fail_first: usize,
    /// Calls after the first n time out.
    pub timeout_after: Option<usize>,
    /// Zero-based call indices whose text output is mangled.
    pub malformed_at: Vec<usize>,
    /// Fetch calls allowed before the quota is exhausted.
    pub quota: Option<usize>,
}

enum Fault {
    None,
    Fail,
    Timeout,
    Malformed,
}

#[derive(Debug, Default)]
struct Faults {
    profile: FaultProfile,
    calls: AtomicUsize,
}

impl Faults {
    fn next(&self) -> Fault {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        let p = &self.profile;
        if n < p.fail_first {
            Fault::Fail
        } else if p.timeout_after.is_some_and(|t| n >= t) {
            Fault::Timeout
        } else if p.malformed_at.contains(&n) {
            Fault::Malformed
        } else {
            Fault::None
        }
    }
}

/// Removes every `D.` option line and the final answer line, which breaks
/// multiple-choice blocks and leaves other types without an answer.
pub fn mangle(text: &str) -> String {
    let mut lines: Vec<&str> = text
        .lines()
        .filter(|l| !l.trim_start().starts_with("D."))
        .collect();
    if let Some(pos) = lines
        .iter()
        .rposition(|l| l.trim_start().starts_with("Answer:"))
    {
        lines.remove(pos);
    }
    lines.join("\n")
}

fn table_lookup(
    dir: Option<&Path>,
    sub: &str,
    key: &str,
    mode: FixtureMode,
    synth: impl FnOnce() -> String,
) -> Result<String, BackendError> {
    let path = dir.map(|d| d.join(sub).join(format!("{key}.txt")));
    if let Some(p) = &path {
        if let Ok(text) = fs::read_to_string(p) {
            return Ok(text);
        }
    }
    match mode {
        FixtureMode::Strict => Err(BackendError::FixtureMissing(format!("{sub}/{key}"))),
        FixtureMode::Synthesize => Ok(synth()),
        FixtureMode::Record => {
            let text = synth();
            if let Some(p) = &path {
                let write = || -> std::io::Result<()> {
                    fs::create_dir_all(p.parent().expect("fixture file has a parent"))?;
                    fs::write(p, &text)
                };
                write().map_err(|e| {
                    BackendError::Config(format!("cannot record {}: {e}", p.display()))
                })?;
            }
            Ok(text)
        }
    }
}

/// Caption backend keyed by image id.
#[derive(Debug, Default)]
pub struct MockVision {
    dir: Option<PathBuf>,
    mode: FixtureMode,
    faults: Faults,
}

impl MockVision {
    pub fn new(dir: Option<PathBuf>, mode: FixtureMode) -> Self {
        Self {
            dir,
            mode,
            faults: Faults::default(),
        }
    }

    pub fn with_faults(mut self, profile: FaultProfile) -> Self {
        self.faults.profile = profile;
        self
    }
}

/// A deterministic caption of at least forty words built from the image's
/// own metadata.
pub fn synthesize_caption(image: &ImageRecord) -> String {
    let tags = if image.tags.is_empty() {
        "an everyday scene".to_owned()
    } else {
        image.tags.join(", ")
    };
    let name = image.domain.name();
    let article = if name.starts_with(['a', 'e', 'i', 'o', 'u', 'O']) {
        "an"
    } else {
        "a"
    };
    let mut s = format!(
        "The image is {article} {name} photograph centred on {tags}. The main subject sits in the middle of the frame \
         under soft natural light, with a plain background that keeps attention on it. Colours are muted \
         with a few brighter accents near the edges, and the overall composition is balanced and calm."
    );
    if let Some(ocr) = image.ocr_text.as_deref().filter(|t| !t.trim().is_empty()) {
        s.push_str(&format!(" Visible text reads \"{}\".", ocr.trim()));
    }
    s
}

impl VisionBackend for MockVision {
    fn id(&self) -> &str {
        "mock-vision"
    }

    fn describe(&self, req: &VisionRequest<'_>) -> Result<String, BackendError> {
        match self.faults.next() {
            Fault::Fail => return Err(BackendError::Unavailable("injected failure".into())),
            Fault::Timeout => return Err(BackendError::Timeout),
            Fault::Malformed => return Ok(String::new()),
            Fault::None => {}
        }
        table_lookup(
            self.dir.as_deref(),
            "captions",
            req.image.id.as_str(),
            self.mode,
            || synthesize_caption(req.image),
        )
    }
}

/// OCR backend keyed by image id.
#[derive(Debug, Default)]
pub struct MockOcr {
    dir: Option<PathBuf>,
    mode: FixtureMode,
}

impl MockOcr {
    pub fn new(dir: Option<PathBuf>, mode: FixtureMode) -> Self {
        Self { dir, mode }
    }
}

impl OcrBackend for MockOcr {
    fn recognize(
        &self,
        image: &ImageRecord,
        _bytes: Option<&[u8]>,
    ) -> Result<String, BackendError> {
        table_lookup(
            self.dir.as_deref(),
            "ocr",
            image.id.as_str(),
            self.mode,
            || image.ocr_text.clone().unwrap_or_default(),
        )
    }
}

/// Text backend keyed by prompt fingerprint.
#[derive(Debug, Default)]
pub struct MockText {
    dir: Option<PathBuf>,
    mode: FixtureMode,
    faults: Faults,
}

impl MockText {
    pub fn new(dir: Option<PathBuf>, mode: FixtureMode) -> Self {
        Self {
            dir,
            mode,
            faults: Faults::default(),
        }
    }

    pub fn with_faults(mut self, profile: FaultProfile) -> Self {
        self.faults.profile = profile;
        self
    }
}

impl TextBackend for MockText {
    fn id(&self) -> &str {
        "mock-text"
    }

    fn complete(&self, req: &TextRequest<'_>) -> Result<String, BackendError> {
        let fault = self.faults.next();
        match fault {
            Fault::Fail => return Err(BackendError::Unavailable("injected failure".into())),
            Fault::Timeout => return Err(BackendError::Timeout),
            _ => {}
        }
        let text = table_lookup(
            self.dir.as_deref(),
            "llm",
            req.fingerprint,
            self.mode,
            || synthesize_response(req.prompt),
        )?;
        Ok(match fault {
            Fault::Malformed => mangle(&text),
            _ => text,
        })
    }
}

static COUNT_TYPE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?:design|ask) (\d+) (.+?) questions").unwrap());
static DOMAIN: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?:topic of|used in the) (.+?)(?: task|\.)").unwrap());
static SEED_LINE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\d+\.\s+(.*)$").unwrap());
static PLACEHOLDER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"<[^<>\n]+>").unwrap());
static WORD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[A-Za-z]{4,}").unwrap());

/// What the synthesizer could read back out of a generation prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptFacts {
    pub qtype: QuestionType,
    pub count: usize,
    pub domain: String,
    pub caption: String,
    pub seeds: Vec<String>,
}

pub fn prompt_facts(prompt: &str) -> Option<PromptFacts> {
    let caption = prompt
        .lines()
        .find_map(|l| l.strip_prefix("Image description: "))
        .unwrap_or_default()
        .to_owned();
    if prompt.contains(MULTI_ROUND_ANCHOR) {
        return Some(PromptFacts {
            qtype: QuestionType::MultiRound,
            count: 5,
            domain: Domain::MultiRoundLongVqa.name().to_owned(),
            caption,
            seeds: Vec::new(),
        });
    }
    let c = COUNT_TYPE.captures(prompt)?;
    let count: usize = c[1].parse().ok()?;
    let qtype = QuestionType::ALL
        .into_iter()
        .find(|q| q.prompt_label() == &c[2])?;
    let domain = DOMAIN
        .captures(prompt)
        .map(|d| d[1].to_owned())
        .unwrap_or_default();
    let mut seeds = Vec::new();
    if let Some(start) = prompt.find(SEED_ANCHOR) {
        for line in prompt[start + SEED_ANCHOR.len()..].lines().skip(1) {
            match SEED_LINE.captures(line) {
                Some(s) => seeds.push(s[1].to_owned()),
                None => break,
            }
        }
    }
    Some(PromptFacts {
        qtype,
        count,
        domain,
        caption,
        seeds,
    })
}

fn pick(key: &str, n: usize) -> usize {
    let d = content_digest(&["mock-pick", key]);
    (u64::from_str_radix(&d[..12], 16).expect("hex digest") % n as u64) as usize
}

/// A well-formed response that satisfies the prompt's own count and type.
/// Unrecognised prompts get a fixed refusal, which does not parse.
pub fn synthesize_response(prompt: &str) -> String {
    let Some(f) = prompt_facts(prompt) else {
        return "I am unable to follow this request.".into();
    };
    let mut words: Vec<String> = Vec::new();
    for w in WORD.find_iter(&f.caption) {
        let w = w.as_str().to_lowercase();
        if !words.contains(&w) {
            words.push(w);
        }
    }
    for filler in ["light", "shadow", "colour", "texture", "frame", "scene"] {
        if !words.iter().any(|w| w == filler) {
            words.push(filler.into());
        }
    }
    let sentences: Vec<&str> = f
        .caption
        .split_inclusive('.')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    let mut out = String::new();
    for i in 0..f.count {
        let key = format!("{prompt}#{i}");
        let word = &words[pick(&key, words.len())];
        let question = match f.seeds.get(i) {
            Some(seed) => PLACEHOLDER
                .replace_all(seed, word.as_str())
                .trim()
                .to_owned(),
            None if f.qtype == QuestionType::MultiRound => {
                format!("Building on the previous answer, what can be said about the {word} in step {}?", i + 1)
            }
            None => format!(
                "Regarding this {} image, what is notable about the {word} (point {})?",
                f.domain,
                i + 1
            ),
        };
        out.push_str(&format!("Question {}: {question}\n", i + 1));
        match f.qtype {
            QuestionType::Judgment => {
                let a = if pick(&key, 2) == 0 { "Yes" } else { "No" };
                out.push_str(&format!("Answer: {a}\n"));
            }
            QuestionType::MultipleChoice => {
                let start = pick(&key, words.len());
                let correct = pick(&format!("{key}!"), 4);
                for k in 0..4 {
                    let opt = &words[(start + k) % words.len()];
                    out.push_str(&format!("{}. {opt}\n", (b'A' + k as u8) as char));
                }
                out.push_str(&format!("Answer: {}\n", (b'A' + correct as u8) as char));
            }
            QuestionType::ShortVqa => out.push_str(&format!("Answer: {word}\n")),
            QuestionType::LongVqa | QuestionType::MultiRound => {
                let from = if sentences.is_empty() {
                    0
                } else {
                    pick(&key, sentences.len())
                };
                let body: Vec<&str> = sentences
                    .iter()
                    .cycle()
                    .skip(from)
                    .take(2.min(sentences.len()))
                    .copied()
                    .collect();
                let body = if body.is_empty() {
                    format!("The {word} is the clearest detail in the picture.")
                } else {
                    body.join(" ")
                };
                out.push_str(&format!("Answer: {body}\n"));
            }
        }
        out.push('\n');
    }
    out
}

/// One fixture entry: bytes inline as hex or as a file next to the table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureImage {
    pub uri: String,
    #[serde(default)]
    pub file: Option<String>,
    #[serde(default)]
    pub bytes_hex: Option<String>,
    #[serde(default)]
    pub tags: Vec<String>,
}

impl FixtureImage {
    fn resolve(&self, base: &Path) -> Result<FetchedImage, String> {
        let bytes = match (&self.file, &self.bytes_hex) {
            (Some(f), _) => fs::read(base.join(f)).map_err(|e| format!("{f}: {e}"))?,
            (None, Some(h)) => hex::decode(h).map_err(|e| format!("{}: {e}", self.uri))?,
            (None, None) => return Err(format!("{}: neither file nor bytes_hex", self.uri)),
        };
        Ok(FetchedImage {
            uri: self.uri.clone(),
            bytes,
            tags: self.tags.clone(),
        })
    }
}

fn load_table(path: &Path) -> Result<BTreeMap<String, Vec<FetchedImage>>, BackendError> {
    if !path.exists() {
        return Ok(BTreeMap::new());
    }
    let text = fs::read_to_string(path)
        .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
    let raw: BTreeMap<String, Vec<FixtureImage>> = serde_json::from_str(&text)
        .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    raw.into_iter()
        .map(|(k, v)| {
            let imgs = v
                .iter()
                .map(|i| i.resolve(base))
                .collect::<Result<Vec<_>, _>>()
                .map_err(BackendError::Config)?;
            Ok((k, imgs))
        })
        .collect()
}

/// Fetcher answering from `fetch.json`. Unknown phrases return nothing.
#[derive(Debug, Default)]
pub struct MockFetcher {
    table: BTreeMap<String, Vec<FetchedImage>>,
    quota: Option<usize>,
    calls: AtomicUsize,
}

impl MockFetcher {
    pub fn load(dir: &Path) -> Result<Self, BackendError> {
        Ok(Self::from_table(load_table(&dir.join("fetch.json"))?))
    }

    pub fn from_table(table: BTreeMap<String, Vec<FetchedImage>>) -> Self {
        Self {
            table,
            ..Self::default()
        }
    }

    pub fn with_quota(mut self, quota: Option<usize>) -> Self {
        self.quota = quota;
        self
    }
}

impl ImageFetcher for MockFetcher {
    fn fetch(&self, phrase: &str, _domain: Domain) -> Result<Vec<FetchedImage>, FetchError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        if self.quota.is_some_and(|q| n >= q) {
            return Err(FetchError::QuotaExceeded);
        }
        Ok(self.table.get(phrase).cloned().unwrap_or_default())
    }
}

/// Similarity index answering from `index.json`, keyed by anchor id or uri.
#[derive(Debug, Default)]
pub struct MockIndex {
    table: BTreeMap<String, Vec<FetchedImage>>,
}

impl MockIndex {
    pub fn load(dir: &Path) -> Result<Self, BackendError> {
        Ok(Self::from_table(load_table(&dir.join("index.json"))?))
    }

    pub fn from_table(table: BTreeMap<String, Vec<FetchedImage>>) -> Self {
        Self { table }
    }
}

impl SimilarityIndex for MockIndex {
    fn name(&self) -> &str {
        "mock-index"
    }

    fn neighbors(&self, anchor: &ImageRecord, k: usize) -> Result<Vec<FetchedImage>, IndexError> {
        let hits = self
            .table
            .get(anchor.id.as_str())
            .or_else(|| self.table.get(&anchor.uri))
            .cloned()
            .unwrap_or_default();
        Ok(hits.into_iter().take(k).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::{parse_generation_response, GenerationTemplates};
    use crate::model::{prompt_fingerprint, CaptionRecord, Extra, ImageState, SourceChannel};

    fn image(domain: Domain) -> ImageRecord {
        let mut i = ImageRecord::collected(
            b"f1",
            "f1.png",
            SourceChannel::OpenSource,
            domain,
            vec!["tower".into()],
        );
        i.state = ImageState::Captioned;
        i
    }

    fn vreq<'a>(img: &'a ImageRecord) -> VisionRequest<'a> {
        VisionRequest {
            model: "m",
            max_tokens: 10,
            temperature: 0.0,
            image: img,
            image_bytes: None,
            prompt: "p",
        }
    }

    fn treq<'a>(prompt: &'a str, fp: &'a str) -> TextRequest<'a> {
        TextRequest {
            model: "m",
            max_tokens: 10,
            temperature: 0.0,
            prompt,
            fingerprint: fp,
        }
    }

    #[test]
    fn fixture_caption_is_stable_and_strict_mode_misses() {
        let dir = tempfile::tempdir().unwrap();
        let img = image(Domain::Landmark);
        fs::create_dir_all(dir.path().join("captions")).unwrap();
        fs::write(
            dir.path().join("captions").join(format!("{}.txt", img.id)),
            "A fixed caption.",
        )
        .unwrap();
        let v = MockVision::new(Some(dir.path().into()), FixtureMode::Strict);
        assert_eq!(v.describe(&vreq(&img)).unwrap(), "A fixed caption.");
        assert_eq!(v.describe(&vreq(&img)).unwrap(), "A fixed caption.");
        let other = image(Domain::Ocr);
        let mut other = other;
        other.id = crate::model::ImageId("other".into());
        assert!(matches!(
            v.describe(&vreq(&other)),
            Err(BackendError::FixtureMissing(_))
        ));
    }

    #[test]
    fn record_mode_writes_replayable_fixtures() {
        let dir = tempfile::tempdir().unwrap();
        let rec = MockText::new(Some(dir.path().into()), FixtureMode::Record);
        let prompt = "Given a description of the image, you need to ask 3 Short VQA questions about the image that can be used in the complex reasoning task and generate corresponding answers.\nImage description: A red kite over a beach.";
        let fp = prompt_fingerprint(prompt);
        let a = rec.complete(&treq(prompt, &fp)).unwrap();
        let strict = MockText::new(Some(dir.path().into()), FixtureMode::Strict);
        assert_eq!(strict.complete(&treq(prompt, &fp)).unwrap(), a);
        assert!(strict.complete(&treq(prompt, "nope")).is_err());
    }

    #[test]
    fn timeout_after_two() {
        let t = MockText::new(None, FixtureMode::Synthesize).with_faults(FaultProfile {
            timeout_after: Some(2),
            ..FaultProfile::default()
        });
        assert!(t.complete(&treq("x", "f")).is_ok());
        assert!(t.complete(&treq("x", "f")).is_ok());
        assert_eq!(t.complete(&treq("x", "f")), Err(BackendError::Timeout));
    }

    fn generation_prompt(domain: Domain, qtype: QuestionType, seeds: &[&str]) -> String {
        let img = image(domain);
        let cap = CaptionRecord {
            image_id: img.id.clone(),
            text: synthesize_caption(&img),
            backend_id: "m".into(),
            prompt_fingerprint: prompt_fingerprint("p"),
            prompt: "p".into(),
            extra: Extra::new(),
        };
        let seeds: Vec<_> = seeds
            .iter()
            .map(|s| crate::seedbank::SeedQuestion::new(domain, *s, None))
            .collect();
        crate::generator::build_generation_prompt(
            &cap,
            &img,
            qtype,
            &seeds,
            &GenerationTemplates::default(),
            3,
            3,
        )
        .unwrap()
    }

    #[test]
    fn synthesized_responses_parse_for_every_type() {
        let seeds = [
            "What is the name of this <place>?",
            "Where is this?",
            "Who built this?",
        ];
        for q in QuestionType::SINGLE_TURN {
            let p = generation_prompt(Domain::Landmark, q, &seeds);
            let facts = prompt_facts(&p).unwrap();
            assert_eq!((facts.qtype, facts.count, facts.seeds.len()), (q, 3, 3));
            let raw = synthesize_response(&p);
            let items =
                parse_generation_response(&raw, q, 3).unwrap_or_else(|e| panic!("{q}: {e}\n{raw}"));
            assert!(!items[0].question.contains('<'));
        }
        let p = generation_prompt(Domain::ComplexReasoning, QuestionType::LongVqa, &[]);
        parse_generation_response(&synthesize_response(&p), QuestionType::LongVqa, 3).unwrap();
        let p = generation_prompt(Domain::MultiRoundLongVqa, QuestionType::MultiRound, &[]);
        parse_generation_response(&synthesize_response(&p), QuestionType::MultiRound, 5).unwrap();
    }

    #[test]
    fn malformed_fault_breaks_mc_options() {
        let p = generation_prompt(
            Domain::Landmark,
            QuestionType::MultipleChoice,
            &["a?", "b?", "c?"],
        );
        let t = MockText::new(None, FixtureMode::Synthesize).with_faults(FaultProfile {
            malformed_at: vec![0],
            ..FaultProfile::default()
        });
        let raw = t.complete(&treq(&p, "f")).unwrap();
        assert!(matches!(
            parse_generation_response(&raw, QuestionType::MultipleChoice, 3),
            Err(crate::generator::ParseError::MalformedOptions { item: 1, .. })
        ));
    }

    #[test]
    fn index_and_fetcher_tables() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.png"), b"aaa").unwrap();
        fs::write(
            dir.path().join("fetch.json"),
            r#"{"eiffel tower": [{"uri": "web/a.png", "file": "a.png", "tags": ["tower"]}, {"uri": "web/b.png", "bytes_hex": "6262"}]}"#,
        )
        .unwrap();
        let f = MockFetcher::load(dir.path()).unwrap().with_quota(Some(1));
        let got = f.fetch("eiffel tower", Domain::Landmark).unwrap();
        assert_eq!(got[0].bytes, b"aaa");
        assert_eq!(got[1].bytes, b"bb");
        assert_eq!(
            f.fetch("eiffel tower", Domain::Landmark),
            Err(FetchError::QuotaExceeded)
        );

        fs::write(
            dir.path().join("index.json"),
            r#"{"f1.png": [{"uri": "n1", "bytes_hex": "01"}, {"uri": "n2", "bytes_hex": "02"}]}"#,
        )
        .unwrap();
        let idx = MockIndex::load(dir.path()).unwrap();
        assert_eq!(idx.neighbors(&image(Domain::Landmark), 5).unwrap().len(), 2);
        assert_eq!(idx.neighbors(&image(Domain::Landmark), 1).unwrap().len(), 1);
    }
}
