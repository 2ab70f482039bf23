//! Command-line front end. Every verb writes its result to `out`, so tests
//! can drive the whole tool in-process.

use std::fs;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use instruct_engine::clock::SystemClock;
use instruct_engine::converter::{convert_source, AdapterRegistry};
use instruct_engine::costing::{estimate_breakdown, EstimateMode, PriceTable};
use instruct_engine::exporter::{
    dataset_stats, export_dataset, ExportFilter, ExportProfile, OutputFormat, StatsSelection,
};
use instruct_engine::generator::pending_units;
use instruct_engine::ingest::{
    auto_screen, crawl_channel, expand_similar, import_manifest, ChannelReport, KeyPhraseSet,
    SimilarityQuery,
};
use instruct_engine::mock::{FixtureMode, MockFetcher, MockIndex};
use instruct_engine::model::{BatchId, Domain, ImageId, QuestionType, SeedId, TaskId};
use instruct_engine::pipeline::{
    Pipeline, PipelineConfig, PipelineError, RunReport, Stage, StageRange,
};
use instruct_engine::review::{select_unreviewed, Correction, ReviewService, Verdict};
use instruct_engine::seedbank::{
    approve_report, load_seed_bank, persist_bank, sample_seeds, validate_seeds_small_batch,
    SeedValidationReport,
};
use instruct_engine::store::Store;

#[derive(Debug, Parser)]
#[command(
    name = "instruct-engine",
    version,
    about = "Semi-automatic visual instruction data engine"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Pipeline config (TOML). Without it, defaults apply and `--store` picks the store.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Store directory; overrides the config.
    #[arg(long, global = true)]
    pub store: Option<PathBuf>,
    /// Swap every backend for the deterministic fixture doubles.
    #[arg(long, global = true)]
    pub mock: bool,
    /// Fixture directory for the mock backends.
    #[arg(long, global = true)]
    pub fixtures: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub fixture_mode: Option<FixtureModeArg>,
    /// More log output on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FixtureModeArg {
    Strict,
    Synthesize,
    Record,
}

impl From<FixtureModeArg> for FixtureMode {
    fn from(m: FixtureModeArg) -> Self {
        match m {
            FixtureModeArg::Strict => FixtureMode::Strict,
            FixtureModeArg::Synthesize => FixtureMode::Synthesize,
            FixtureModeArg::Record => FixtureMode::Record,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Collect images (stage a).
    #[command(subcommand)]
    Ingest(IngestCmd),
    /// Caption screened images (stage b).
    Caption {
        #[arg(long)]
        domain: Vec<String>,
    },
    /// Manage seed questions (stage c).
    #[command(subcommand)]
    Seeds(SeedsCmd),
    /// Generate instructions for captioned images (stages d and e).
    Generate {
        #[arg(long)]
        domain: Option<String>,
        #[arg(long)]
        qtype: Option<String>,
        #[arg(long)]
        limit: Option<usize>,
        /// Backend profile name.
        #[arg(long)]
        backend: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Convert an external dataset through an adapter.
    Convert {
        #[arg(long)]
        adapter: String,
        #[arg(long)]
        manifest: PathBuf,
        /// Extra adapter spec files.
        #[arg(long)]
        adapters_dir: Option<PathBuf>,
    },
    /// Human review rounds (stage f).
    #[command(subcommand)]
    Review(ReviewCmd),
    /// Cost estimates and the spend ledger.
    #[command(subcommand)]
    Cost(CostCmd),
    /// Export accepted records.
    Export {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "conversations")]
        profile: String,
        #[arg(long, value_enum, default_value = "jsonl")]
        format: FormatArg,
        #[arg(long)]
        domain: Vec<String>,
        #[arg(long)]
        qtype: Vec<String>,
    },
    /// Dataset statistics.
    Stats {
        /// Count accepted records only.
        #[arg(long)]
        accepted: bool,
        #[arg(long)]
        json: bool,
    },
    /// Run stages end to end.
    Run {
        /// Stage range, e.g. `a..f`, `caption..generate` or `d`.
        #[arg(long, default_value = "a..f")]
        stages: String,
        /// Resume point; overrides the start of `--stages`.
        #[arg(long)]
        from: Option<String>,
        /// Report pending work and estimated cost without side effects.
        #[arg(long)]
        dry_run: bool,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Jsonl,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum IngestCmd {
    /// Import a JSONL manifest of local images.
    Import {
        #[arg(long)]
        manifest: PathBuf,
        /// Auto-screen afterwards (hermetic runs only).
        #[arg(long)]
        screen: bool,
    },
    /// Crawl one domain's key phrases through the fixture fetcher.
    Crawl {
        #[arg(long)]
        domain: String,
        #[arg(long)]
        phrases: PathBuf,
        /// Directory holding fetch.json; defaults to the fixtures directory.
        #[arg(long)]
        fetch_table: Option<PathBuf>,
    },
    /// Add visually similar neighbours of a screened anchor image.
    Expand {
        #[arg(long)]
        anchor: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Directory holding index.json; defaults to the fixtures directory.
        #[arg(long)]
        index: Option<PathBuf>,
    },
    /// Approve every collected image that is not a near-duplicate.
    Screen,
}

#[derive(Debug, Subcommand)]
pub enum SeedsCmd {
    Load {
        #[arg(long)]
        dir: Option<PathBuf>,
        /// Mark every loaded seed validated.
        #[arg(long)]
        trusted: bool,
    },
    Sample {
        #[arg(long)]
        domain: String,
        #[arg(short, default_value_t = 3)]
        n: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        category: Option<String>,
    },
    /// Run a small trial batch with candidate seeds and write the report.
    Validate {
        #[arg(long)]
        domain: String,
        #[arg(short, default_value_t = 3)]
        n: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Approve a validation report, optionally excluding seeds.
    Approve {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        exclude: Vec<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum ReviewCmd {
    /// Serve the review HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
    /// Open a review batch over unreviewed records of a domain.
    Open {
        #[arg(long)]
        domain: String,
        #[arg(long, default_value_t = 50)]
        limit: usize,
        #[arg(long, default_value_t = 3)]
        min_rounds: u32,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value = "cli")]
        by: String,
    },
    /// Batch summaries.
    List,
    /// Lease the next task of a batch.
    Next {
        #[arg(long)]
        batch: String,
        #[arg(long)]
        reviewer: String,
    },
    /// Record a verdict on a leased task.
    Verdict {
        #[arg(long)]
        task: String,
        #[arg(long)]
        reviewer: String,
        #[arg(long, conflicts_with_all = ["reject", "correct"])]
        approve: bool,
        #[arg(long, conflicts_with = "correct")]
        reject: bool,
        #[arg(long, requires = "reject")]
        reason: Option<String>,
        /// Correction as JSON, e.g. `{"answer": "..."}`.
        #[arg(long)]
        correct: Option<String>,
    },
    /// Close a finished round and start the next one.
    Advance {
        #[arg(long)]
        batch: String,
        #[arg(long, default_value = "cli")]
        by: String,
    },
}

#[derive(Debug, Subcommand)]
pub enum CostCmd {
    /// Price a dataset of the given size.
    Estimate {
        #[arg(long)]
        images: u64,
        #[arg(long)]
        instructions: u64,
        #[arg(long, value_enum, default_value = "engine")]
        mode: ModeArg,
        #[arg(long)]
        breakdown: bool,
    },
    /// Ledger counters and spend recorded in the store.
    Ledger,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Engine,
    Manual,
}

/// Failure with its process exit code.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Stage(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Stage(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Stage(m) => write!(f, "stage failure: {m}"),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(m) => CliError::Config(m),
            other => CliError::Stage(other.to_string()),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn stage_err(e: impl std::fmt::Display) -> CliError {
    CliError::Stage(e.to_string())
}

fn io_err(e: std::io::Error) -> CliError {
    CliError::Stage(e.to_string())
}

type CliResult = Result<(), CliError>;

fn domain(s: &str) -> Result<Domain, CliError> {
    s.parse().map_err(config_err)
}

fn qtype(s: &str) -> Result<QuestionType, CliError> {
    s.parse().map_err(config_err)
}

/// Parses `argv` and runs it. Returns the process exit code.
pub fn run<I, T>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("instruct-engine: {e}");
            e.exit_code()
        }
    }
}

pub fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

struct Ctx {
    config: PipelineConfig,
}

impl Ctx {
    fn new(g: &Global) -> Result<Self, CliError> {
        let mut config = match &g.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(s) = &g.store {
            config.store = s.clone();
        }
        config.mock |= g.mock;
        if let Some(f) = &g.fixtures {
            config.fixtures = Some(f.clone());
        }
        if let Some(m) = g.fixture_mode {
            config.fixture_mode = m.into();
        }
        Ok(Self { config })
    }

    fn store(&self) -> Result<Arc<Store>, CliError> {
        Store::open(&self.config.store)
            .map(Arc::new)
            .map_err(config_err)
    }

    fn pipeline(&self) -> Result<Pipeline, CliError> {
        Ok(Pipeline::from_config(self.config.clone())?)
    }

    fn review(&self) -> Result<ReviewService, CliError> {
        Ok(ReviewService::new(self.store()?).with_suffixes(self.config.suffix_table()?))
    }

    fn fixture_dir(&self, explicit: Option<&PathBuf>, what: &str) -> Result<PathBuf, CliError> {
        explicit
            .or(self.config.fixtures.as_ref())
            .cloned()
            .ok_or_else(|| {
                CliError::Config(format!("{what} needs a directory (flag or --fixtures)"))
            })
    }
}

fn print_json<T: Serialize>(out: &mut dyn Write, v: &T) -> CliResult {
    serde_json::to_writer_pretty(&mut *out, v).map_err(stage_err)?;
    writeln!(out).map_err(io_err)
}

fn print_channel(out: &mut dyn Write, r: &ChannelReport) -> CliResult {
    writeln!(
        out,
        "fetched {} accepted {} duplicates {} flagged {} errors {}",
        r.fetched,
        r.accepted.len(),
        r.duplicates.len(),
        r.flagged.len(),
        r.errors.len()
    )
    .map_err(io_err)?;
    for e in &r.errors {
        writeln!(out, "  error: {e}").map_err(io_err)?;
    }
    for (p, e) in &r.failed_phrases {
        writeln!(out, "  phrase `{p}` failed: {e}").map_err(io_err)?;
    }
    if r.halted {
        writeln!(out, "  halted: fetch quota exhausted").map_err(io_err)?;
    }
    Ok(())
}

pub fn print_run_report(out: &mut dyn Write, r: &RunReport) -> std::io::Result<()> {
    if r.dry_run {
        writeln!(out, "dry run: nothing was written")?;
    }
    for s in &r.stages {
        let name = s.stage.map(|st| st.to_string()).unwrap_or_default();
        let counts: Vec<String> = s.counts.iter().map(|(k, v)| format!("{k}={v}")).collect();
        writeln!(out, "{name:<12} {}", counts.join(" "))?;
        if !s.ledger_delta.is_zero() {
            writeln!(
                out,
                "{:<12} ledger +{} captions +{} instructions +{} corrections = {} USD",
                "",
                s.ledger_delta.caption_count,
                s.ledger_delta.instruction_count,
                s.ledger_delta.correction_count,
                s.cost_delta.to_grouped()
            )?;
        }
        for n in &s.notes {
            writeln!(out, "{:<12} note: {n}", "")?;
        }
    }
    writeln!(
        out,
        "total: {} new records, {} USD",
        r.new_records,
        r.cost_delta.to_grouped()
    )?;
    if let (Some(s), Some(f)) = (r.resume_from, &r.failure) {
        writeln!(out, "failed in {s}: {f}")?;
        writeln!(out, "resume with: run --from {}", s.name())?;
    }
    Ok(())
}

pub fn execute(cli: Cli, out: &mut dyn Write) -> CliResult {
    init_logging(cli.global.verbose);
    // `cost estimate` must not need a store or config.
    if let Command::Cost(CostCmd::Estimate {
        images,
        instructions,
        mode,
        breakdown,
    }) = &cli.command
    {
        let price = match &cli.global.config {
            Some(p) => PipelineConfig::load(p)?.price,
            None => PriceTable::default(),
        };
        let mode = match mode {
            ModeArg::Engine => EstimateMode::Engine,
            ModeArg::Manual => EstimateMode::Manual,
        };
        let b = estimate_breakdown(*images, *instructions, mode, &price);
        if *breakdown {
            writeln!(out, "captions     {} USD", b.captions.to_grouped()).map_err(io_err)?;
            writeln!(out, "generation   {} USD", b.generation.to_grouped()).map_err(io_err)?;
            writeln!(out, "correction   {} USD", b.correction.to_grouped()).map_err(io_err)?;
            writeln!(out, "construction {} USD", b.construction.to_grouped()).map_err(io_err)?;
        }
        writeln!(out, "{} USD", b.total().to_grouped()).map_err(io_err)?;
        return Ok(());
    }
    let ctx = Ctx::new(&cli.global)?;
    match cli.command {
        Command::Ingest(cmd) => ingest(&ctx, cmd, out),
        Command::Caption { domain: ds } => {
            let mut cfg = ctx.config.clone();
            if !ds.is_empty() {
                cfg.domains = ds.iter().map(|d| domain(d)).collect::<Result<_, _>>()?;
            }
            let report = run_range(cfg, StageRange::only(Stage::Caption), false)?;
            print_run_report(out, &report).map_err(io_err)
        }
        Command::Seeds(cmd) => seeds(&ctx, cmd, out),
        Command::Generate {
            domain: d,
            qtype: q,
            limit,
            backend,
            seed,
        } => {
            let mut cfg = ctx.config.clone();
            if let Some(b) = backend {
                cfg.generation.config.backend_profile = b;
            }
            if let Some(s) = seed {
                cfg.generation.config.rng_seed = s;
            }
            let d = d.as_deref().map(domain).transpose()?;
            let q = q.as_deref().map(qtype).transpose()?;
            let p = Pipeline::from_config(cfg)?;
            let units = pending_units(&p.store, d, q, limit);
            let r = p
                .generator()
                .generate_all(&units, &p.store.seeds())
                .map_err(stage_err)?;
            writeln!(
                out,
                "calls {} inserted {} skipped {} reminded {} parse_failures {}",
                r.calls,
                r.inserted,
                r.skipped,
                r.reminded,
                r.parse_failures.len()
            )
            .map_err(io_err)?;
            for f in &r.parse_failures {
                writeln!(out, "  {}/{}: {}", f.image, f.qtype, f.error).map_err(io_err)?;
            }
            match r.failure {
                Some(e) => Err(CliError::Stage(e)),
                None => Ok(()),
            }
        }
        Command::Convert {
            adapter,
            manifest,
            adapters_dir,
        } => {
            let store = ctx.store()?;
            let mut reg = AdapterRegistry::builtin();
            if let Some(dir) = adapters_dir.or(ctx.config.expansion.adapters_dir.clone()) {
                reg.load_dir(&dir).map_err(config_err)?;
            }
            let r = convert_source(
                &store,
                &reg,
                &adapter,
                &manifest,
                &ctx.config.suffix_table()?,
            )
            .map_err(stage_err)?;
            writeln!(
                out,
                "{}: rows {} inserted {} already present {}",
                r.adapter, r.rows, r.inserted, r.already_present
            )
            .map_err(io_err)
        }
        Command::Review(cmd) => review(&ctx, cmd, out),
        Command::Cost(CostCmd::Ledger) => {
            let counts = ctx.store()?.ledger_counts();
            let b = counts.breakdown(&ctx.config.price);
            writeln!(
                out,
                "captions     {:>10}  {} USD",
                counts.caption_count,
                b.captions.to_grouped()
            )
            .map_err(io_err)?;
            writeln!(
                out,
                "instructions {:>10}  {} USD",
                counts.instruction_count,
                b.generation.to_grouped()
            )
            .map_err(io_err)?;
            writeln!(
                out,
                "corrections  {:>10}  {} USD",
                counts.correction_count,
                b.correction.to_grouped()
            )
            .map_err(io_err)?;
            writeln!(
                out,
                "total                    {} USD",
                b.total().to_grouped()
            )
            .map_err(io_err)
        }
        Command::Cost(CostCmd::Estimate { .. }) => unreachable!("handled above"),
        Command::Export {
            out: path,
            profile,
            format,
            domain: ds,
            qtype: qs,
        } => {
            let store = ctx.store()?;
            let profile: ExportProfile = profile.parse().map_err(config_err)?;
            let filter = ExportFilter {
                domains: ds.iter().map(|d| domain(d)).collect::<Result<_, _>>()?,
                qtypes: qs.iter().map(|q| qtype(q)).collect::<Result<_, _>>()?,
                provenance: Vec::new(),
            };
            let format = match format {
                FormatArg::Jsonl => OutputFormat::Jsonl,
                FormatArg::Json => OutputFormat::JsonArray,
            };
            let tmp = path.with_extension("partial");
            let mut w = BufWriter::new(fs::File::create(&tmp).map_err(io_err)?);
            let n = export_dataset(
                &store,
                &filter,
                profile,
                format,
                &ctx.config.suffix_table()?,
                &mut w,
            )
            .map_err(stage_err)?;
            w.flush().map_err(io_err)?;
            drop(w);
            fs::rename(&tmp, &path).map_err(io_err)?;
            writeln!(out, "exported {n} records to {}", path.display()).map_err(io_err)
        }
        Command::Stats { accepted, json } => {
            let store = ctx.store()?;
            let sel = if accepted {
                StatsSelection::Accepted
            } else {
                StatsSelection::All
            };
            let s = dataset_stats(&store, sel);
            if json {
                print_json(out, &s)
            } else {
                write!(out, "{}", s.table()).map_err(io_err)
            }
        }
        Command::Run {
            stages,
            from,
            dry_run,
            json,
        } => {
            let mut range: StageRange = stages.parse()?;
            if let Some(f) = from {
                range.from = f.parse()?;
                if range.from > range.to {
                    return Err(CliError::Config(format!(
                        "--from {} is after the end of the range",
                        range.from
                    )));
                }
            }
            let result = Pipeline::from_config(ctx.config.clone())?.run(range, dry_run);
            let (report, err) = match result {
                Ok(r) => (r, None),
                Err(PipelineError::StageFailure {
                    report,
                    stage,
                    message,
                }) => (
                    *report,
                    Some(CliError::Stage(format!("{stage}: {message}"))),
                ),
                Err(e) => return Err(e.into()),
            };
            if json {
                print_json(out, &report)?;
            } else {
                print_run_report(out, &report).map_err(io_err)?;
            }
            err.map_or(Ok(()), Err)
        }
    }
}

fn run_range(cfg: PipelineConfig, range: StageRange, dry_run: bool) -> Result<RunReport, CliError> {
    match Pipeline::from_config(cfg)?.run(range, dry_run) {
        Ok(r) => Ok(r),
        Err(e) => Err(e.into()),
    }
}

fn ingest(ctx: &Ctx, cmd: IngestCmd, out: &mut dyn Write) -> CliResult {
    let store = ctx.store()?;
    match cmd {
        IngestCmd::Import { manifest, screen } => {
            let r = import_manifest(&store, &manifest).map_err(stage_err)?;
            print_channel(out, &r)?;
            if screen {
                let (a, rj) = auto_screen(&store, &SystemClock).map_err(stage_err)?;
                writeln!(out, "screened {a} rejected {rj}").map_err(io_err)?;
            }
            Ok(())
        }
        IngestCmd::Crawl {
            domain: d,
            phrases,
            fetch_table,
        } => {
            let phrases = KeyPhraseSet::load(&phrases, domain(&d)?).map_err(config_err)?;
            let dir = ctx.fixture_dir(fetch_table.as_ref(), "crawling")?;
            let fetcher = MockFetcher::load(&dir).map_err(config_err)?;
            let retry = instruct_engine::backend::RetryPolicy::default();
            let r = crawl_channel(&store, &phrases, &fetcher, &retry).map_err(stage_err)?;
            print_channel(out, &r)
        }
        IngestCmd::Expand { anchor, k, index } => {
            let dir = ctx.fixture_dir(index.as_ref(), "similarity expansion")?;
            let idx = MockIndex::load(&dir).map_err(config_err)?;
            let q = SimilarityQuery {
                anchor_image_id: ImageId(anchor),
                k,
                index_name: instruct_engine::backend::SimilarityIndex::name(&idx).to_owned(),
            };
            let r = expand_similar(&store, &q, &idx).map_err(stage_err)?;
            print_channel(out, &r)
        }
        IngestCmd::Screen => {
            let (a, rj) = auto_screen(&store, &SystemClock).map_err(stage_err)?;
            writeln!(out, "screened {a} rejected {rj}").map_err(io_err)
        }
    }
}

fn seeds(ctx: &Ctx, cmd: SeedsCmd, out: &mut dyn Write) -> CliResult {
    match cmd {
        SeedsCmd::Load { dir, trusted } => {
            let dir = dir
                .or(ctx.config.seeds.dir.clone())
                .ok_or_else(|| CliError::Config("no seed directory (--dir or seeds.dir)".into()))?;
            let bank = load_seed_bank(&dir).map_err(config_err)?;
            for w in &bank.warnings {
                writeln!(out, "warning: {w}").map_err(io_err)?;
            }
            let store = ctx.store()?;
            let n = persist_bank(&store, &bank, trusted).map_err(stage_err)?;
            for (d, c) in bank.counts() {
                writeln!(out, "{:<32} {c}", d.key()).map_err(io_err)?;
            }
            writeln!(out, "written {n}").map_err(io_err)
        }
        SeedsCmd::Sample {
            domain: d,
            n,
            seed,
            category,
        } => {
            let pool = ctx.store()?.seeds();
            let picked = sample_seeds(&pool, domain(&d)?, category.as_deref(), n, seed)
                .map_err(stage_err)?;
            for s in picked {
                writeln!(out, "{}\t{}", s.id, s.template).map_err(io_err)?;
            }
            Ok(())
        }
        SeedsCmd::Validate {
            domain: d,
            n,
            seed,
            report,
        } => {
            let d = domain(&d)?;
            let p = ctx.pipeline()?;
            let rep = validate_seeds_small_batch(&p.store, d, n, seed, &p.generator())
                .map_err(stage_err)?;
            writeln!(
                out,
                "{} trials, parse success {:.2}, offending seeds {}",
                rep.trials.len(),
                rep.parse_success_rate,
                rep.offending.len()
            )
            .map_err(io_err)?;
            let path = report
                .unwrap_or_else(|| PathBuf::from(format!("seed-validation-{}.json", d.key())));
            fs::write(
                &path,
                serde_json::to_string_pretty(&rep).map_err(stage_err)?,
            )
            .map_err(io_err)?;
            writeln!(
                out,
                "report written to {}; approve with `seeds approve --report`",
                path.display()
            )
            .map_err(io_err)
        }
        SeedsCmd::Approve { report, exclude } => {
            let text = fs::read_to_string(&report).map_err(config_err)?;
            let rep: SeedValidationReport = serde_json::from_str(&text).map_err(config_err)?;
            let exclude: Vec<SeedId> = exclude.into_iter().map(SeedId).collect();
            let n = approve_report(&*ctx.store()?, &rep, &exclude).map_err(stage_err)?;
            writeln!(out, "validated {n} seeds").map_err(io_err)
        }
    }
}

fn review(ctx: &Ctx, cmd: ReviewCmd, out: &mut dyn Write) -> CliResult {
    let svc = ctx.review()?;
    match cmd {
        ReviewCmd::Serve { addr } => {
            let rt = tokio::runtime::Runtime::new().map_err(io_err)?;
            writeln!(out, "serving review API on http://{addr}").map_err(io_err)?;
            out.flush().map_err(io_err)?;
            rt.block_on(review_server::serve(
                addr,
                review_server::AppState::new(svc),
            ))
            .map_err(stage_err)
        }
        ReviewCmd::Open {
            domain: d,
            limit,
            min_rounds,
            seed,
            by,
        } => {
            let d = domain(&d)?;
            let ids = select_unreviewed(svc.store(), d, limit);
            let b = svc
                .open_batch(d, &ids, min_rounds, seed, &by)
                .map_err(stage_err)?;
            writeln!(out, "{}\t{} tasks", b.id, b.slots.len()).map_err(io_err)
        }
        ReviewCmd::List => {
            for b in svc.batches() {
                writeln!(
                    out,
                    "{}\t{}\t{:?}\trounds {}/{}\ttasks {}",
                    b.id,
                    b.domain.key(),
                    b.state,
                    b.rounds_completed,
                    b.min_rounds,
                    b.active_tasks
                )
                .map_err(io_err)?;
            }
            Ok(())
        }
        ReviewCmd::Next { batch, reviewer } => {
            let t = svc
                .next_task(&BatchId(batch), &reviewer)
                .map_err(stage_err)?;
            print_json(out, &t)
        }
        ReviewCmd::Verdict {
            task,
            reviewer,
            approve,
            reject,
            reason,
            correct,
        } => {
            let verdict = match (approve, reject, correct) {
                (true, _, _) => Verdict::Approve,
                (_, true, _) => Verdict::Reject { reason },
                (_, _, Some(json)) => Verdict::Correct {
                    correction: serde_json::from_str::<Correction>(&json).map_err(config_err)?,
                },
                _ => {
                    return Err(CliError::Config(
                        "one of --approve, --reject, --correct is required".into(),
                    ))
                }
            };
            let o = svc
                .submit_verdict(&TaskId(task), &reviewer, &verdict)
                .map_err(stage_err)?;
            print_json(out, &o)
        }
        ReviewCmd::Advance { batch, by } => {
            let b = svc.advance_round(&BatchId(batch), &by).map_err(stage_err)?;
            print_json(out, &b.summary())
        }
    }
}
